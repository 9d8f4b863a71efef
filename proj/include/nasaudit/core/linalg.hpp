#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "nasaudit/core/tensor.hpp"

namespace nasaudit {

/// Square row-major matrix of doubles.
struct Matrix {
    std::size_t n = 0;
    std::vector<double> a;

    Matrix() = default;
    explicit Matrix(std::size_t size, double fill = 0.0) : n(size), a(size * size, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }

    double trace() const {
        double t = 0.0;
        for (std::size_t i = 0; i < n; ++i) t += (*this)(i, i);
        return t;
    }

    double frobenius() const {
        double s = 0.0;
        for (double v : a) s += v * v;
        return std::sqrt(s);
    }
};

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi rotations).
inline std::vector<double> symmetric_eigenvalues(Matrix m, double symmetry_tol = 1e-8) {
    const std::size_t n = m.n;
    const double scale = std::max(1.0, m.frobenius());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(m(i, j) - m(j, i)) > symmetry_tol * scale)
                throw ConfigError("symmetric_eigenvalues: matrix is not symmetric at (" +
                                  std::to_string(i) + "," + std::to_string(j) + ")");
    for (std::size_t sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += m(i, j) * m(i, j);
        if (off <= 1e-30 * scale * scale) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = m(p, q);
                if (apq == 0.0) continue;
                const double theta = (m(q, q) - m(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double mkp = m(k, p), mkq = m(k, q);
                    m(k, p) = c * mkp - s * mkq;
                    m(k, q) = s * mkp + c * mkq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double mpk = m(p, k), mqk = m(q, k);
                    m(p, k) = c * mpk - s * mqk;
                    m(q, k) = s * mpk + c * mqk;
                }
            }
    }
    std::vector<double> ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = m(i, i);
    std::sort(ev.begin(), ev.end());
    return ev;
}

/// log|det(m)| via LU with partial pivoting; -inf when the matrix is numerically singular.
inline double log_abs_det(Matrix m) {
    const std::size_t n = m.n;
    const double tol = 1e-12 * std::max(1.0, m.frobenius());
    double logdet = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t piv = k;
        for (std::size_t i = k + 1; i < n; ++i)
            if (std::abs(m(i, k)) > std::abs(m(piv, k))) piv = i;
        if (std::abs(m(piv, k)) <= tol) return -std::numeric_limits<double>::infinity();
        if (piv != k)
            for (std::size_t j = 0; j < n; ++j) std::swap(m(k, j), m(piv, j));
        logdet += std::log(std::abs(m(k, k)));
        for (std::size_t i = k + 1; i < n; ++i) {
            const double f = m(i, k) / m(k, k);
            if (f == 0.0) continue;
            for (std::size_t j = k; j < n; ++j) m(i, j) -= f * m(k, j);
        }
    }
    return logdet;
}

/// Covariance between the rows of `rows` (each row one variable observed over its columns),
/// normalized by (columns - 1).
inline Matrix row_covariance(const std::vector<std::vector<double>>& rows) {
    const std::size_t n = rows.size();
    Matrix c(n);
    if (n == 0) return c;
    const std::size_t d = rows.front().size();
    if (d < 2) throw ConfigError("row_covariance needs at least two observations per row");
    std::vector<std::vector<double>> centered(rows);
    for (auto& r : centered) {
        if (r.size() != d) throw ConfigError("row_covariance: ragged rows");
        double mu = 0.0;
        for (double v : r) mu += v;
        mu /= static_cast<double>(d);
        for (double& v : r) v -= mu;
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += centered[i][k] * centered[j][k];
            c(i, j) = c(j, i) = s / static_cast<double>(d - 1);
        }
    return c;
}

}  // namespace nasaudit
