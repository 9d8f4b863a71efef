#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "nasaudit/core/linalg.hpp"
#include "nasaudit/core/network.hpp"
#include "nasaudit/search_space.hpp"

namespace nasaudit {

enum class InputSource { dataset, uniform_noise, gaussian_noise };
enum class JacobianFunctional { sum_logits, target_logit };
enum class ReluLogdetVariant { logdet, log_frobenius };

inline const char* to_string(InputSource s) {
    switch (s) {
        case InputSource::dataset: return "dataset";
        case InputSource::uniform_noise: return "uniform_noise";
        case InputSource::gaussian_noise: return "gaussian_noise";
    }
    return "?";
}

inline InputSource input_source_from_string(const std::string& s) {
    if (s == "dataset") return InputSource::dataset;
    if (s == "uniform_noise") return InputSource::uniform_noise;
    if (s == "gaussian_noise") return InputSource::gaussian_noise;
    throw ConfigError("unknown input source '" + s + "'");
}

inline const std::vector<std::string>& zse_names() {
    static const std::vector<std::string> names{"grad_norm", "plain",     "snip",        "grasp",
                                                "fisher",    "synflow",   "jacob_cov",   "relu_logdet"};
    return names;
}

inline const std::vector<std::string>& baseline_names() {
    static const std::vector<std::string> names{"relu_count", "params", "flops"};
    return names;
}

struct ZseConfig {
    std::string estimator = "synflow";
    std::size_t n_batches = 5;
    std::size_t batch_size = 64;
    InputSource source = InputSource::dataset;
    std::uint64_t seed = 20;
    double jacob_k = 1e-5;
    JacobianFunctional jacob_functional = JacobianFunctional::sum_logits;
    /// HVP step relative to the parameter norm.
    double grasp_eps = 1e-3;
    /// Batch-norm mode for data-dependent estimators (batch statistics by default).
    Mode bn_mode = Mode::train;
    ReluLogdetVariant relu_logdet_variant = ReluLogdetVariant::logdet;

    void validate() const {
        if (n_batches < 1) throw ConfigError("n_batches must be >= 1");
        if (!(jacob_k > 0.0)) throw ConfigError("jacob_cov offset k must be positive");
        if (!(grasp_eps > 0.0)) throw ConfigError("grasp eps must be positive");
        if (std::find(zse_names().begin(), zse_names().end(), estimator) == zse_names().end())
            throw ConfigError("unknown zero-shot estimator '" + estimator + "'");
    }
};

struct ZseScore {
    std::string genotype;
    std::string estimator;
    double value = 0.0;
    std::vector<double> per_batch;
    /// "log" when value is a natural logarithm (synflow), else "plain".
    std::string domain = "plain";
};

namespace detail {

template <std::floating_point T>
GraphOptions<T> zse_options(Mode bn_mode) {
    GraphOptions<T> o;
    o.mode = bn_mode;
    o.update_running_stats = false;
    o.dropout = false;
    return o;
}

/// Loss gradient with all parameter grads zeroed first.
template <std::floating_point T>
std::vector<NamedTensor<T>> loss_gradients(Network<T>& net, const Batch<T>& batch, Mode bn_mode) {
    auto params = net.parameters();
    if (params.empty()) throw ConfigError("estimator needs a network with parameters");
    zero_grads<T>(params);
    accumulate_loss_gradient(net, batch, zse_options<T>(bn_mode));
    check_finite_grads<T>(params);
    return params;
}

}  // namespace detail

/// Sum over parameter tensors of ||dL/dtheta||_2.
template <std::floating_point T>
double grad_norm(Network<T>& net, const Batch<T>& batch, Mode bn_mode = Mode::train) {
    double s = 0.0;
    for (const auto& p : detail::loss_gradients(net, batch, bn_mode)) {
        double n2 = 0.0;
        for (T g : *p.tensor->grad) n2 += static_cast<double>(g) * static_cast<double>(g);
        s += std::sqrt(n2);
    }
    return s;
}

/// Sum of dL/dtheta * theta.
template <std::floating_point T>
double plain(Network<T>& net, const Batch<T>& batch, Mode bn_mode = Mode::train) {
    double s = 0.0;
    for (const auto& p : detail::loss_gradients(net, batch, bn_mode))
        for (std::size_t i = 0; i < p.tensor->size(); ++i)
            s += static_cast<double>((*p.tensor->grad)[i]) * static_cast<double>(p.tensor->data[i]);
    return s;
}

/// Sum of |dL/dtheta * theta|.
template <std::floating_point T>
double snip(Network<T>& net, const Batch<T>& batch, Mode bn_mode = Mode::train) {
    double s = 0.0;
    for (const auto& p : detail::loss_gradients(net, batch, bn_mode))
        for (std::size_t i = 0; i < p.tensor->size(); ++i)
            s += std::abs(static_cast<double>((*p.tensor->grad)[i]) * static_cast<double>(p.tensor->data[i]));
    return s;
}

/// Sum of -(H g) * theta with g = dL/dtheta; Hg by central differences of the gradient with
/// step eps_rel * max(||theta||, 1).
template <std::floating_point T>
double grasp(Network<T>& net, const Batch<T>& batch, double eps_rel = 1e-3, Mode bn_mode = Mode::train) {
    auto params = detail::loss_gradients(net, batch, bn_mode);
    auto g = flatten_grads<T>(params);
    double gn = 0.0, tn = 0.0;
    for (T v : g) gn += static_cast<double>(v) * static_cast<double>(v);
    if (gn == 0.0) return 0.0;
    for (const auto& p : params)
        for (T v : p.tensor->data) tn += static_cast<double>(v) * static_cast<double>(v);
    const double eps = eps_rel * std::max(std::sqrt(tn), 1.0);
    auto hg = network_hvp<T>(net, batch, g, eps, detail::zse_options<T>(bn_mode));
    double s = 0.0;
    std::size_t off = 0;
    for (const auto& p : params) {
        for (std::size_t i = 0; i < p.tensor->size(); ++i)
            s -= static_cast<double>(hg[off + i]) * static_cast<double>(p.tensor->data[i]);
        off += p.tensor->size();
    }
    return s;
}

/// Sum over every channel of every post-ReLU activation of (sum_{batch,spatial} z * dL/dz)^2.
template <std::floating_point T>
double fisher(Network<T>& net, const Batch<T>& batch, Mode bn_mode = Mode::train) {
    Graph<T> g(detail::zse_options<T>(bn_mode));
    auto logits = net.forward(g, g.input(batch.x, true));
    auto loss = ops::softmax_cross_entropy(g, logits, std::span<const int>(batch.y));
    if (!std::isfinite(static_cast<double>(g.value(loss).data[0]))) throw NumericError("loss", "non-finite loss");
    if (g.activations().empty()) throw ConfigError("fisher needs a network with ReLU activations");
    g.backward(loss);
    double s = 0.0;
    for (auto id : g.activations()) {
        const auto& z = g.value(id);
        auto dz = g.grad(id);
        const std::size_t n = z.dim(0), c = z.rank() > 1 ? z.dim(1) : 1;
        const std::size_t hw = z.size() / std::max<std::size_t>(n * c, 1);
        for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            if (!dz.empty())
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t j = 0; j < hw; ++j) {
                        const std::size_t i = (b * c + ch) * hw + j;
                        acc += static_cast<double>(z.data[i]) * static_cast<double>(dz[i]);
                    }
            s += acc * acc;
        }
    }
    return s;
}

struct SynflowResult {
    /// Score in plain space (extended precision).
    long double score = 0.0L;
    /// Natural log of score; -inf when score is 0.
    double log_score = 0.0;
    bool extended_precision = false;
};

namespace detail {

template <std::floating_point T>
bool synflow_pass(Network<T>& net, const Shape& input_shape, long double& out) {
    auto params = net.parameters();
    std::vector<std::vector<T>> saved;
    for (const auto& p : params) {
        saved.push_back(p.tensor->data);
        for (auto& v : p.tensor->data) v = std::abs(v);
    }
    bool ok = true;
    try {
        zero_grads<T>(params);
        GraphOptions<T> o;
        o.linearize = true;
        o.update_running_stats = false;
        o.dropout = false;
        Graph<T> g(std::move(o));
        Shape s = input_shape;
        s[0] = 1;
        auto logits = net.forward(g, g.input(Tensor<T>(s, T(1))));
        auto r = ops::sum(g, logits);
        ok = std::isfinite(static_cast<double>(g.value(r).data[0]));
        if (ok) {
            g.backward(r);
            long double total = 0.0L;
            for (const auto& p : params)
                for (std::size_t i = 0; i < p.tensor->size(); ++i) {
                    const T gv = (*p.tensor->grad)[i];
                    if (!std::isfinite(gv)) ok = false;
                    total += static_cast<long double>(gv) * static_cast<long double>(p.tensor->data[i]);
                }
            out = total;
            ok = ok && std::isfinite(total);
        }
    } catch (...) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor->data = std::move(saved[i]);
        zero_grads<T>(params);
        throw;
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor->data = std::move(saved[i]);
    zero_grads<T>(params);
    return ok;
}

}  // namespace detail

/// Data-free synaptic flow: with |theta|, identity batch-norm/ReLU and an all-ones input,
/// R = sum(output) and the score is sum(dR/dtheta * theta). Parameters are restored exactly.
/// On overflow the pass is repeated in extended precision.
template <std::floating_point T>
SynflowResult synflow(Network<T>& net, const Shape& input_shape) {
    SynflowResult r;
    long double v = 0.0L;
    if (!detail::synflow_pass(net, input_shape, v)) {
        auto wide = net.widen();
        if (!wide) throw NumericError("synflow", "overflow and no extended-precision network available");
        if (!detail::synflow_pass(*wide, input_shape, v))
            throw NumericError("synflow", "overflow even in extended precision");
        r.extended_precision = true;
    }
    r.score = v;
    r.log_score = v > 0.0L ? static_cast<double>(std::log(v)) : -std::numeric_limits<double>::infinity();
    return r;
}

/// Input jacobians of the chosen logit functional, one row per example.
template <std::floating_point T>
std::vector<std::vector<double>> input_jacobians(Network<T>& net, const Batch<T>& batch,
                                                 JacobianFunctional f = JacobianFunctional::sum_logits,
                                                 Mode bn_mode = Mode::train) {
    Graph<T> g(detail::zse_options<T>(bn_mode));
    auto x = g.input(batch.x, true);
    auto logits = net.forward(g, x);
    typename Graph<T>::Id scalar;
    if (f == JacobianFunctional::sum_logits) {
        scalar = ops::sum(g, logits);
    } else {
        const std::size_t n = g.shape(logits)[0], k = g.shape(logits)[1];
        std::vector<T> mask(n * k, T(0));
        for (std::size_t i = 0; i < n; ++i) mask[i * k + static_cast<std::size_t>(batch.y.at(i))] = T(1);
        scalar = ops::sum(g, ops::mul_const(g, logits, std::move(mask)));
    }
    g.backward(scalar);
    auto gx = g.grad(x);
    const std::size_t n = batch.x.dim(0), d = batch.x.size() / n;
    std::vector<std::vector<double>> rows(n, std::vector<double>(d, 0.0));
    if (!gx.empty())
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) rows[i][j] = static_cast<double>(gx[i * d + j]);
    return rows;
}

/// -sum_i [log(s_i + k) + 1/(s_i + k)] over eigenvalues s_i of an N x N covariance; eigenvalues
/// below zero (round-off on a PSD matrix) are clamped to zero.
inline double jacob_cov_from_covariance(const Matrix& cov, double k) {
    double s = 0.0;
    for (double e : symmetric_eigenvalues(cov, 1e-6)) {
        const double v = std::max(e, 0.0) + k;
        s -= std::log(v) + 1.0 / v;
    }
    return s;
}

template <std::floating_point T>
double jacob_cov(Network<T>& net, const Batch<T>& batch, double k = 1e-5,
                 JacobianFunctional f = JacobianFunctional::sum_logits, Mode bn_mode = Mode::train) {
    if (batch.size() < 2) throw ConfigError("jacob_cov needs a batch of at least 2 examples");
    if (!(k > 0.0)) throw ConfigError("jacob_cov offset k must be positive");
    return jacob_cov_from_covariance(row_covariance(input_jacobians(net, batch, f, bn_mode)), k);
}

/// Binary activation codes (z > 0) over every ReLU, one row per example.
template <std::floating_point T>
std::vector<std::vector<bool>> activation_codes(Network<T>& net, const Batch<T>& batch, Mode bn_mode = Mode::train) {
    Graph<T> g(detail::zse_options<T>(bn_mode));
    net.forward(g, g.input(batch.x));
    if (g.activations().empty()) throw ConfigError("relu_logdet needs a network with ReLU activations");
    const std::size_t n = batch.x.dim(0);
    std::vector<std::vector<bool>> codes(n);
    for (auto id : g.activations()) {
        const auto& z = g.value(id);
        const std::size_t per = z.size() / n;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < per; ++j) codes[i].push_back(z.data[i * per + j] > T(0));
    }
    return codes;
}

/// K_H[i][j] = N_A - hamming(c_i, c_j); log|det K_H| (or log ||K_H||_F). Identical codes give -inf.
inline double relu_logdet_from_codes(const std::vector<std::vector<bool>>& codes,
                                     ReluLogdetVariant variant = ReluLogdetVariant::logdet) {
    const std::size_t n = codes.size();
    if (n < 2) throw ConfigError("relu_logdet needs a batch of at least 2 examples");
    const std::size_t na = codes.front().size();
    Matrix k(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            std::size_t d = 0;
            for (std::size_t t = 0; t < na; ++t) d += codes[i][t] != codes[j][t];
            k(i, j) = k(j, i) = static_cast<double>(na - d);
        }
    if (variant == ReluLogdetVariant::log_frobenius) return std::log(k.frobenius());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (codes[i] == codes[j]) return -std::numeric_limits<double>::infinity();
    return log_abs_det(k);
}

template <std::floating_point T>
double relu_logdet(Network<T>& net, const Batch<T>& batch, ReluLogdetVariant variant = ReluLogdetVariant::logdet,
                   Mode bn_mode = Mode::train) {
    return relu_logdet_from_codes(activation_codes(net, batch, bn_mode), variant);
}

struct Baselines {
    std::uint64_t relu_count = 0;
    std::uint64_t params = 0;
    std::uint64_t flops = 0;
};

inline Baselines baselines(const Genotype& g, const SearchSpaceDesc& space) {
    const auto pf = count_params_flops(g, space);
    return {cell_relu_count(g, space), pf.params, pf.flops};
}

inline double baseline_value(const Baselines& b, const std::string& name) {
    if (name == "relu_count") return static_cast<double>(b.relu_count);
    if (name == "params") return static_cast<double>(b.params);
    if (name == "flops") return static_cast<double>(b.flops);
    throw ConfigError("unknown baseline '" + name + "'");
}

struct VoteResult {
    /// Copeland wins per architecture (a tied pair gives each side 0.5).
    std::vector<double> wins;
    /// Rank 1 = best; equal win counts share the mean rank.
    std::vector<double> ranking;
};

/// Mean ranks (1 = largest value) with ties sharing the average rank.
inline std::vector<double> descending_mean_ranks(const std::vector<double>& v) {
    const std::size_t m = v.size();
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    std::vector<double> r(m);
    for (std::size_t i = 0; i < m;) {
        std::size_t j = i;
        while (j + 1 < m && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double mean = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t t = i; t <= j; ++t) r[idx[t]] = mean;
        i = j + 1;
    }
    return r;
}

/// Pairwise majority vote of an odd number of experts (higher score = better). An expert with
/// equal scores on a pair abstains for that pair.
inline VoteResult vote(const std::vector<std::vector<double>>& experts) {
    if (experts.size() < 3 || experts.size() % 2 == 0)
        throw ConfigError("vote needs an odd number (>= 3) of experts, got " + std::to_string(experts.size()));
    const std::size_t m = experts.front().size();
    for (const auto& e : experts)
        if (e.size() != m) throw ConfigError("vote experts must score the same architectures");
    VoteResult r;
    r.wins.assign(m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j) {
            int balance = 0;
            for (const auto& e : experts) balance += (e[i] > e[j]) - (e[i] < e[j]);
            if (balance > 0) r.wins[i] += 1.0;
            else if (balance < 0) r.wins[j] += 1.0;
            else {
                r.wins[i] += 0.5;
                r.wins[j] += 0.5;
            }
        }
    r.ranking = descending_mean_ranks(r.wins);
    return r;
}

/// Random inputs with the dataset's shape and random labels.
template <std::floating_point T>
std::vector<Batch<T>> noise_batches(InputSource source, const Shape& shape, std::size_t n_batches,
                                    std::size_t num_classes, std::uint64_t seed) {
    if (source == InputSource::dataset) throw ConfigError("noise_batches needs a noise source");
    std::mt19937_64 rng(seed);
    std::vector<Batch<T>> out;
    for (std::size_t b = 0; b < n_batches; ++b) {
        Batch<T> batch{Tensor<T>(shape), std::vector<int>(shape.at(0))};
        if (source == InputSource::uniform_noise) {
            std::uniform_real_distribution<double> u(-1.0, 1.0);
            for (auto& v : batch.x.data) v = static_cast<T>(u(rng));
        } else {
            std::normal_distribution<double> n(0.0, 1.0);
            for (auto& v : batch.x.data) v = static_cast<T>(n(rng));
        }
        std::uniform_int_distribution<int> label(0, static_cast<int>(num_classes) - 1);
        for (auto& y : batch.y) y = label(rng);
        out.push_back(std::move(batch));
    }
    return out;
}

/// Evaluates one estimator over the first cfg.n_batches batches; the value is the arithmetic
/// mean of per-batch scores and any -inf batch makes it -inf. synflow is data-free and is
/// reported as a log score.
template <std::floating_point T>
ZseScore score_zse(const ZseConfig& cfg, Network<T>& net, const std::vector<Batch<T>>& batches,
                   const std::string& genotype_id = "") {
    cfg.validate();
    if (batches.size() < cfg.n_batches)
        throw ConfigError("estimator needs " + std::to_string(cfg.n_batches) + " batches, got " +
                          std::to_string(batches.size()));
    ZseScore s;
    s.genotype = genotype_id;
    s.estimator = cfg.estimator;
    if (cfg.estimator == "synflow") {
        const double v = synflow(net, batches.front().x.shape).log_score;
        s.per_batch.assign(cfg.n_batches, v);
        s.value = v;
        s.domain = "log";
        return s;
    }
    for (std::size_t b = 0; b < cfg.n_batches; ++b) {
        const auto& batch = batches[b];
        double v = 0.0;
        if (cfg.estimator == "grad_norm") v = grad_norm(net, batch, cfg.bn_mode);
        else if (cfg.estimator == "plain") v = plain(net, batch, cfg.bn_mode);
        else if (cfg.estimator == "snip") v = snip(net, batch, cfg.bn_mode);
        else if (cfg.estimator == "grasp") v = grasp(net, batch, cfg.grasp_eps, cfg.bn_mode);
        else if (cfg.estimator == "fisher") v = fisher(net, batch, cfg.bn_mode);
        else if (cfg.estimator == "jacob_cov") v = jacob_cov(net, batch, cfg.jacob_k, cfg.jacob_functional, cfg.bn_mode);
        else if (cfg.estimator == "relu_logdet") v = relu_logdet(net, batch, cfg.relu_logdet_variant, cfg.bn_mode);
        s.per_batch.push_back(v);
    }
    double sum = 0.0;
    bool neg_inf = false;
    for (double v : s.per_batch) {
        if (v == -std::numeric_limits<double>::infinity()) neg_inf = true;
        else sum += v;
    }
    s.value = neg_inf ? -std::numeric_limits<double>::infinity() : sum / static_cast<double>(s.per_batch.size());
    return s;
}

}  // namespace nasaudit
