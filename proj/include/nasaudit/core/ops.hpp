#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "nasaudit/core/graph.hpp"

// Differentiable primitives over Graph. Every op validates shapes and raises ShapeError with
// the graph's current layer index.

namespace nasaudit::ops {

template <std::floating_point T>
using Id = typename Graph<T>::Id;

namespace detail {

template <std::floating_point T>
void require(const Graph<T>& g, bool ok, const std::string& what) {
    if (!ok) throw ShapeError(g.layer(), what);
}

template <std::floating_point T>
void require_rank(const Graph<T>& g, Id<T> x, std::size_t rank, const char* op) {
    require(g, g.shape(x).size() == rank,
            std::string(op) + " expects rank " + std::to_string(rank) + " input, got " +
                shape_str(g.shape(x)));
}

}  // namespace detail

template <std::floating_point T>
Id<T> add(Graph<T>& g, Id<T> a, Id<T> b) {
    detail::require(g, g.shape(a) == g.shape(b),
                    "add shape mismatch " + shape_str(g.shape(a)) + " vs " + shape_str(g.shape(b)));
    Tensor<T> out = g.value(a);
    const auto& bv = g.value(b).data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
    return g.emit(std::move(out), {a, b},
                  [a, b](Graph<T>& gr, Id<T> self) {
                      auto dy = gr.grad(self);
                      for (Id<T> p : {a, b}) {
                          if (!gr.needs_grad(p)) continue;
                          auto& gp = gr.grad_mut(p);
                          for (std::size_t i = 0; i < dy.size(); ++i) gp[i] += dy[i];
                      }
                  },
                  "add");
}

/// Elementwise sum of equally shaped tensors.
template <std::floating_point T>
Id<T> add_n(Graph<T>& g, const std::vector<Id<T>>& xs) {
    detail::require(g, !xs.empty(), "add_n of zero tensors");
    if (xs.size() == 1) return xs.front();
    Tensor<T> out = g.value(xs[0]);
    for (std::size_t k = 1; k < xs.size(); ++k) {
        detail::require(g, g.shape(xs[k]) == out.shape, "add_n shape mismatch");
        const auto& v = g.value(xs[k]).data;
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += v[i];
    }
    return g.emit(std::move(out), xs,
                  [xs](Graph<T>& gr, Id<T> self) {
                      auto dy = gr.grad(self);
                      for (Id<T> p : xs) {
                          if (!gr.needs_grad(p)) continue;
                          auto& gp = gr.grad_mut(p);
                          for (std::size_t i = 0; i < dy.size(); ++i) gp[i] += dy[i];
                      }
                  },
                  "add_n");
}

template <std::floating_point T>
Id<T> scale(Graph<T>& g, Id<T> x, T factor) {
    Tensor<T> out = g.value(x);
    for (auto& v : out.data) v *= factor;
    return g.emit(std::move(out), {x},
                  [x, factor](Graph<T>& gr, Id<T> self) {
                      auto dy = gr.grad(self);
                      auto& gx = gr.grad_mut(x);
                      for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += factor * dy[i];
                  },
                  "scale");
}

/// Sum of all elements, accumulated in double.
template <std::floating_point T>
Id<T> sum(Graph<T>& g, Id<T> x) {
    double acc = 0.0;
    for (T v : g.value(x).data) acc += static_cast<double>(v);
    Tensor<T> out({1}, static_cast<T>(acc));
    return g.emit(std::move(out), {x},
                  [x](Graph<T>& gr, Id<T> self) {
                      const T dy = gr.grad(self)[0];
                      for (auto& v : gr.grad_mut(x)) v += dy;
                  },
                  "sum");
}

template <std::floating_point T>
Id<T> mean(Graph<T>& g, Id<T> x) {
    const std::size_t n = g.value(x).size();
    return scale(g, sum(g, x), T(1) / static_cast<T>(n));
}

/// Elementwise product of two equally shaped tensors.
template <std::floating_point T>
Id<T> mul(Graph<T>& g, Id<T> a, Id<T> b) {
    detail::require(g, g.shape(a) == g.shape(b),
                    "mul shape mismatch " + shape_str(g.shape(a)) + " vs " + shape_str(g.shape(b)));
    Tensor<T> out = g.value(a);
    const auto& bv = g.value(b).data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv[i];
    return g.emit(std::move(out), {a, b},
                  [a, b](Graph<T>& gr, Id<T> self) {
                      auto dy = gr.grad(self);
                      if (gr.needs_grad(a)) {
                          auto& ga = gr.grad_mut(a);
                          const auto& bv = gr.value(b).data;
                          for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += dy[i] * bv[i];
                      }
                      if (gr.needs_grad(b)) {
                          auto& gb = gr.grad_mut(b);
                          const auto& av = gr.value(a).data;
                          for (std::size_t i = 0; i < dy.size(); ++i) gb[i] += dy[i] * av[i];
                      }
                  },
                  "mul");
}

/// Elementwise product with a constant tensor of equal shape.
template <std::floating_point T>
Id<T> mul_const(Graph<T>& g, Id<T> x, std::vector<T> c) {
    detail::require(g, c.size() == g.value(x).size(), "mul_const size mismatch");
    Tensor<T> out = g.value(x);
    for (std::size_t i = 0; i < c.size(); ++i) out.data[i] *= c[i];
    return g.emit(std::move(out), {x},
                  [x, c = std::move(c)](Graph<T>& gr, Id<T> self) {
                      auto dy = gr.grad(self);
                      auto& gx = gr.grad_mut(x);
                      for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += c[i] * dy[i];
                  },
                  "mul_const");
}

/// Same data, new shape.
template <std::floating_point T>
Id<T> reshape(Graph<T>& g, Id<T> x, Shape shape) {
    detail::require(g, numel(shape) == g.value(x).size(),
                    "reshape " + shape_str(g.shape(x)) + " -> " + shape_str(shape));
    Tensor<T> out(std::move(shape), g.value(x).data);
    return g.emit(std::move(out), {x},
                  [x](Graph<T>& gr, Id<T> self) {
                      auto dy = gr.grad(self);
                      auto& gx = gr.grad_mut(x);
                      for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += dy[i];
                  },
                  "reshape");
}

template <std::floating_point T>
Id<T> flatten(Graph<T>& g, Id<T> x) {
    const auto& s = g.shape(x);
    detail::require(g, !s.empty(), "flatten of a scalar");
    return reshape(g, x, Shape{s[0], g.value(x).size() / std::max<std::size_t>(s[0], 1)});
}

/// out[i] = src[indices[i]]; the backward pass scatters into src.
template <std::floating_point T>
Id<T> gather(Graph<T>& g, Id<T> src, std::vector<std::size_t> indices, Shape shape) {
    detail::require(g, numel(shape) == indices.size(), "gather index count vs shape");
    const auto& sv = g.value(src).data;
    Tensor<T> out(std::move(shape));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        detail::require(g, indices[i] < sv.size(), "gather index out of range");
        out.data[i] = sv[indices[i]];
    }
    return g.emit(std::move(out), {src},
                  [src, idx = std::move(indices)](Graph<T>& gr, Id<T> self) {
                      auto dy = gr.grad(self);
                      auto& gs = gr.grad_mut(src);
                      for (std::size_t i = 0; i < idx.size(); ++i) gs[idx[i]] += dy[i];
                  },
                  "gather");
}

/// x: [N, in], w: [out, in], optional b: [out] -> [N, out].
template <std::floating_point T>
Id<T> linear(Graph<T>& g, Id<T> x, Id<T> w, std::optional<Id<T>> b = std::nullopt) {
    detail::require_rank(g, x, 2, "linear");
    detail::require_rank(g, w, 2, "linear weight");
    const std::size_t n = g.shape(x)[0], in = g.shape(x)[1], out_f = g.shape(w)[0];
    detail::require(g, g.shape(w)[1] == in,
                    "linear expects " + std::to_string(g.shape(w)[1]) + " input features, got " +
                        std::to_string(in));
    if (b) detail::require(g, g.shape(*b) == Shape{out_f}, "linear bias shape");
    Tensor<T> out({n, out_f});
    g.gemm(false, true, n, out_f, in, g.value(x).data.data(), g.value(w).data.data(),
           out.data.data(), false);
    if (b) {
        const auto& bv = g.value(*b).data;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < out_f; ++j) out.data[i * out_f + j] += bv[j];
    }
    std::vector<Id<T>> parents{x, w};
    if (b) parents.push_back(*b);
    return g.emit(
        std::move(out), parents,
        [x, w, b, n, in, out_f](Graph<T>& gr, Id<T> self) {
            auto dy = gr.grad(self);
            if (gr.needs_grad(x))
                gr.gemm(false, false, n, in, out_f, dy.data(), gr.value(w).data.data(),
                        gr.grad_mut(x).data(), true);
            if (gr.needs_grad(w))
                gr.gemm(true, false, out_f, in, n, dy.data(), gr.value(x).data.data(),
                        gr.grad_mut(w).data(), true);
            if (b && gr.needs_grad(*b)) {
                auto& gb = gr.grad_mut(*b);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < out_f; ++j) gb[j] += dy[i * out_f + j];
            }
        },
        "linear");
}

struct Conv2dParams {
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;
};

namespace detail {

struct ConvGeometry {
    std::size_t n, c, h, w, o, k, ho, wo, groups, cg, og, stride, pad;
    std::size_t col_rows() const { return cg * k * k; }
    std::size_t col_cols() const { return ho * wo; }
};

// col[(ci*k + ky)*k + kx][oy*wo + ox] = x[n][g*cg + ci][oy*s - p + ky][ox*s - p + kx]
template <std::floating_point T>
void im2col(const ConvGeometry& cg, const T* x, std::size_t group, T* col) {
    const std::size_t plane = cg.h * cg.w;
    for (std::size_t ci = 0; ci < cg.cg; ++ci) {
        const T* xc = x + (group * cg.cg + ci) * plane;
        for (std::size_t ky = 0; ky < cg.k; ++ky)
            for (std::size_t kx = 0; kx < cg.k; ++kx) {
                T* row = col + ((ci * cg.k + ky) * cg.k + kx) * cg.col_cols();
                for (std::size_t oy = 0; oy < cg.ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * cg.stride + ky) -
                                              static_cast<std::ptrdiff_t>(cg.pad);
                    T* r = row + oy * cg.wo;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(cg.h)) {
                        std::fill(r, r + cg.wo, T(0));
                        continue;
                    }
                    for (std::size_t ox = 0; ox < cg.wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * cg.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(cg.pad);
                        r[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(cg.w))
                                    ? T(0)
                                    : xc[static_cast<std::size_t>(iy) * cg.w +
                                         static_cast<std::size_t>(ix)];
                    }
                }
            }
    }
}

template <std::floating_point T>
void col2im(const ConvGeometry& cg, const T* col, std::size_t group, T* dx) {
    const std::size_t plane = cg.h * cg.w;
    for (std::size_t ci = 0; ci < cg.cg; ++ci) {
        T* xc = dx + (group * cg.cg + ci) * plane;
        for (std::size_t ky = 0; ky < cg.k; ++ky)
            for (std::size_t kx = 0; kx < cg.k; ++kx) {
                const T* row = col + ((ci * cg.k + ky) * cg.k + kx) * cg.col_cols();
                for (std::size_t oy = 0; oy < cg.ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * cg.stride + ky) -
                                              static_cast<std::ptrdiff_t>(cg.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(cg.h)) continue;
                    for (std::size_t ox = 0; ox < cg.wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * cg.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(cg.pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(cg.w)) continue;
                        xc[static_cast<std::size_t>(iy) * cg.w + static_cast<std::size_t>(ix)] +=
                            row[oy * cg.wo + ox];
                    }
                }
            }
    }
}

}  // namespace detail

/// x: [N, C, H, W], w: [O, C/groups, k, k] -> [N, O, Ho, Wo]. im2col + GEMM per group.
template <std::floating_point T>
Id<T> conv2d(Graph<T>& g, Id<T> x, Id<T> w, Conv2dParams p,
             std::optional<Id<T>> bias = std::nullopt) {
    detail::require_rank(g, x, 4, "conv2d");
    detail::require_rank(g, w, 4, "conv2d weight");
    const auto& xs = g.shape(x);
    const auto& ws = g.shape(w);
    detail::ConvGeometry cg{};
    cg.n = xs[0], cg.c = xs[1], cg.h = xs[2], cg.w = xs[3];
    cg.o = ws[0], cg.k = ws[2], cg.groups = p.groups, cg.stride = p.stride, cg.pad = p.padding;
    detail::require(g, p.groups >= 1 && cg.c % p.groups == 0 && cg.o % p.groups == 0,
                    "conv2d channels " + std::to_string(cg.c) + "->" + std::to_string(cg.o) +
                        " not divisible by groups " + std::to_string(p.groups));
    cg.cg = cg.c / p.groups, cg.og = cg.o / p.groups;
    detail::require(g, ws[1] == cg.cg && ws[2] == ws[3],
                    "conv2d weight " + shape_str(ws) + " incompatible with input " + shape_str(xs));
    detail::require(g, p.stride >= 1 && cg.h + 2 * p.padding >= cg.k && cg.w + 2 * p.padding >= cg.k,
                    "conv2d kernel larger than padded input");
    cg.ho = (cg.h + 2 * p.padding - cg.k) / p.stride + 1;
    cg.wo = (cg.w + 2 * p.padding - cg.k) / p.stride + 1;
    if (bias) detail::require(g, g.shape(*bias) == Shape{cg.o}, "conv2d bias shape");

    const bool pointwise = cg.k == 1 && p.stride == 1 && p.padding == 0;
    const std::size_t col_size = cg.col_rows() * cg.col_cols();
    std::vector<T> cols;
    if (!pointwise) cols.resize(cg.n * cg.groups * col_size);

    Tensor<T> out({cg.n, cg.o, cg.ho, cg.wo});
    const T* xv = g.value(x).data.data();
    const T* wv = g.value(w).data.data();
    const std::size_t in_plane = cg.c * cg.h * cg.w;
    const std::size_t out_plane = cg.o * cg.ho * cg.wo;
    for (std::size_t n = 0; n < cg.n; ++n)
        for (std::size_t gi = 0; gi < cg.groups; ++gi) {
            const T* col;
            if (pointwise) {
                col = xv + n * in_plane + gi * cg.cg * cg.h * cg.w;
            } else {
                T* c = cols.data() + (n * cg.groups + gi) * col_size;
                detail::im2col(cg, xv + n * in_plane, gi, c);
                col = c;
            }
            g.gemm(false, false, cg.og, cg.col_cols(), cg.col_rows(), wv + gi * cg.og * cg.col_rows(),
                   col, out.data.data() + n * out_plane + gi * cg.og * cg.col_cols(), false);
        }
    if (bias) {
        const auto& bv = g.value(*bias).data;
        for (std::size_t n = 0; n < cg.n; ++n)
            for (std::size_t o = 0; o < cg.o; ++o) {
                T* r = out.data.data() + n * out_plane + o * cg.col_cols();
                for (std::size_t j = 0; j < cg.col_cols(); ++j) r[j] += bv[o];
            }
    }
    std::vector<Id<T>> parents{x, w};
    if (bias) parents.push_back(*bias);
    return g.emit(
        std::move(out), parents,
        [x, w, bias, cg, pointwise, col_size, cols = std::move(cols)](Graph<T>& gr, Id<T> self) {
            auto dy = gr.grad(self);
            const std::size_t in_plane = cg.c * cg.h * cg.w;
            const std::size_t out_plane = cg.o * cg.ho * cg.wo;
            const T* xv = gr.value(x).data.data();
            const T* wv = gr.value(w).data.data();
            const bool need_w = gr.needs_grad(w), need_x = gr.needs_grad(x);
            T* gw = need_w ? gr.grad_mut(w).data() : nullptr;
            T* gx = need_x ? gr.grad_mut(x).data() : nullptr;
            std::vector<T> dcol(need_x && !pointwise ? col_size : 0);
            for (std::size_t n = 0; n < cg.n; ++n)
                for (std::size_t gi = 0; gi < cg.groups; ++gi) {
                    const T* dyg = dy.data() + n * out_plane + gi * cg.og * cg.col_cols();
                    const T* col = pointwise ? xv + n * in_plane + gi * cg.cg * cg.h * cg.w
                                             : cols.data() + (n * cg.groups + gi) * col_size;
                    if (need_w)
                        gr.gemm(false, true, cg.og, cg.col_rows(), cg.col_cols(), dyg, col,
                                gw + gi * cg.og * cg.col_rows(), true);
                    if (need_x) {
                        if (pointwise) {
                            gr.gemm(true, false, cg.col_rows(), cg.col_cols(), cg.og,
                                    wv + gi * cg.og * cg.col_rows(), dyg,
                                    gx + n * in_plane + gi * cg.cg * cg.h * cg.w, true);
                        } else {
                            gr.gemm(true, false, cg.col_rows(), cg.col_cols(), cg.og,
                                    wv + gi * cg.og * cg.col_rows(), dyg, dcol.data(), false);
                            detail::col2im(cg, dcol.data(), gi, gx + n * in_plane);
                        }
                    }
                }
            if (bias && gr.needs_grad(*bias)) {
                auto& gb = gr.grad_mut(*bias);
                for (std::size_t n = 0; n < cg.n; ++n)
                    for (std::size_t o = 0; o < cg.o; ++o) {
                        const T* r = dy.data() + n * out_plane + o * cg.col_cols();
                        double acc = 0.0;
                        for (std::size_t j = 0; j < cg.col_cols(); ++j) acc += r[j];
                        gb[o] += static_cast<T>(acc);
                    }
            }
        },
        "conv2d");
}

/// Running statistics of a batch-norm layer. `channels`, when non-empty, maps the input's
/// channel c to buffer slot channels[c] (sliced sub-networks).
template <std::floating_point T>
struct BatchNormBuffers {
    Tensor<T>* running_mean = nullptr;
    Tensor<T>* running_var = nullptr;
    std::vector<std::size_t> channels;
    T momentum = T(0.1);
    T eps = T(1e-5);
};

/// Normalizes over every axis except 1 (channels). Train mode uses batch statistics and
/// updates the running buffers; eval mode uses the buffers. Identity when linearized.
template <std::floating_point T>
Id<T> batch_norm(Graph<T>& g, Id<T> x, std::optional<Id<T>> gamma, std::optional<Id<T>> beta,
                 BatchNormBuffers<T> buffers) {
    if (g.linearized()) return x;
    const auto& xs = g.shape(x);
    detail::require(g, xs.size() == 2 || xs.size() == 4,
                    "batch_norm expects [N,C] or [N,C,H,W], got " + shape_str(xs));
    const std::size_t n = xs[0], c = xs[1], hw = xs.size() == 4 ? xs[2] * xs[3] : 1;
    const std::size_t count = n * hw;
    if (gamma) detail::require(g, g.shape(*gamma) == Shape{c}, "batch_norm gamma shape");
    if (beta) detail::require(g, g.shape(*beta) == Shape{c}, "batch_norm beta shape");
    auto slot = [&](std::size_t ch) { return buffers.channels.empty() ? ch : buffers.channels[ch]; };
    if (!buffers.channels.empty())
        detail::require(g, buffers.channels.size() == c, "batch_norm channel map size");
    const bool batch_stats = g.training();
    if (!batch_stats)
        detail::require(g, buffers.running_mean && buffers.running_var,
                        "batch_norm eval mode needs running buffers");
    const auto& xv = g.value(x).data;

    std::vector<T> inv_std(c), xhat(xv.size());
    Tensor<T> out(xs);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double mu, var;
        if (batch_stats) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < hw; ++j) s += xv[(i * c + ch) * hw + j];
            mu = s / static_cast<double>(count);
            double ss = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < hw; ++j) {
                    const double d = xv[(i * c + ch) * hw + j] - mu;
                    ss += d * d;
                }
            var = ss / static_cast<double>(count);
            if (g.options().update_running_stats && buffers.running_mean && buffers.running_var) {
                const double m = buffers.momentum;
                const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
                T& rm = buffers.running_mean->data[slot(ch)];
                T& rv = buffers.running_var->data[slot(ch)];
                rm = static_cast<T>((1.0 - m) * rm + m * mu);
                rv = static_cast<T>((1.0 - m) * rv + m * unbiased);
            }
        } else {
            mu = buffers.running_mean->data[slot(ch)];
            var = buffers.running_var->data[slot(ch)];
        }
        const double is = 1.0 / std::sqrt(var + static_cast<double>(buffers.eps));
        inv_std[ch] = static_cast<T>(is);
        const double gm = gamma ? static_cast<double>(g.value(*gamma).data[ch]) : 1.0;
        const double bt = beta ? static_cast<double>(g.value(*beta).data[ch]) : 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < hw; ++j) {
                const std::size_t idx = (i * c + ch) * hw + j;
                const T xh = static_cast<T>((xv[idx] - mu) * is);
                xhat[idx] = xh;
                out.data[idx] = static_cast<T>(gm * xh + bt);
            }
    }
    std::vector<Id<T>> parents{x};
    if (gamma) parents.push_back(*gamma);
    if (beta) parents.push_back(*beta);
    return g.emit(
        std::move(out), parents,
        [x, gamma, beta, n, c, hw, count, batch_stats, inv_std = std::move(inv_std),
         xhat = std::move(xhat)](Graph<T>& gr, Id<T> self) {
            auto dy = gr.grad(self);
            const bool need_x = gr.needs_grad(x);
            for (std::size_t ch = 0; ch < c; ++ch) {
                double sdy = 0.0, sdyx = 0.0;
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < hw; ++j) {
                        const std::size_t idx = (i * c + ch) * hw + j;
                        sdy += dy[idx];
                        sdyx += static_cast<double>(dy[idx]) * xhat[idx];
                    }
                if (gamma && gr.needs_grad(*gamma)) gr.grad_mut(*gamma)[ch] += static_cast<T>(sdyx);
                if (beta && gr.needs_grad(*beta)) gr.grad_mut(*beta)[ch] += static_cast<T>(sdy);
                if (!need_x) continue;
                const double gm = gamma ? static_cast<double>(gr.value(*gamma).data[ch]) : 1.0;
                const double is = inv_std[ch];
                auto& gx = gr.grad_mut(x);
                const double mdy = sdy / static_cast<double>(count);
                const double mdyx = sdyx / static_cast<double>(count);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < hw; ++j) {
                        const std::size_t idx = (i * c + ch) * hw + j;
                        if (batch_stats)
                            gx[idx] += static_cast<T>(gm * is * (dy[idx] - mdy - xhat[idx] * mdyx));
                        else
                            gx[idx] += static_cast<T>(gm * is * dy[idx]);
                    }
            }
        },
        "batch_norm");
}

/// ReLU; records its output as an activation. Identity (still counted) when linearized.
template <std::floating_point T>
Id<T> relu(Graph<T>& g, Id<T> x) {
    g.count_relu();
    if (g.linearized()) return x;
    Tensor<T> out = g.value(x);
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    Id<T> id = g.emit(std::move(out), {x},
                      [x](Graph<T>& gr, Id<T> self) {
                          auto dy = gr.grad(self);
                          const auto& yv = gr.value(self).data;
                          auto& gx = gr.grad_mut(x);
                          for (std::size_t i = 0; i < dy.size(); ++i)
                              if (yv[i] > T(0)) gx[i] += dy[i];
                      },
                      "relu");
    g.record_activation(id);
    return id;
}

namespace detail {

struct PoolGeometry {
    std::size_t n, c, h, w, k, stride, pad, ho, wo;
};

template <std::floating_point T>
PoolGeometry pool_geometry(const Graph<T>& g, Id<T> x, std::size_t k, std::size_t stride,
                           std::size_t pad, const char* op) {
    require_rank(g, x, 4, op);
    const auto& s = g.shape(x);
    require(g, k >= 1 && stride >= 1 && s[2] + 2 * pad >= k && s[3] + 2 * pad >= k && pad < k,
            std::string(op) + " window does not fit input " + shape_str(s));
    return {s[0], s[1], s[2], s[3], k, stride, pad, (s[2] + 2 * pad - k) / stride + 1,
            (s[3] + 2 * pad - k) / stride + 1};
}

}  // namespace detail

/// Average pooling that divides by the number of in-bounds elements (padding excluded).
template <std::floating_point T>
Id<T> avg_pool2d(Graph<T>& g, Id<T> x, std::size_t k, std::size_t stride, std::size_t pad) {
    const auto pg = detail::pool_geometry(g, x, k, stride, pad, "avg_pool2d");
    const auto& xv = g.value(x).data;
    Tensor<T> out({pg.n, pg.c, pg.ho, pg.wo});
    auto window = [pg](std::size_t oy, std::size_t ox) {
        const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(oy * pg.stride) - static_cast<std::ptrdiff_t>(pg.pad);
        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(ox * pg.stride) - static_cast<std::ptrdiff_t>(pg.pad);
        const std::size_t ys = static_cast<std::size_t>(std::max<std::ptrdiff_t>(y0, 0));
        const std::size_t xs = static_cast<std::size_t>(std::max<std::ptrdiff_t>(x0, 0));
        const std::size_t ye = static_cast<std::size_t>(std::min<std::ptrdiff_t>(y0 + static_cast<std::ptrdiff_t>(pg.k), static_cast<std::ptrdiff_t>(pg.h)));
        const std::size_t xe = static_cast<std::size_t>(std::min<std::ptrdiff_t>(x0 + static_cast<std::ptrdiff_t>(pg.k), static_cast<std::ptrdiff_t>(pg.w)));
        return std::array<std::size_t, 4>{ys, ye, xs, xe};
    };
    for (std::size_t p = 0; p < pg.n * pg.c; ++p) {
        const T* src = xv.data() + p * pg.h * pg.w;
        T* dst = out.data.data() + p * pg.ho * pg.wo;
        for (std::size_t oy = 0; oy < pg.ho; ++oy)
            for (std::size_t ox = 0; ox < pg.wo; ++ox) {
                auto [ys, ye, xs, xe] = window(oy, ox);
                double acc = 0.0;
                for (std::size_t yy = ys; yy < ye; ++yy)
                    for (std::size_t xx = xs; xx < xe; ++xx) acc += src[yy * pg.w + xx];
                dst[oy * pg.wo + ox] = static_cast<T>(acc / static_cast<double>((ye - ys) * (xe - xs)));
            }
    }
    return g.emit(std::move(out), {x},
                  [x, pg, window](Graph<T>& gr, Id<T> self) {
                      auto dy = gr.grad(self);
                      auto& gx = gr.grad_mut(x);
                      for (std::size_t p = 0; p < pg.n * pg.c; ++p) {
                          T* dst = gx.data() + p * pg.h * pg.w;
                          const T* d = dy.data() + p * pg.ho * pg.wo;
                          for (std::size_t oy = 0; oy < pg.ho; ++oy)
                              for (std::size_t ox = 0; ox < pg.wo; ++ox) {
                                  auto [ys, ye, xs, xe] = window(oy, ox);
                                  const T share = d[oy * pg.wo + ox] / static_cast<T>((ye - ys) * (xe - xs));
                                  for (std::size_t yy = ys; yy < ye; ++yy)
                                      for (std::size_t xx = xs; xx < xe; ++xx) dst[yy * pg.w + xx] += share;
                              }
                      }
                  },
                  "avg_pool2d");
}

template <std::floating_point T>
Id<T> max_pool2d(Graph<T>& g, Id<T> x, std::size_t k, std::size_t stride, std::size_t pad) {
    const auto pg = detail::pool_geometry(g, x, k, stride, pad, "max_pool2d");
    const auto& xv = g.value(x).data;
    Tensor<T> out({pg.n, pg.c, pg.ho, pg.wo});
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t p = 0; p < pg.n * pg.c; ++p) {
        for (std::size_t oy = 0; oy < pg.ho; ++oy)
            for (std::size_t ox = 0; ox < pg.wo; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                std::size_t best_i = 0;
                for (std::size_t ky = 0; ky < pg.k; ++ky)
                    for (std::size_t kx = 0; kx < pg.k; ++kx) {
                        const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(oy * pg.stride + ky) - static_cast<std::ptrdiff_t>(pg.pad);
                        const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * pg.stride + kx) - static_cast<std::ptrdiff_t>(pg.pad);
                        if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(pg.h) || xx >= static_cast<std::ptrdiff_t>(pg.w)) continue;
                        const std::size_t i = p * pg.h * pg.w + static_cast<std::size_t>(yy) * pg.w + static_cast<std::size_t>(xx);
                        if (xv[i] > best) {
                            best = xv[i];
                            best_i = i;
                        }
                    }
                const std::size_t o = p * pg.ho * pg.wo + oy * pg.wo + ox;
                out.data[o] = best;
                argmax[o] = best_i;
            }
    }
    return g.emit(std::move(out), {x},
                  [x, argmax = std::move(argmax)](Graph<T>& gr, Id<T> self) {
                      auto dy = gr.grad(self);
                      auto& gx = gr.grad_mut(x);
                      for (std::size_t o = 0; o < dy.size(); ++o) gx[argmax[o]] += dy[o];
                  },
                  "max_pool2d");
}

/// [N, C, H, W] -> [N, C]
template <std::floating_point T>
Id<T> global_avg_pool(Graph<T>& g, Id<T> x) {
    detail::require_rank(g, x, 4, "global_avg_pool");
    const auto& s = g.shape(x);
    const std::size_t nc = s[0] * s[1], hw = s[2] * s[3];
    const auto& xv = g.value(x).data;
    Tensor<T> out({s[0], s[1]});
    for (std::size_t p = 0; p < nc; ++p) {
        double acc = 0.0;
        for (std::size_t j = 0; j < hw; ++j) acc += xv[p * hw + j];
        out.data[p] = static_cast<T>(acc / static_cast<double>(hw));
    }
    return g.emit(std::move(out), {x},
                  [x, nc, hw](Graph<T>& gr, Id<T> self) {
                      auto dy = gr.grad(self);
                      auto& gx = gr.grad_mut(x);
                      const T inv = T(1) / static_cast<T>(hw);
                      for (std::size_t p = 0; p < nc; ++p)
                          for (std::size_t j = 0; j < hw; ++j) gx[p * hw + j] += dy[p] * inv;
                  },
                  "global_avg_pool");
}

/// Inverted dropout; identity outside train mode, when disabled, or when linearized.
template <std::floating_point T>
Id<T> dropout(Graph<T>& g, Id<T> x, double p) {
    if (p <= 0.0 || !g.training() || !g.options().dropout || g.linearized()) return x;
    if (p >= 1.0) throw ConfigError("dropout rate must be < 1");
    std::bernoulli_distribution keep(1.0 - p);
    const T s = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(g.value(x).size());
    for (auto& m : mask) m = keep(g.rng()) ? s : T(0);
    return mul_const(g, x, std::move(mask));
}

/// Mean softmax cross-entropy over the batch. logits: [N, K].
template <std::floating_point T>
Id<T> softmax_cross_entropy(Graph<T>& g, Id<T> logits, std::span<const int> labels) {
    detail::require_rank(g, logits, 2, "softmax_cross_entropy");
    const std::size_t n = g.shape(logits)[0], k = g.shape(logits)[1];
    detail::require(g, labels.size() == n, "label count does not match batch size");
    const auto& lv = g.value(logits).data;
    std::vector<T> probs(n * k);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        detail::require(g, y >= 0 && static_cast<std::size_t>(y) < k, "label out of range");
        const T* row = lv.data() + i * k;
        const double mx = *std::max_element(row, row + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        const double logz = mx + std::log(z);
        for (std::size_t j = 0; j < k; ++j)
            probs[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - logz));
        loss += logz - static_cast<double>(row[static_cast<std::size_t>(y)]);
    }
    Tensor<T> out({1}, static_cast<T>(loss / static_cast<double>(n)));
    std::vector<int> ys(labels.begin(), labels.end());
    return g.emit(std::move(out), {logits},
                  [logits, n, k, probs = std::move(probs), ys = std::move(ys)](Graph<T>& gr, Id<T> self) {
                      const T dy = gr.grad(self)[0] / static_cast<T>(n);
                      auto& gl = gr.grad_mut(logits);
                      for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < k; ++j) {
                              const T target = static_cast<std::size_t>(ys[i]) == j ? T(1) : T(0);
                              gl[i * k + j] += dy * (probs[i * k + j] - target);
                          }
                  },
                  "softmax_cross_entropy");
}

}  // namespace nasaudit::ops
