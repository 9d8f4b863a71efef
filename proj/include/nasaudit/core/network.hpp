#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nasaudit/core/graph.hpp"
#include "nasaudit/core/ops.hpp"

namespace nasaudit {

template <std::floating_point T>
struct NamedTensor {
    std::string name;
    Tensor<T>* tensor = nullptr;
};

/// A realized network: something that can emit its forward pass into a Graph and list the
/// tensors it reads. Implemented by Sequential and by supernet sub-networks.
template <std::floating_point T>
class Network {
public:
    using Id = typename Graph<T>::Id;

    virtual ~Network() = default;

    /// Emits the forward pass for input node `x` and returns the logits node.
    virtual Id forward(Graph<T>& g, Id x) = 0;

    /// Trainable tensors in a stable order.
    virtual std::vector<NamedTensor<T>> parameters() = 0;

    /// Non-trainable state (batch-norm running statistics).
    virtual std::vector<NamedTensor<T>> buffers() { return {}; }

    /// Number of ReLU layers the forward pass applies.
    virtual std::size_t relu_layers() const = 0;

    /// The same network in extended precision, or null when unsupported.
    virtual std::unique_ptr<Network<long double>> widen() const { return nullptr; }
};

template <std::floating_point T>
struct Batch {
    Tensor<T> x;
    std::vector<int> y;

    std::size_t size() const { return y.size(); }
};

template <std::floating_point T>
void zero_grads(std::span<const NamedTensor<T>> params) {
    for (const auto& p : params) {
        p.tensor->requires_grad = true;
        p.tensor->grad_buffer();
        p.tensor->zero_grad();
    }
}

template <std::floating_point T>
std::vector<T> flatten_grads(std::span<const NamedTensor<T>> params) {
    std::vector<T> out;
    for (const auto& p : params) {
        const auto& g = p.tensor->grad_buffer();
        out.insert(out.end(), g.begin(), g.end());
    }
    return out;
}

template <std::floating_point T>
std::size_t total_size(std::span<const NamedTensor<T>> params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor->size();
    return n;
}

/// Raises NumericError naming the first parameter whose gradient is non-finite.
template <std::floating_point T>
void check_finite_grads(std::span<const NamedTensor<T>> params) {
    for (const auto& p : params)
        if (p.tensor->grad && !all_finite(*p.tensor->grad))
            throw NumericError(p.name, "non-finite gradient");
}

/// Hessian-vector product by central differences of the gradient:
/// (g(θ + ε·v̂) − g(θ − ε·v̂)) / (2ε) · ‖v‖. `accumulate` must run forward+backward and add the
/// loss gradient into the parameters' grad buffers. Parameters are restored bit-exactly.
template <std::floating_point T>
std::vector<T> hvp(std::span<const NamedTensor<T>> params, const std::function<void()>& accumulate,
                   std::span<const T> v, double eps) {
    if (v.size() != total_size(params))
        throw ConfigError("hvp direction has " + std::to_string(v.size()) + " entries, expected " +
                          std::to_string(total_size(params)));
    if (!(eps > 0.0)) throw ConfigError("hvp eps must be positive");
    double norm2 = 0.0;
    for (T x : v) norm2 += static_cast<double>(x) * static_cast<double>(x);
    const double norm = std::sqrt(norm2);
    if (!(norm > 1e-12) || !std::isfinite(norm))
        throw ConfigError("hvp direction norm " + std::to_string(norm) + " is too small");

    std::vector<std::vector<T>> saved;
    saved.reserve(params.size());
    for (const auto& p : params) saved.push_back(p.tensor->data);

    auto gradient_at = [&](double sign) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& d = params[i].tensor->data;
            for (std::size_t j = 0; j < d.size(); ++j)
                d[j] = static_cast<T>(static_cast<double>(saved[i][j]) +
                                      sign * eps * static_cast<double>(v[off + j]) / norm);
            off += d.size();
        }
        zero_grads(params);
        accumulate();
        check_finite_grads(params);
        return flatten_grads(params);
    };
    std::vector<T> plus, minus;
    try {
        plus = gradient_at(+1.0);
        minus = gradient_at(-1.0);
    } catch (...) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor->data = saved[i];
        throw;
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor->data = saved[i];
    zero_grads(params);

    std::vector<T> out(plus.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>((static_cast<double>(plus[i]) - static_cast<double>(minus[i])) /
                                (2.0 * eps) * norm);
    return out;
}

/// Runs forward + cross-entropy backward of `net` on `batch`, accumulating parameter grads.
/// Returns the loss value.
template <std::floating_point T>
double accumulate_loss_gradient(Network<T>& net, const Batch<T>& batch, GraphOptions<T> opts) {
    Graph<T> g(std::move(opts));
    auto x = g.input(batch.x);
    auto logits = net.forward(g, x);
    auto loss = ops::softmax_cross_entropy(g, logits, std::span<const int>(batch.y));
    const double value = static_cast<double>(g.value(loss).data[0]);
    if (!std::isfinite(value)) throw NumericError("loss", "non-finite loss");
    g.backward(loss);
    return value;
}

/// Network Hessian-vector product of the cross-entropy loss on `batch`.
template <std::floating_point T>
std::vector<T> network_hvp(Network<T>& net, const Batch<T>& batch, std::span<const T> v,
                           double eps, GraphOptions<T> opts) {
    auto params = net.parameters();
    return hvp<T>(params, [&] { accumulate_loss_gradient(net, batch, opts); }, v, eps);
}

}  // namespace nasaudit
