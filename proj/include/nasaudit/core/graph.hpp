#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nasaudit/core/tensor.hpp"

namespace nasaudit {

enum class Mode { train, eval };

/// C = op(A) * op(B) (+ C when accumulate). op(A) is M x K, op(B) is K x N, all row-major.
template <std::floating_point T>
using MatmulFn = std::function<void(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
                                    std::size_t k, const T* a, const T* b, T* c, bool accumulate)>;

/// Reference GEMM. Loop orders keep the innermost loop contiguous so it vectorizes.
template <std::floating_point T>
void default_matmul(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                    const T* a, const T* b, T* c, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    if (!trans_a && !trans_b) {
        for (std::size_t i = 0; i < m; ++i) {
            T* ci = c + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const T aip = a[i * k + p];
                if (aip == T(0)) continue;
                const T* bp = b + p * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
            }
        }
    } else if (!trans_a && trans_b) {
        for (std::size_t i = 0; i < m; ++i) {
            const T* ai = a + i * k;
            for (std::size_t j = 0; j < n; ++j) {
                const T* bj = b + j * k;
                T acc = T(0);
                for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
                c[i * n + j] += acc;
            }
        }
    } else if (trans_a && !trans_b) {
        for (std::size_t p = 0; p < k; ++p) {
            const T* ap = a + p * m;
            const T* bp = b + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const T api = ap[i];
                if (api == T(0)) continue;
                T* ci = c + i * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                T acc = T(0);
                for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
                c[i * n + j] += acc;
            }
    }
}

template <std::floating_point T>
struct GraphOptions {
    Mode mode = Mode::train;
    /// Batch-norm running buffers are written only when this is set and mode is train.
    bool update_running_stats = true;
    /// Dropout is active only when this is set and mode is train.
    bool dropout = true;
    /// ReLU, batch-norm and dropout act as identity (data-free saliency pass).
    bool linearize = false;
    std::mt19937_64* rng = nullptr;
    MatmulFn<T> matmul = default_matmul<T>;
};

/// Reverse-mode tape. Nodes are appended in execution order, so reverse insertion order is a
/// valid reverse topological order and backward visits each node once.
template <std::floating_point T>
class Graph {
public:
    using Id = std::size_t;
    using BackwardFn = std::function<void(Graph&, Id)>;

    explicit Graph(GraphOptions<T> options = {}) : options_(std::move(options)) {
        if (!options_.matmul) options_.matmul = default_matmul<T>;
    }

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) noexcept = default;
    Graph& operator=(Graph&&) noexcept = default;

    const GraphOptions<T>& options() const noexcept { return options_; }
    Mode mode() const noexcept { return options_.mode; }
    bool training() const noexcept { return options_.mode == Mode::train; }
    bool linearized() const noexcept { return options_.linearize; }

    std::mt19937_64& rng() {
        if (!options_.rng) throw ConfigError("graph needs an explicit rng for stochastic ops");
        return *options_.rng;
    }

    Id constant(Tensor<T> value) { return push(std::move(value), {}, {}, "constant", false); }

    Id input(Tensor<T> value, bool requires_grad = false) {
        return push(std::move(value), {}, {}, "input", requires_grad);
    }

    /// Binds an external tensor. Its gradient is accumulated into `p.grad` by backward().
    Id parameter(Tensor<T>& p) {
        Tensor<T> copy(p.shape, p.data);
        Id id = push(std::move(copy), {}, {}, "parameter", p.requires_grad);
        nodes_[id].param = &p;
        return id;
    }

    /// Appends an op result. The backward closure is kept only when some parent needs a grad.
    Id emit(Tensor<T> value, std::vector<Id> parents, BackwardFn fn, const char* op) {
        bool needs = false;
        for (Id p : parents) needs = needs || nodes_.at(p).needs_grad;
        return push(std::move(value), std::move(parents), needs ? std::move(fn) : BackwardFn{}, op,
                    needs);
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    const Tensor<T>& value(Id id) const { return nodes_.at(id).value; }
    const Shape& shape(Id id) const { return nodes_.at(id).value.shape; }
    bool needs_grad(Id id) const { return nodes_.at(id).needs_grad; }
    const char* op_name(Id id) const { return nodes_.at(id).op; }
    const std::vector<Id>& parents(Id id) const { return nodes_.at(id).parents; }

    /// Gradient of the last backward() loss w.r.t. node `id`; empty span if it received none.
    std::span<const T> grad(Id id) const { return nodes_.at(id).grad; }

    std::vector<T>& grad_mut(Id id) {
        auto& n = nodes_.at(id);
        if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), T(0));
        return n.grad;
    }

    void backward(Id loss) {
        if (value(loss).size() != 1)
            throw ConfigError("backward needs a scalar loss, got shape " + shape_str(shape(loss)));
        if (backward_done_) throw ConfigError("backward already ran on this graph");
        backward_done_ = true;
        grad_mut(loss)[0] = T(1);
        for (Id i = loss + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.needs_grad || n.grad.empty()) continue;
            if (n.backward) {
                int saved = layer_;
                layer_ = n.layer;
                n.backward(*this, i);
                layer_ = saved;
            }
            if (n.param) {
                auto& pg = n.param->grad_buffer();
                for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
            }
        }
    }

    /// Post-ReLU activations in execution order.
    const std::vector<Id>& activations() const noexcept { return activations_; }
    void record_activation(Id id) { activations_.push_back(id); }

    /// Number of ReLU layers applied so far.
    std::size_t relu_layers() const noexcept { return relu_layers_; }
    void count_relu() { ++relu_layers_; }

    /// Layer index attached to subsequently emitted nodes, used in error messages.
    int layer() const noexcept { return layer_; }
    void set_layer(int layer) noexcept { layer_ = layer; }

    std::vector<Tensor<T>*> bound_parameters() const {
        std::vector<Tensor<T>*> out;
        for (const auto& n : nodes_)
            if (n.param && std::find(out.begin(), out.end(), n.param) == out.end())
                out.push_back(n.param);
        return out;
    }

    void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a,
              const T* b, T* c, bool accumulate) const {
        options_.matmul(ta, tb, m, n, k, a, b, c, accumulate);
    }

private:
    struct Node {
        Tensor<T> value;
        std::vector<T> grad;
        std::vector<Id> parents;
        BackwardFn backward;
        Tensor<T>* param = nullptr;
        const char* op = "";
        int layer = -1;
        bool needs_grad = false;
    };

    Id push(Tensor<T> value, std::vector<Id> parents, BackwardFn fn, const char* op, bool needs) {
        Node n;
        n.value = std::move(value);
        n.value.requires_grad = false;
        n.value.grad.reset();
        n.parents = std::move(parents);
        n.backward = std::move(fn);
        n.op = op;
        n.layer = layer_;
        n.needs_grad = needs;
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    GraphOptions<T> options_;
    std::vector<Node> nodes_;
    std::vector<Id> activations_;
    std::size_t relu_layers_ = 0;
    int layer_ = -1;
    bool backward_done_ = false;
};

}  // namespace nasaudit
