#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nasaudit/core/network.hpp"

namespace nasaudit {

enum class LayerKind {
    conv2d,
    linear,
    batchnorm,
    relu,
    avgpool,
    maxpool,
    global_avgpool,
    dropout,
    softmax_xent,
};

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::linear: return "linear";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::relu: return "relu";
        case LayerKind::avgpool: return "avgpool";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::global_avgpool: return "global_avgpool";
        case LayerKind::dropout: return "dropout";
        case LayerKind::softmax_xent: return "softmax_xent";
    }
    return "?";
}

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::size_t in_channels = 0;   // conv2d, linear, batchnorm
    std::size_t out_channels = 0;  // conv2d, linear
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;
    bool bias = false;
    bool affine = true;
    double rate = 0.0;

    static LayerSpec conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride = 1,
                          std::size_t padding = 0, std::size_t groups = 1, bool bias = false) {
        return {LayerKind::conv2d, in, out, k, stride, padding, groups, bias, true, 0.0};
    }
    static LayerSpec fc(std::size_t in, std::size_t out, bool bias = true) {
        return {LayerKind::linear, in, out, 1, 1, 0, 1, bias, true, 0.0};
    }
    static LayerSpec bn(std::size_t channels, bool affine = true) {
        return {LayerKind::batchnorm, channels, channels, 1, 1, 0, 1, false, affine, 0.0};
    }
    static LayerSpec relu() { return {LayerKind::relu}; }
    static LayerSpec avgpool(std::size_t k, std::size_t stride, std::size_t padding) {
        return {LayerKind::avgpool, 0, 0, k, stride, padding};
    }
    static LayerSpec maxpool(std::size_t k, std::size_t stride, std::size_t padding) {
        return {LayerKind::maxpool, 0, 0, k, stride, padding};
    }
    static LayerSpec gap() { return {LayerKind::global_avgpool}; }
    static LayerSpec drop(double rate) {
        LayerSpec s{LayerKind::dropout};
        s.rate = rate;
        return s;
    }
    static LayerSpec xent() { return {LayerKind::softmax_xent}; }

    void validate() const {
        if (kind == LayerKind::conv2d) {
            if (groups == 0 || in_channels % groups || out_channels % groups)
                throw ConfigError("conv2d channels " + std::to_string(in_channels) + "->" +
                                  std::to_string(out_channels) + " not divisible by groups " +
                                  std::to_string(groups));
            if (kernel == 0 || stride == 0) throw ConfigError("conv2d kernel/stride must be positive");
        }
        if (kind == LayerKind::dropout && (rate < 0.0 || rate >= 1.0))
            throw ConfigError("dropout rate must be in [0, 1)");
    }
};

/// Uniform(-gain/sqrt(fan_in), gain/sqrt(fan_in)). gain = sqrt(6) is the ReLU Kaiming bound.
template <std::floating_point T>
void kaiming_uniform(Tensor<T>& t, std::size_t fan_in, std::mt19937_64& rng,
                     double gain = std::sqrt(6.0)) {
    const double bound = gain / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

/// One layer with its parameters. Tensors that the kind does not use stay empty.
template <std::floating_point T>
struct Layer {
    LayerSpec spec;
    Tensor<T> weight, bias, gamma, beta, running_mean, running_var;

    Layer() = default;

    Layer(LayerSpec s, std::mt19937_64& rng) : spec(s) {
        spec.validate();
        switch (spec.kind) {
            case LayerKind::conv2d: {
                const std::size_t fan_in = spec.in_channels / spec.groups * spec.kernel * spec.kernel;
                weight = Tensor<T>({spec.out_channels, spec.in_channels / spec.groups, spec.kernel,
                                    spec.kernel});
                kaiming_uniform(weight, fan_in, rng);
                if (spec.bias) {
                    bias = Tensor<T>({spec.out_channels});
                    kaiming_uniform(bias, fan_in, rng, 1.0);
                }
                break;
            }
            case LayerKind::linear:
                weight = Tensor<T>({spec.out_channels, spec.in_channels});
                kaiming_uniform(weight, spec.in_channels, rng);
                if (spec.bias) {
                    bias = Tensor<T>({spec.out_channels});
                    kaiming_uniform(bias, spec.in_channels, rng, 1.0);
                }
                break;
            case LayerKind::batchnorm:
                if (spec.affine) {
                    gamma = Tensor<T>({spec.in_channels}, T(1));
                    beta = Tensor<T>({spec.in_channels}, T(0));
                }
                running_mean = Tensor<T>({spec.in_channels}, T(0));
                running_var = Tensor<T>({spec.in_channels}, T(1));
                break;
            default: break;
        }
        for (Tensor<T>* t : {&weight, &bias, &gamma, &beta}) t->requires_grad = !t->data.empty();
    }
};

/// A plain feed-forward stack of layers.
template <std::floating_point T>
class Sequential final : public Network<T> {
public:
    using Id = typename Network<T>::Id;

    Sequential() = default;

    Sequential(const std::vector<LayerSpec>& specs, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        for (const auto& s : specs) layers_.emplace_back(s, rng);
    }

    std::vector<Layer<T>>& layers() { return layers_; }
    const std::vector<Layer<T>>& layers() const { return layers_; }

    bool ends_with_loss() const {
        return !layers_.empty() && layers_.back().spec.kind == LayerKind::softmax_xent;
    }

    Id forward(Graph<T>& g, Id x) override {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            g.set_layer(static_cast<int>(i));
            x = apply(g, layers_[i], x);
        }
        g.set_layer(-1);
        return x;
    }

    std::vector<NamedTensor<T>> parameters() override {
        std::vector<NamedTensor<T>> out;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            auto& l = layers_[i];
            const std::string p = "layer" + std::to_string(i) + ".";
            if (!l.weight.data.empty()) out.push_back({p + "weight", &l.weight});
            if (!l.bias.data.empty()) out.push_back({p + "bias", &l.bias});
            if (!l.gamma.data.empty()) out.push_back({p + "gamma", &l.gamma});
            if (!l.beta.data.empty()) out.push_back({p + "beta", &l.beta});
        }
        return out;
    }

    std::vector<NamedTensor<T>> buffers() override {
        std::vector<NamedTensor<T>> out;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            auto& l = layers_[i];
            if (l.running_mean.data.empty()) continue;
            const std::string p = "layer" + std::to_string(i) + ".";
            out.push_back({p + "running_mean", &l.running_mean});
            out.push_back({p + "running_var", &l.running_var});
        }
        return out;
    }

    std::size_t relu_layers() const override {
        return static_cast<std::size_t>(std::count_if(layers_.begin(), layers_.end(), [](const auto& l) {
            return l.spec.kind == LayerKind::relu;
        }));
    }

    template <std::floating_point U>
    Sequential<U> cast() const {
        Sequential<U> out;
        for (const auto& l : layers_) {
            Layer<U> c;
            c.spec = l.spec;
            c.weight = l.weight.template cast<U>();
            c.bias = l.bias.template cast<U>();
            c.gamma = l.gamma.template cast<U>();
            c.beta = l.beta.template cast<U>();
            c.running_mean = l.running_mean.template cast<U>();
            c.running_var = l.running_var.template cast<U>();
            out.layers().push_back(std::move(c));
        }
        return out;
    }

    std::unique_ptr<Network<long double>> widen() const override {
        return std::make_unique<Sequential<long double>>(cast<long double>());
    }

private:
    static Id apply(Graph<T>& g, Layer<T>& l, Id x) {
        const auto& s = l.spec;
        auto opt = [&](Tensor<T>& t) -> std::optional<Id> {
            if (t.data.empty()) return std::nullopt;
            return g.parameter(t);
        };
        switch (s.kind) {
            case LayerKind::conv2d:
                return ops::conv2d(g, x, g.parameter(l.weight), {s.stride, s.padding, s.groups},
                                   opt(l.bias));
            case LayerKind::linear:
                if (g.shape(x).size() != 2) x = ops::flatten(g, x);
                return ops::linear(g, x, g.parameter(l.weight), opt(l.bias));
            case LayerKind::batchnorm:
            {
                ops::BatchNormBuffers<T> buf;
                buf.running_mean = &l.running_mean;
                buf.running_var = &l.running_var;
                return ops::batch_norm(g, x, opt(l.gamma), opt(l.beta), buf);
            }
            case LayerKind::relu: return ops::relu(g, x);
            case LayerKind::avgpool: return ops::avg_pool2d(g, x, s.kernel, s.stride, s.padding);
            case LayerKind::maxpool: return ops::max_pool2d(g, x, s.kernel, s.stride, s.padding);
            case LayerKind::global_avgpool: return ops::global_avg_pool(g, x);
            case LayerKind::dropout: return ops::dropout(g, x, s.rate);
            case LayerKind::softmax_xent: return x;  // loss is attached by the caller
        }
        return x;
    }

    std::vector<Layer<T>> layers_;
};

template <std::floating_point T>
struct ForwardResult {
    Graph<T> tape;
    typename Graph<T>::Id output;
    typename Graph<T>::Id input;
};

/// Runs `net` on `x`. When the stack ends in softmax_xent and labels are supplied, the
/// output is the scalar mean cross-entropy; otherwise it is the logits.
template <std::floating_point T>
ForwardResult<T> forward(Sequential<T>& net, Tensor<T> x, Mode mode,
                         std::span<const int> labels = {}, std::mt19937_64* rng = nullptr,
                         bool input_requires_grad = false) {
    GraphOptions<T> opts;
    opts.mode = mode;
    opts.rng = rng;
    Graph<T> g(std::move(opts));
    auto in = g.input(std::move(x), input_requires_grad);
    auto out = net.forward(g, in);
    if (net.ends_with_loss() && !labels.empty()) {
        g.set_layer(static_cast<int>(net.layers().size()) - 1);
        out = ops::softmax_cross_entropy(g, out, labels);
        g.set_layer(-1);
    }
    return {std::move(g), out, in};
}

}  // namespace nasaudit
