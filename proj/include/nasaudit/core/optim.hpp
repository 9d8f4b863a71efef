#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "nasaudit/core/tensor.hpp"

namespace nasaudit {

struct SgdConfig {
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double grad_clip = 5.0;  // <= 0 disables clipping
};

/// One SGD step over `params` with matching `momentum` buffers (resized on first use).
/// The global gradient norm is clipped to `grad_clip` first, then weight decay is added as an
/// L2 term, then the momentum update runs. Missing grads count as zero. Returns the
/// pre-clip gradient norm.
template <std::floating_point T>
double sgd_step(std::span<Tensor<T>* const> params, std::span<std::vector<T>* const> momentum,
                const SgdConfig& cfg) {
    // zero freezes the parameters; configs still demand a positive rate
    if (!(cfg.lr >= 0.0)) throw ConfigError("sgd learning rate must be non-negative");
    if (params.size() != momentum.size()) throw ConfigError("one momentum buffer per parameter");
    double norm2 = 0.0;
    for (const Tensor<T>* p : params)
        if (p->grad)
            for (T g : *p->grad) norm2 += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(norm2);
    const double clip = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = *params[i];
        std::vector<T>& buf = *momentum[i];
        if (buf.size() != p.size()) buf.assign(p.size(), T(0));
        const bool has_grad = p.grad && p.grad->size() == p.size();
        for (std::size_t j = 0; j < p.size(); ++j) {
            double d = has_grad ? clip * static_cast<double>((*p.grad)[j]) : 0.0;
            d += cfg.weight_decay * static_cast<double>(p.data[j]);
            const double b = cfg.momentum * static_cast<double>(buf[j]) + d;
            buf[j] = static_cast<T>(b);
            p.data[j] = static_cast<T>(static_cast<double>(p.data[j]) - cfg.lr * b);
        }
    }
    return norm;
}

/// Reduce-on-plateau on a minimized metric (relative threshold, no cooldown).
class PlateauScheduler {
public:
    PlateauScheduler(double factor = 0.5, int patience = 30, double min_lr = 1e-5,
                     double threshold = 1e-4)
        : factor_(factor), patience_(patience), min_lr_(min_lr), threshold_(threshold) {}

    /// Feeds one epoch's metric; returns the (possibly reduced) learning rate.
    double step(double metric, double lr) {
        if (metric < best_ * (1.0 - threshold_)) {
            best_ = metric;
            bad_epochs_ = 0;
        } else if (++bad_epochs_ > patience_) {
            lr = std::max(lr * factor_, min_lr_);
            bad_epochs_ = 0;
        }
        return lr;
    }

    double best() const noexcept { return best_; }
    int bad_epochs() const noexcept { return bad_epochs_; }
    void restore(double best, int bad_epochs) {
        best_ = best;
        bad_epochs_ = bad_epochs;
    }

private:
    double factor_;
    int patience_;
    double min_lr_;
    double threshold_;
    double best_ = std::numeric_limits<double>::infinity();
    int bad_epochs_ = 0;
};

}  // namespace nasaudit
