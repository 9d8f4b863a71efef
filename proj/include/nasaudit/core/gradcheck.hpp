#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "nasaudit/core/graph.hpp"
#include "nasaudit/core/ops.hpp"

namespace nasaudit {

struct GradCheckResult {
    /// ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12), worst over inputs.
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
};

/// Compares reverse-mode gradients with central finite differences (step eps * max(1, |x|)).
/// `build` emits a network over the given input nodes and returns any output node; the checked
/// scalar is sum(output * r) for a fixed random projection r. `make_graph` supplies fresh
/// graphs so stochastic ops can be reseeded identically for every evaluation.
template <class Build>
GradCheckResult gradcheck(const std::vector<Tensor<double>>& inputs, Build build,
                          const std::function<GraphOptions<double>()>& make_options,
                          double eps = 1e-5, std::uint64_t seed = 7) {
    using Id = Graph<double>::Id;
    std::vector<double> proj;
    auto scalar = [&](const std::vector<Tensor<double>>& xs, bool backward,
                      std::vector<std::vector<double>>* grads) {
        Graph<double> g(make_options());
        std::vector<Id> ids;
        for (const auto& x : xs) ids.push_back(g.input(x, true));
        Id out = build(g, ids);
        if (proj.empty()) {
            std::mt19937_64 rng(seed);
            std::normal_distribution<double> n(0.0, 1.0);
            proj.resize(g.value(out).size());
            for (auto& p : proj) p = n(rng);
        }
        Id loss = ops::sum(g, ops::mul_const(g, out, proj));
        const double v = g.value(loss).data[0];
        if (backward) {
            g.backward(loss);
            for (Id id : ids) {
                auto gr = g.grad(id);
                grads->emplace_back(gr.begin(), gr.end());
                grads->back().resize(g.value(id).size(), 0.0);
            }
        }
        return v;
    };

    std::vector<std::vector<double>> analytic;
    scalar(inputs, true, &analytic);

    GradCheckResult res;
    auto xs = inputs;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (std::size_t i = 0; i < xs[t].size(); ++i) {
            const double x0 = xs[t].data[i];
            const double h = eps * std::max(1.0, std::abs(x0));
            xs[t].data[i] = x0 + h;
            const double fp = scalar(xs, false, nullptr);
            xs[t].data[i] = x0 - h;
            const double fm = scalar(xs, false, nullptr);
            xs[t].data[i] = x0;
            const double num = (fp - fm) / (2.0 * h);
            const double a = analytic[t][i];
            diff2 += (a - num) * (a - num);
            a2 += a * a;
            n2 += num * num;
        }
        const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
        if (rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_input = t;
        }
    }
    return res;
}

}  // namespace nasaudit
