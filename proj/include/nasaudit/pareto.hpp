#pragma once

#include <cstddef>
#include <vector>

namespace nasaudit {

enum class ParetoDirection {
    /// Higher score and lower complexity are better.
    param,
    /// Higher score and higher complexity are better.
    inverse_param,
};

struct ParetoPoint {
    double score = 0.0;
    double complexity = 0.0;
};

/// True when a is at least as good as b on both axes and strictly better on one.
inline bool dominates(const ParetoPoint& a, const ParetoPoint& b, ParetoDirection dir) {
    const double ca = dir == ParetoDirection::param ? -a.complexity : a.complexity;
    const double cb = dir == ParetoDirection::param ? -b.complexity : b.complexity;
    return a.score >= b.score && ca >= cb && (a.score > b.score || ca > cb);
}

/// Non-dominated sorting restricted to `levels` layers (0 = all). Returns index layers;
/// points left after the last layer are not returned.
inline std::vector<std::vector<std::size_t>> pareto_layers(const std::vector<ParetoPoint>& pts,
                                                           ParetoDirection dir, std::size_t levels = 0) {
    std::vector<std::vector<std::size_t>> out;
    std::vector<bool> taken(pts.size(), false);
    std::size_t remaining = pts.size();
    while (remaining > 0 && (levels == 0 || out.size() < levels)) {
        std::vector<std::size_t> layer;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (taken[i]) continue;
            bool dominated = false;
            for (std::size_t j = 0; j < pts.size() && !dominated; ++j)
                dominated = !taken[j] && j != i && dominates(pts[j], pts[i], dir);
            if (!dominated) layer.push_back(i);
        }
        for (auto i : layer) taken[i] = true;
        remaining -= layer.size();
        out.push_back(std::move(layer));
    }
    return out;
}

}  // namespace nasaudit
