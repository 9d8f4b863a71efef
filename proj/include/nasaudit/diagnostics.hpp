#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "nasaudit/criteria.hpp"
#include "nasaudit/pareto.hpp"
#include "nasaudit/training.hpp"

namespace nasaudit {

/// RD = r_i - n_i per row; positive means the estimator overrates the genotype.
inline std::vector<long> ranking_difference(const ScoreTable& t) {
    const auto r = t.gt_ranks(), n = t.est_ranks();
    std::vector<long> rd(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) rd[i] = static_cast<long>(r[i]) - static_cast<long>(n[i]);
    return rd;
}

enum class ComplexityKey { params, flops };

inline const char* to_string(ComplexityKey k) { return k == ComplexityKey::params ? "params" : "flops"; }

inline ComplexityKey complexity_key_from_string(const std::string& s) {
    if (s == "params") return ComplexityKey::params;
    if (s == "flops") return ComplexityKey::flops;
    throw ConfigError("unknown complexity key '" + s + "'");
}

/// Equal-count quantile bins; group 0 holds the least complex genotypes.
struct ComplexityGrouping {
    ComplexityKey key = ComplexityKey::flops;
    std::size_t groups = 5;
    std::map<std::string, std::size_t> group_of;
    std::vector<std::vector<std::string>> members;

    static ComplexityGrouping build(const std::vector<std::string>& ids, const std::vector<double>& complexity,
                                    ComplexityKey key, std::size_t groups = 5) {
        if (ids.size() != complexity.size()) throw ConfigError("grouping needs one complexity per genotype");
        if (groups == 0) throw ConfigError("grouping needs at least one group");
        ComplexityGrouping g;
        g.key = key;
        g.groups = groups;
        g.members.resize(groups);
        std::vector<std::size_t> order(ids.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (complexity[a] != complexity[b]) return complexity[a] < complexity[b];
            return ids[a] < ids[b];
        });
        for (std::size_t k = 0; k < order.size(); ++k) {
            const std::size_t grp = k * groups / order.size();
            g.group_of[ids[order[k]]] = grp;
            g.members[grp].push_back(ids[order[k]]);
        }
        return g;
    }

    static ComplexityGrouping build(const SearchSpaceDesc& space, const std::vector<Genotype>& genotypes,
                                    ComplexityKey key, std::size_t groups = 5,
                                    CountMode mode = CountMode::realized) {
        std::vector<std::string> ids;
        std::vector<double> c;
        for (const auto& g : genotypes) {
            const auto pf = count_params_flops(g, space, mode);
            ids.push_back(g.str());
            c.push_back(static_cast<double>(key == ComplexityKey::params ? pf.params : pf.flops));
        }
        return build(ids, c, key, groups);
    }
};

struct GroupBias {
    std::size_t group = 0;
    std::size_t size = 0;
    double mean_rd = 0.0;
    /// NaN for groups with fewer than two genotypes.
    double kd = std::numeric_limits<double>::quiet_NaN();
};

/// Mean RD (global ranks) and intra-group KD per complexity group.
inline std::vector<GroupBias> complexity_bias(const ScoreTable& t, const ComplexityGrouping& grouping) {
    const auto rd = ranking_difference(t);
    std::vector<GroupBias> out(grouping.groups);
    std::vector<std::vector<double>> y(grouping.groups), s(grouping.groups);
    for (std::size_t i = 0; i < t.size(); ++i) {
        auto it = grouping.group_of.find(t[i].id);
        if (it == grouping.group_of.end()) throw ConfigError("genotype " + t[i].id + " is not in the grouping");
        auto& g = out[it->second];
        g.size++;
        g.mean_rd += static_cast<double>(rd[i]);
        y[it->second].push_back(t[i].gt);
        s[it->second].push_back(t[i].est);
    }
    for (std::size_t g = 0; g < out.size(); ++g) {
        out[g].group = g;
        if (out[g].size) out[g].mean_rd /= static_cast<double>(out[g].size);
        if (out[g].size >= 2) out[g].kd = kendall_tau(y[g], s[g]);
    }
    return out;
}

struct MutationTypeStats {
    std::size_t from_op = 0;
    std::size_t to_op = 0;
    /// Complexity group of the source genotype, or nullopt for all pairs.
    std::optional<std::size_t> group;
    std::size_t pairs = 0;
    std::size_t missing = 0;  // pairs with a genotype absent from a table
    double gt_increase = 0.0;
    double os_acc_increase = 0.0;
    double os_loss_decrease = std::numeric_limits<double>::quiet_NaN();
};

using GenotypeScores = std::unordered_map<Genotype, double, GenotypeHash>;

namespace detail {

struct MutationCounter {
    std::size_t pairs = 0, missing = 0, gt = 0, acc = 0, loss = 0;

    void add(const Genotype& a, const Genotype& b, const GenotypeScores& gt_s, const GenotypeScores& acc_s,
             const GenotypeScores* loss_s) {
        auto ga = gt_s.find(a), gb = gt_s.find(b), oa = acc_s.find(a), ob = acc_s.find(b);
        if (ga == gt_s.end() || gb == gt_s.end() || oa == acc_s.end() || ob == acc_s.end()) {
            ++missing;
            return;
        }
        ++pairs;
        gt += gb->second > ga->second;
        acc += ob->second > oa->second;
        if (loss_s) {
            auto la = loss_s->find(a), lb = loss_s->find(b);
            if (la != loss_s->end() && lb != loss_s->end()) loss += lb->second < la->second;
        }
    }

    MutationTypeStats finish(std::size_t from, std::size_t to, std::optional<std::size_t> group, bool with_loss) const {
        MutationTypeStats s{from, to, group, pairs, missing};
        const double n = pairs ? static_cast<double>(pairs) : std::numeric_limits<double>::quiet_NaN();
        s.gt_increase = static_cast<double>(gt) / n;
        s.os_acc_increase = static_cast<double>(acc) / n;
        if (with_loss) s.os_loss_decrease = static_cast<double>(loss) / n;
        return s;
    }
};

}  // namespace detail

/// Per unordered operation pair (from < to): the share of from->to edit-distance-1 pairs whose
/// GT and OS accuracy increase and whose OS loss decreases. With a grouping, the rows are
/// repeated per complexity group of the source genotype.
inline std::vector<MutationTypeStats> mutation_analysis(const SearchSpaceDesc& space, const GenotypeScores& gt,
                                                        const GenotypeScores& os_acc,
                                                        const GenotypeScores* os_loss = nullptr,
                                                        const ComplexityGrouping* grouping = nullptr) {
    std::vector<MutationTypeStats> out;
    for (std::size_t a = 0; a < space.ops.size(); ++a)
        for (std::size_t b = a + 1; b < space.ops.size(); ++b) {
            detail::MutationCounter all;
            std::vector<detail::MutationCounter> per(grouping ? grouping->groups : 0);
            for_each_mutation_pair(space, a, b, [&](const Genotype& x, const Genotype& y) {
                all.add(x, y, gt, os_acc, os_loss);
                if (grouping) {
                    auto it = grouping->group_of.find(x.str());
                    if (it != grouping->group_of.end()) per[it->second].add(x, y, gt, os_acc, os_loss);
                }
            });
            out.push_back(all.finish(a, b, std::nullopt, os_loss != nullptr));
            for (std::size_t g = 0; g < per.size(); ++g) out.push_back(per[g].finish(a, b, g, os_loss != nullptr));
        }
    return out;
}

/// Same statistics over an explicit pair sample (spaces too large to enumerate).
inline MutationTypeStats mutation_analysis_pairs(std::size_t from_op, std::size_t to_op,
                                                 const std::vector<std::pair<Genotype, Genotype>>& pairs,
                                                 const GenotypeScores& gt, const GenotypeScores& os_acc,
                                                 const GenotypeScores* os_loss = nullptr) {
    detail::MutationCounter c;
    for (const auto& [a, b] : pairs) c.add(a, b, gt, os_acc, os_loss);
    return c.finish(from_op, to_op, std::nullopt, os_loss != nullptr);
}

/// First `levels` Pareto layers of (estimated score, complexity) as genotype ids.
inline std::vector<std::vector<std::string>> pareto_frontier(const ScoreTable& t, const std::vector<double>& complexity,
                                                             std::size_t levels, ParetoDirection dir) {
    if (levels < 1) throw ConfigError("pareto_frontier needs at least one level");
    if (complexity.size() != t.size()) throw ConfigError("pareto_frontier needs one complexity per row");
    std::vector<ParetoPoint> pts;
    for (std::size_t i = 0; i < t.size(); ++i) pts.push_back({t[i].est, complexity[i]});
    std::vector<std::vector<std::string>> out;
    for (const auto& layer : pareto_layers(pts, dir, levels)) {
        std::vector<std::string> ids;
        for (auto i : layer) ids.push_back(t[i].id);
        std::sort(ids.begin(), ids.end());
        out.push_back(std::move(ids));
    }
    return out;
}

struct ForgettingRecord {
    std::string genotype;
    std::size_t epoch = 0;
    std::size_t step = 0;
    double acc1 = 0.0;
    double acc2 = 0.0;
    double fv() const { return acc2 - acc1; }
};

/// Probe sample of at most `n` distinct genotypes.
inline std::vector<Genotype> sample_probes(const SearchSpaceDesc& space, std::size_t n, std::mt19937_64& rng) {
    std::set<Genotype> seen;
    std::vector<Genotype> out;
    const std::size_t limit = space.size() <= kEnumerationGuard ? std::min<std::size_t>(n, space.size()) : n;
    for (std::size_t tries = 0; out.size() < limit && tries < 100 * limit + 100; ++tries) {
        auto g = sample_uniform(space, rng);
        if (seen.insert(g).second) out.push_back(std::move(g));
    }
    return out;
}

/// Records acc1 right after every step that trains a probe genotype and acc2 for the same
/// occurrences once the epoch ends. Probes not sampled during an epoch produce no record.
template <std::floating_point T>
class ForgettingTracer {
public:
    ForgettingTracer(SupernetTrainer<T>& trainer, std::vector<Genotype> probes, std::vector<Batch<T>> valid,
                     EvalBnMode bn = EvalBnMode::batch)
        : trainer_(trainer), probes_(probes.begin(), probes.end()), valid_(std::move(valid)), bn_(bn) {
        trainer_.on_step([this](std::size_t step, const std::vector<Genotype>& sampled) {
            std::set<Genotype> done;
            for (const auto& g : sampled) {
                if (!probes_.count(g) || !done.insert(g).second) continue;
                const auto r = evaluate(trainer_.space(), trainer_.store(), g, valid_, bn_, trainer_.options());
                pending_.push_back({g.str(), trainer_.epoch() + 1, step, r.accuracy, 0.0});
            }
        });
    }

    ForgettingTracer(const ForgettingTracer&) = delete;
    ForgettingTracer& operator=(const ForgettingTracer&) = delete;
    ~ForgettingTracer() { trainer_.on_step(nullptr); }

    /// Trains one epoch and returns that epoch's records.
    std::vector<ForgettingRecord> run_epoch(const std::vector<Batch<T>>& train) {
        pending_.clear();
        trainer_.run_epoch(train);
        std::map<std::string, double> end_acc;
        for (auto& rec : pending_) {
            auto it = end_acc.find(rec.genotype);
            if (it == end_acc.end()) {
                const auto r = evaluate(trainer_.space(), trainer_.store(), Genotype::parse(rec.genotype), valid_, bn_,
                                        trainer_.options());
                it = end_acc.emplace(rec.genotype, r.accuracy).first;
            }
            rec.acc2 = it->second;
        }
        return std::move(pending_);
    }

private:
    SupernetTrainer<T>& trainer_;
    std::set<Genotype> probes_;
    std::vector<Batch<T>> valid_;
    EvalBnMode bn_;
    std::vector<ForgettingRecord> pending_;
};

/// Default layer partition: the stage/cell or stage/block prefix ("s0.c1"), otherwise the
/// first name component ("stem", "head", "r1").
inline std::string default_layer_of(const std::string& name) {
    const auto a = name.find('.');
    if (a == std::string::npos) return name;
    if (name[0] == 's' && a > 1 && std::all_of(name.begin() + 1, name.begin() + static_cast<std::ptrdiff_t>(a), ::isdigit)) {
        const auto b = name.find('.', a + 1);
        return name.substr(0, b);
    }
    return name.substr(0, a);
}

struct LayerSimilarity {
    std::string layer;
    std::vector<double> cosines;  // one per pair sharing this layer with nonzero gradients
    std::size_t skipped_zero = 0;

    double mean() const {
        if (cosines.empty()) return std::numeric_limits<double>::quiet_NaN();
        return std::accumulate(cosines.begin(), cosines.end(), 0.0) / static_cast<double>(cosines.size());
    }

    std::vector<std::size_t> histogram(std::size_t bins = 20) const {
        std::vector<std::size_t> h(bins, 0);
        for (double c : cosines) {
            auto b = static_cast<std::size_t>((c + 1.0) / 2.0 * static_cast<double>(bins));
            h[std::min(b, bins - 1)]++;
        }
        return h;
    }
};

inline double cosine_similarity(const std::vector<long double>& a, const std::vector<long double>& b) {
    if (a.size() != b.size()) throw ConfigError("cosine needs equal-length vectors");
    long double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0 || bb == 0) return std::numeric_limits<double>::quiet_NaN();
    return static_cast<double>(std::clamp(ab / std::sqrt(aa * bb), -1.0L, 1.0L));
}

/// Parameter gradients of one genotype's loss on `batch` (store values are not modified).
template <std::floating_point T>
std::map<std::string, std::vector<T>> genotype_gradients(const SearchSpaceDesc& space, ParamStore<T>& store,
                                                         const Genotype& g, const Batch<T>& batch,
                                                         SupernetOptions opts = {}) {
    SubNet<T> net(space, store, g, opts);
    auto params = net.parameters();
    for (auto& p : params) {
        p.tensor->requires_grad = true;
        p.tensor->grad_buffer();
        p.tensor->zero_grad();
    }
    GraphOptions<T> o;
    o.update_running_stats = false;
    o.dropout = false;
    Graph<T> graph(std::move(o));
    auto logits = net.forward(graph, graph.input(batch.x));
    auto l = ops::softmax_cross_entropy(graph, logits, std::span<const int>(batch.y));
    graph.backward(l);
    std::map<std::string, std::vector<T>> out;
    for (auto& p : params) {
        out.emplace(p.name, *p.tensor->grad);
        p.tensor->zero_grad();
    }
    return out;
}

/// Per-layer cosine similarity between the two genotypes' gradients over the tensors both use.
template <std::floating_point T>
std::vector<LayerSimilarity> gradient_similarity(const SearchSpaceDesc& space, const ParamStore<T>& store,
                                                 const std::vector<std::pair<Genotype, Genotype>>& pairs,
                                                 const Batch<T>& batch,
                                                 const std::function<std::string(const std::string&)>& layer_of =
                                                     default_layer_of,
                                                 SupernetOptions opts = {}) {
    ParamStore<T> work = store;
    std::map<Genotype, std::map<std::string, std::vector<T>>> cache;
    auto grads = [&](const Genotype& g) -> const std::map<std::string, std::vector<T>>& {
        auto it = cache.find(g);
        if (it == cache.end()) it = cache.emplace(g, genotype_gradients(space, work, g, batch, opts)).first;
        return it->second;
    };
    std::map<std::string, LayerSimilarity> layers;
    for (const auto& [a, b] : pairs) {
        const auto& ga = grads(a);
        const auto& gb = grads(b);
        std::map<std::string, std::pair<std::vector<long double>, std::vector<long double>>> flat;
        for (const auto& [name, va] : ga) {
            auto it = gb.find(name);
            if (it == gb.end()) continue;
            auto& f = flat[layer_of(name)];
            f.first.insert(f.first.end(), va.begin(), va.end());
            f.second.insert(f.second.end(), it->second.begin(), it->second.end());
        }
        for (const auto& [layer, v] : flat) {
            auto& ls = layers[layer];
            ls.layer = layer;
            const double c = cosine_similarity(v.first, v.second);
            if (std::isnan(c))
                ++ls.skipped_zero;
            else
                ls.cosines.push_back(c);
        }
    }
    std::vector<LayerSimilarity> out;
    for (auto& [k, v] : layers) out.push_back(std::move(v));
    return out;
}

}  // namespace nasaudit
