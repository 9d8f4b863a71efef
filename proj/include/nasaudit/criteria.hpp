#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "nasaudit/core/tensor.hpp"

namespace nasaudit {

struct ScoreRow {
    std::string id;
    double gt = 0.0;
    double est = 0.0;
};

/// Ground-truth and estimated scores per genotype; higher is better on both.
class ScoreTable {
public:
    ScoreTable() = default;
    explicit ScoreTable(std::vector<ScoreRow> rows) : rows_(std::move(rows)) {}

    void add(std::string id, double gt, double est) { rows_.push_back({std::move(id), gt, est}); }
    std::size_t size() const { return rows_.size(); }
    const std::vector<ScoreRow>& rows() const { return rows_; }
    const ScoreRow& operator[](std::size_t i) const { return rows_[i]; }

    std::vector<double> gt() const {
        std::vector<double> v;
        v.reserve(rows_.size());
        for (const auto& r : rows_) v.push_back(r.gt);
        return v;
    }
    std::vector<double> est() const {
        std::vector<double> v;
        v.reserve(rows_.size());
        for (const auto& r : rows_) v.push_back(r.est);
        return v;
    }
    std::vector<std::string> ids() const {
        std::vector<std::string> v;
        v.reserve(rows_.size());
        for (const auto& r : rows_) v.push_back(r.id);
        return v;
    }

    /// Strict ranks (1 = best), score ties broken by id order.
    std::vector<std::size_t> gt_ranks() const { return strict_ranks(gt()); }
    std::vector<std::size_t> est_ranks() const { return strict_ranks(est()); }

    std::vector<std::size_t> strict_ranks(const std::vector<double>& score) const {
        std::vector<std::size_t> order(rows_.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (score[a] != score[b]) return score[a] > score[b];
            return rows_[a].id < rows_[b].id;
        });
        std::vector<std::size_t> rank(rows_.size());
        for (std::size_t k = 0; k < order.size(); ++k) rank[order[k]] = k + 1;
        return rank;
    }

    /// Same genotypes in the same order as `other`.
    bool same_genotypes(const ScoreTable& other) const {
        if (size() != other.size()) return false;
        for (std::size_t i = 0; i < size(); ++i)
            if (rows_[i].id != other.rows_[i].id) return false;
        return true;
    }

    /// Rows reordered to follow `other`'s genotype order; throws on a genotype mismatch.
    ScoreTable aligned_to(const ScoreTable& other) const {
        if (size() != other.size()) throw ConfigError("score tables cover different genotype sets");
        std::map<std::string, std::size_t> at;
        for (std::size_t i = 0; i < size(); ++i) at.emplace(rows_[i].id, i);
        if (at.size() != size()) throw ConfigError("score table has duplicate genotypes");
        std::vector<ScoreRow> out;
        out.reserve(size());
        for (const auto& r : other.rows_) {
            auto it = at.find(r.id);
            if (it == at.end()) throw ConfigError("genotype " + r.id + " missing from score table");
            out.push_back(rows_[it->second]);
        }
        return ScoreTable(std::move(out));
    }

private:
    std::vector<ScoreRow> rows_;
};

/// Ranks with tied blocks sharing their mean rank (1 = best).
inline std::vector<double> mean_ranks(const std::vector<double>& score) {
    std::vector<std::size_t> order(score.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    std::vector<double> rank(score.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && score[order[j + 1]] == score[order[i]]) ++j;
        const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
        i = j + 1;
    }
    return rank;
}

namespace detail {

inline double pearson(const std::vector<double>& y, const std::vector<double>& s, const char* y_name,
                      const char* s_name) {
    if (y.size() != s.size()) throw ConfigError("correlation inputs differ in length");
    if (y.size() < 2) throw ConfigError("correlation needs at least two rows");
    long double my = 0, ms = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        my += y[i];
        ms += s[i];
    }
    my /= static_cast<long double>(y.size());
    ms /= static_cast<long double>(s.size());
    long double syy = 0, sss = 0, sys = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const long double dy = y[i] - my, ds = s[i] - ms;
        syy += dy * dy;
        sss += ds * ds;
        sys += dy * ds;
    }
    if (syy == 0) throw NumericError(y_name, "constant input, correlation undefined");
    if (sss == 0) throw NumericError(s_name, "constant input, correlation undefined");
    const long double r = sys / std::sqrt(syy * sss);
    return static_cast<double>(std::clamp(r, -1.0L, 1.0L));
}

/// Inversions in v counted by merge sort.
inline std::uint64_t count_inversions(std::vector<double>& v, std::vector<double>& tmp, std::size_t lo,
                                      std::size_t hi) {
    if (hi - lo < 2) return 0;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::uint64_t inv = count_inversions(v, tmp, lo, mid) + count_inversions(v, tmp, mid, hi);
    std::size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (v[j] < v[i]) {
            inv += mid - i;
            tmp[k++] = v[j++];
        } else {
            tmp[k++] = v[i++];
        }
    }
    while (i < mid) tmp[k++] = v[i++];
    while (j < hi) tmp[k++] = v[j++];
    std::copy(tmp.begin() + static_cast<std::ptrdiff_t>(lo), tmp.begin() + static_cast<std::ptrdiff_t>(hi),
              v.begin() + static_cast<std::ptrdiff_t>(lo));
    return inv;
}

inline bool has_ties(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return std::adjacent_find(v.begin(), v.end()) != v.end();
}

inline int sgn(double x) { return (x > 0) - (x < 0); }

}  // namespace detail

inline std::size_t topk_count(double k, std::size_t m) {
    if (!(k > 0.0 && k <= 1.0)) throw ConfigError("K must be in (0, 1]");
    const auto c = static_cast<std::size_t>(std::llround(k * static_cast<double>(m)));
    return std::clamp<std::size_t>(c, 1, std::max<std::size_t>(m, 1));
}

inline double pearson_lc(const ScoreTable& t) {
    return detail::pearson(t.gt(), t.est(), "ground-truth score", "estimated score");
}

/// Pair-sum tau-a; O(M^2) reference.
inline double kendall_tau_bruteforce(const std::vector<double>& y, const std::vector<double>& s) {
    if (y.size() != s.size() || y.size() < 2) throw ConfigError("kendall tau needs two equal-length inputs, M >= 2");
    std::int64_t sum = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
        for (std::size_t j = i + 1; j < y.size(); ++j) sum += detail::sgn(y[i] - y[j]) * detail::sgn(s[i] - s[j]);
    const auto m = static_cast<std::int64_t>(y.size());
    return static_cast<double>(sum) / static_cast<double>(m * (m - 1) / 2);
}

/// tau-a. Tie-free inputs use the merge-sort inversion count (same integer numerator as the
/// pair sum, so the result is bit-identical); ties fall back to the pair sum.
inline double kendall_tau(const std::vector<double>& y, const std::vector<double>& s) {
    if (y.size() != s.size() || y.size() < 2) throw ConfigError("kendall tau needs two equal-length inputs, M >= 2");
    if (detail::has_ties(y) || detail::has_ties(s)) return kendall_tau_bruteforce(y, s);
    std::vector<std::size_t> order(y.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return y[a] < y[b]; });
    std::vector<double> v(y.size()), tmp(y.size());
    for (std::size_t k = 0; k < order.size(); ++k) v[k] = s[order[k]];
    const std::uint64_t inv = detail::count_inversions(v, tmp, 0, v.size());
    const auto m = static_cast<std::int64_t>(y.size());
    const std::int64_t pairs = m * (m - 1) / 2;
    return static_cast<double>(pairs - 2 * static_cast<std::int64_t>(inv)) / static_cast<double>(pairs);
}

inline double kendall_tau(const ScoreTable& t) { return kendall_tau(t.gt(), t.est()); }

inline double spearman(const ScoreTable& t) {
    return detail::pearson(mean_ranks(t.gt()), mean_ranks(t.est()), "ground-truth score", "estimated score");
}

inline double p_at_topk(const ScoreTable& t, double k) {
    const std::size_t c = topk_count(k, t.size());
    const auto r = t.gt_ranks(), n = t.est_ranks();
    std::size_t hit = 0;
    for (std::size_t i = 0; i < t.size(); ++i) hit += (r[i] <= c && n[i] <= c);
    return static_cast<double>(hit) / static_cast<double>(c);
}

inline double p_at_bottomk(const ScoreTable& t, double k) {
    const std::size_t m = t.size(), c = topk_count(k, m);
    const auto r = t.gt_ranks(), n = t.est_ranks();
    std::size_t hit = 0;
    for (std::size_t i = 0; i < m; ++i) hit += (r[i] > m - c && n[i] > m - c);
    return static_cast<double>(hit) / static_cast<double>(c);
}

/// Best normalized true rank (r/M) among the predicted top-K.
inline double br_at_k(const ScoreTable& t, double k) {
    const std::size_t m = t.size(), c = topk_count(k, m);
    const auto r = t.gt_ranks(), n = t.est_ranks();
    std::size_t best = m;
    for (std::size_t i = 0; i < m; ++i)
        if (n[i] <= c) best = std::min(best, r[i]);
    return static_cast<double>(best) / static_cast<double>(m);
}

/// Worst normalized true rank among the predicted top-K.
inline double wr_at_k(const ScoreTable& t, double k) {
    const std::size_t m = t.size(), c = topk_count(k, m);
    const auto r = t.gt_ranks(), n = t.est_ranks();
    std::size_t worst = 0;
    for (std::size_t i = 0; i < m; ++i)
        if (n[i] <= c) worst = std::max(worst, r[i]);
    return static_cast<double>(worst) / static_cast<double>(m);
}

inline const std::vector<double>& default_ks() {
    static const std::vector<double> ks{0.001, 0.005, 0.01, 0.05, 0.1};
    return ks;
}

struct KCriteria {
    double k = 0.0;
    double p_top = 0.0;
    double p_bottom = 0.0;
    double br = 0.0;
    double wr = 0.0;
};

struct CriterionValue {
    std::string criterion;
    double k = std::numeric_limits<double>::quiet_NaN();  // NaN for K-free criteria
    double value = 0.0;
};

struct CriteriaReport {
    double lc = std::numeric_limits<double>::quiet_NaN();
    double kd = 0.0;
    double spearman = std::numeric_limits<double>::quiet_NaN();
    std::vector<KCriteria> per_k;

    std::vector<CriterionValue> flatten() const {
        const double none = std::numeric_limits<double>::quiet_NaN();
        std::vector<CriterionValue> out{{"LC", none, lc}, {"KD", none, kd}, {"SpearmanR", none, spearman}};
        for (const auto& k : per_k) {
            out.push_back({"P@topK", k.k, k.p_top});
            out.push_back({"P@bottomK", k.k, k.p_bottom});
            out.push_back({"BR@K", k.k, k.br});
            out.push_back({"WR@K", k.k, k.wr});
        }
        return out;
    }
};

/// All criteria; LC and SpearmanR are NaN when a side is constant.
inline CriteriaReport criteria_report(const ScoreTable& t, const std::vector<double>& ks = default_ks()) {
    CriteriaReport rep;
    try {
        rep.lc = pearson_lc(t);
        rep.spearman = spearman(t);
    } catch (const NumericError&) {
        rep.lc = rep.spearman = std::numeric_limits<double>::quiet_NaN();
    }
    rep.kd = kendall_tau(t);
    for (double k : ks) rep.per_k.push_back({k, p_at_topk(t, k), p_at_bottomk(t, k), br_at_k(t, k), wr_at_k(t, k)});
    return rep;
}

struct RelativeStability {
    double kd = 0.0;
    std::vector<KCriteria> per_k;  // only p_top and p_bottom are filled
};

/// Criteria of the earlier estimates against the later ones taken as ground truth.
inline RelativeStability relative_stability(const ScoreTable& earlier, const ScoreTable& later,
                                            const std::vector<double>& ks = default_ks()) {
    const ScoreTable a = earlier.aligned_to(later);
    ScoreTable t;
    for (std::size_t i = 0; i < a.size(); ++i) t.add(a[i].id, later[i].est, a[i].est);
    RelativeStability out;
    out.kd = kendall_tau(t);
    for (double k : ks) out.per_k.push_back({k, p_at_topk(t, k), p_at_bottomk(t, k), 0.0, 0.0});
    return out;
}

struct LevelKd {
    double level_score = 0.0;
    std::size_t size = 0;
    double kd = 0.0;
};

struct IntraLevelKd {
    std::vector<LevelKd> levels;       // only levels with more than one genotype
    std::size_t total_levels = 0;
    std::vector<std::size_t> histogram;  // counts of level KD over equal-width bins on [-1, 1]

    std::string summary() const {
        return std::to_string(levels.size()) + "/" + std::to_string(total_levels);
    }
};

/// Levels are groups of equal coarse estimates; within each level of size > 1 the fine
/// estimates are ranked against ground truth (taken from the fine table).
inline IntraLevelKd intra_level_kd(const ScoreTable& coarse, const ScoreTable& fine, std::size_t bins = 10) {
    if (bins == 0) throw ConfigError("histogram needs at least one bin");
    const ScoreTable c = coarse.aligned_to(fine);
    std::map<double, std::vector<std::size_t>> by_level;
    for (std::size_t i = 0; i < c.size(); ++i) by_level[c[i].est].push_back(i);
    IntraLevelKd out;
    out.total_levels = by_level.size();
    out.histogram.assign(bins, 0);
    for (const auto& [score, members] : by_level) {
        if (members.size() < 2) continue;
        std::vector<double> y, s;
        for (auto i : members) {
            y.push_back(fine[i].gt);
            s.push_back(fine[i].est);
        }
        const double kd = kendall_tau(y, s);
        out.levels.push_back({score, members.size(), kd});
        auto b = static_cast<std::size_t>((kd + 1.0) / 2.0 * static_cast<double>(bins));
        out.histogram[std::min(b, bins - 1)]++;
    }
    return out;
}

}  // namespace nasaudit
