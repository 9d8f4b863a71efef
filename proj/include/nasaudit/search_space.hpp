#pragma once

#include <algorithm>
#include <charconv>
#include <compare>
#include <cstdint>
#include <functional>
#include <iterator>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nasaudit/core/tensor.hpp"

namespace nasaudit {

enum class SpaceKind { op_on_edge, op_on_node, non_topological };

inline const char* to_string(SpaceKind k) {
    switch (k) {
        case SpaceKind::op_on_edge: return "op_on_edge";
        case SpaceKind::op_on_node: return "op_on_node";
        case SpaceKind::non_topological: return "non_topological";
    }
    return "?";
}

enum class OpKind { none, skip_connect, conv, avg_pool, max_pool };

/// One candidate operation. Convolutions are ReLU-Conv-BN on edges (NB201 style) and
/// Conv-BN-ReLU on nodes (NB101 style); pools are 3x3, stride 1, padding 1.
struct OpTemplate {
    std::string name;
    OpKind kind = OpKind::none;
    std::size_t kernel = 0;

    bool parametric() const { return kind == OpKind::conv; }

    static OpTemplate none() { return {"none", OpKind::none, 0}; }
    static OpTemplate skip() { return {"skip_connect", OpKind::skip_connect, 0}; }
    static OpTemplate conv(std::size_t k) {
        return {"nor_conv_" + std::to_string(k) + "x" + std::to_string(k), OpKind::conv, k};
    }
    static OpTemplate avg_pool() { return {"avg_pool_3x3", OpKind::avg_pool, 3}; }
    static OpTemplate max_pool() { return {"max_pool_3x3", OpKind::max_pool, 3}; }

    static OpTemplate parse(const std::string& name) {
        if (name == "none") return none();
        if (name == "skip_connect") return skip();
        if (name == "avg_pool_3x3") return avg_pool();
        if (name == "max_pool_3x3") return max_pool();
        if (name.rfind("nor_conv_", 0) == 0) {
            std::size_t k = 0;
            auto s = name.substr(9);
            auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), k);
            if (ec == std::errc() && k > 0 && k % 2 == 1 && s == std::to_string(k) + "x" + std::to_string(k))
                return conv(k);
        }
        throw ConfigError("unknown operation '" + name + "'");
    }
};

/// Channel count, spatial size (square) and number of searchable cells of one stage.
struct StageGeometry {
    std::size_t channels = 16;
    std::size_t spatial = 32;
    std::size_t cells = 1;
};

/// Per-stage choice lists of a non-topological (ResNet/ResNeXt-like) space.
struct BlockStageChoices {
    std::vector<std::size_t> depths{1, 2};
    std::vector<std::size_t> widths{16, 32};
    std::vector<double> ratios{0.5, 1.0};
    std::vector<std::size_t> groups{1};
};

/// Immutable description of a search space.
struct SearchSpaceDesc {
    std::string id = "space";
    SpaceKind kind = SpaceKind::op_on_edge;
    /// Cell nodes including the input node 0 and the output node num_nodes-1.
    std::size_t num_nodes = 4;
    /// op_on_edge: the edges (from, to) in position order, from < to.
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    std::vector<OpTemplate> ops;
    std::vector<StageGeometry> stages;
    std::vector<BlockStageChoices> block_stages;  // non_topological only
    std::size_t stem_channels = 16;               // non_topological stem width
    std::size_t input_channels = 3;
    std::size_t num_classes = 10;
    bool bn_affine = true;

    bool topological() const { return kind != SpaceKind::non_topological; }

    /// Cardinality of every decision position.
    std::vector<std::size_t> cardinalities() const {
        std::vector<std::size_t> c;
        switch (kind) {
            case SpaceKind::op_on_edge: c.assign(edges.size(), ops.size()); break;
            case SpaceKind::op_on_node:
                c.assign(node_edge_pairs().size(), 2);
                c.insert(c.end(), num_nodes - 2, ops.size());
                break;
            case SpaceKind::non_topological:
                for (const auto& s : block_stages) {
                    c.push_back(s.depths.size());
                    c.push_back(s.widths.size());
                    c.push_back(s.ratios.size());
                    c.push_back(s.groups.size());
                }
                break;
        }
        return c;
    }

    /// Positions whose choices are the operation vocabulary (mutation targets).
    std::vector<std::size_t> op_positions() const {
        std::vector<std::size_t> p;
        if (kind == SpaceKind::op_on_edge) {
            p.resize(edges.size());
            std::iota(p.begin(), p.end(), 0);
        } else if (kind == SpaceKind::op_on_node) {
            const std::size_t base = node_edge_pairs().size();
            for (std::size_t i = 0; i + 2 < num_nodes; ++i) p.push_back(base + i);
        }
        return p;
    }

    /// op_on_node: every (from, to) pair with from < to, in position order.
    std::vector<std::pair<std::size_t, std::size_t>> node_edge_pairs() const {
        std::vector<std::pair<std::size_t, std::size_t>> e;
        for (std::size_t to = 1; to < num_nodes; ++to)
            for (std::size_t from = 0; from < to; ++from) e.emplace_back(from, to);
        return e;
    }

    /// Number of raw genotypes; saturates at the largest representable value.
    long double size() const {
        long double n = 1.0L;
        for (auto c : cardinalities()) n *= static_cast<long double>(c);
        return n;
    }

    std::size_t op_index(const std::string& name) const {
        for (std::size_t i = 0; i < ops.size(); ++i)
            if (ops[i].name == name) return i;
        throw ConfigError("space '" + id + "' has no operation '" + name + "'");
    }

    void validate() const {
        if (id.empty() || id.find('/') != std::string::npos)
            throw ConfigError("space id must be non-empty and contain no '/'");
        if (stages.empty() && kind != SpaceKind::non_topological)
            throw ConfigError("space '" + id + "' has no stages");
        if (kind == SpaceKind::op_on_edge) {
            if (ops.empty() || edges.empty()) throw ConfigError("op_on_edge space needs ops and edges");
            for (auto [a, b] : edges)
                if (!(a < b && b < num_nodes)) throw ConfigError("edge endpoints must satisfy from < to < num_nodes");
        }
        if (kind == SpaceKind::op_on_node) {
            if (num_nodes < 3 || ops.empty()) throw ConfigError("op_on_node space needs >= 3 nodes and ops");
            for (const auto& o : ops)
                if (o.kind == OpKind::none || o.kind == OpKind::skip_connect)
                    throw ConfigError("op_on_node vocabularies hold only conv and pool operations");
        }
        if (kind == SpaceKind::non_topological) {
            if (block_stages.empty()) throw ConfigError("non_topological space needs block stages");
            for (const auto& s : block_stages)
                if (s.depths.empty() || s.widths.empty() || s.ratios.empty() || s.groups.empty())
                    throw ConfigError("every block stage needs non-empty choice lists");
        }
    }
};

/// NB201-style cell: 4 nodes, 6 edges, operations none/skip/conv1x1/conv3x3/avgpool.
inline SearchSpaceDesc nb201_like(std::vector<StageGeometry> stages = {{16, 32, 5}, {32, 16, 5}, {64, 8, 5}},
                                  std::string id = "nb201-like") {
    SearchSpaceDesc s;
    s.id = std::move(id);
    s.kind = SpaceKind::op_on_edge;
    s.num_nodes = 4;
    s.edges = {{0, 1}, {0, 2}, {1, 2}, {0, 3}, {1, 3}, {2, 3}};
    s.ops = {OpTemplate::none(), OpTemplate::skip(), OpTemplate::conv(1), OpTemplate::conv(3),
             OpTemplate::avg_pool()};
    s.stages = std::move(stages);
    return s;
}

/// Fully connected op-on-edge cell over `num_nodes` nodes with the given operations.
inline SearchSpaceDesc edge_space(std::string id, std::size_t num_nodes, std::vector<OpTemplate> ops,
                                  std::vector<StageGeometry> stages) {
    SearchSpaceDesc s;
    s.id = std::move(id);
    s.kind = SpaceKind::op_on_edge;
    s.num_nodes = num_nodes;
    for (std::size_t to = 1; to < num_nodes; ++to)
        for (std::size_t from = 0; from < to; ++from) s.edges.emplace_back(from, to);
    s.ops = std::move(ops);
    s.stages = std::move(stages);
    return s;
}

/// NB101-style op-on-node cell: binary connection decisions plus one operation per node.
inline SearchSpaceDesc nb101_like(std::size_t num_nodes = 5,
                                  std::vector<StageGeometry> stages = {{16, 32, 1}, {32, 16, 1}, {64, 8, 1}},
                                  std::string id = "nb101-like") {
    SearchSpaceDesc s;
    s.id = std::move(id);
    s.kind = SpaceKind::op_on_node;
    s.num_nodes = num_nodes;
    s.ops = {OpTemplate::conv(3), OpTemplate::conv(1), OpTemplate::max_pool()};
    s.stages = std::move(stages);
    return s;
}

/// ResNet/ResNeXt-like space of bottleneck stages with depth/width/ratio/group choices.
inline SearchSpaceDesc resnet_like(std::vector<BlockStageChoices> stages, std::size_t input_size = 32,
                                   std::size_t stem = 16, std::string id = "resnet-like") {
    SearchSpaceDesc s;
    s.id = std::move(id);
    s.kind = SpaceKind::non_topological;
    s.block_stages = std::move(stages);
    s.stem_channels = stem;
    for (std::size_t i = 0; i < s.block_stages.size(); ++i)
        s.stages.push_back({0, input_size >> i, 0});
    return s;
}

/// One architecture: a decision index per position of its space.
struct Genotype {
    std::string space;
    std::vector<std::uint32_t> decisions;

    auto operator<=>(const Genotype&) const = default;
    bool operator==(const Genotype&) const = default;

    std::uint32_t operator[](std::size_t i) const { return decisions.at(i); }
    std::size_t size() const { return decisions.size(); }

    /// `space/i,j,k,...`
    std::string str() const {
        std::string s = space + "/";
        for (std::size_t i = 0; i < decisions.size(); ++i) {
            if (i) s += ',';
            s += std::to_string(decisions[i]);
        }
        return s;
    }

    static Genotype parse(const std::string& text) {
        const auto slash = text.rfind('/');
        if (slash == std::string::npos || slash == 0)
            throw ConfigError("genotype '" + text + "' is not of the form space/i,j,...");
        Genotype g;
        g.space = text.substr(0, slash);
        std::string rest = text.substr(slash + 1);
        std::size_t pos = 0;
        while (pos <= rest.size() && !rest.empty()) {
            auto comma = rest.find(',', pos);
            if (comma == std::string::npos) comma = rest.size();
            std::uint32_t v = 0;
            auto [p, ec] = std::from_chars(rest.data() + pos, rest.data() + comma, v);
            if (ec != std::errc() || p != rest.data() + comma)
                throw ConfigError("genotype '" + text + "' has a malformed decision index");
            g.decisions.push_back(v);
            pos = comma + 1;
            if (comma == rest.size()) break;
        }
        return g;
    }
};

struct GenotypeHash {
    std::size_t operator()(const Genotype& g) const noexcept {
        std::size_t h = std::hash<std::string>{}(g.space);
        for (auto d : g.decisions) h = h * 1000003u ^ d;
        return h;
    }
};

inline void validate_genotype(const Genotype& g, const SearchSpaceDesc& space) {
    if (g.space != space.id)
        throw ConfigError("genotype " + g.str() + " does not belong to space '" + space.id + "'");
    const auto card = space.cardinalities();
    if (g.decisions.size() != card.size())
        throw ConfigError("genotype " + g.str() + " has " + std::to_string(g.decisions.size()) +
                          " decisions, space expects " + std::to_string(card.size()));
    for (std::size_t i = 0; i < card.size(); ++i)
        if (g.decisions[i] >= card[i])
            throw ConfigError("genotype " + g.str() + " decision " + std::to_string(i) + " out of range");
}

inline constexpr long double kEnumerationGuard = 1e7L;

/// Every genotype of a space exactly once, in lexicographic order (last position fastest).
class GenotypeRange {
public:
    explicit GenotypeRange(const SearchSpaceDesc& space) : id_(space.id), card_(space.cardinalities()) {
        if (space.size() > kEnumerationGuard)
            throw ConfigError("space '" + space.id + "' has more than 1e7 genotypes; sample instead of enumerating");
        for (auto c : card_)
            if (c == 0) empty_ = true;
    }

    class iterator {
    public:
        using iterator_category = std::input_iterator_tag;
        using value_type = Genotype;
        using difference_type = std::ptrdiff_t;
        using pointer = const Genotype*;
        using reference = const Genotype&;

        iterator() = default;
        iterator(const GenotypeRange* r, bool end) : range_(r), done_(end) {
            if (!end) current_ = Genotype{r->id_, std::vector<std::uint32_t>(r->card_.size(), 0)};
        }

        reference operator*() const { return current_; }
        pointer operator->() const { return &current_; }

        iterator& operator++() {
            auto& d = current_.decisions;
            std::size_t i = d.size();
            while (i > 0) {
                --i;
                if (++d[i] < range_->card_[i]) return *this;
                d[i] = 0;
            }
            done_ = true;
            return *this;
        }
        void operator++(int) { ++*this; }

        bool operator==(const iterator& o) const { return done_ == o.done_ && (done_ || current_ == o.current_); }

    private:
        const GenotypeRange* range_ = nullptr;
        Genotype current_;
        bool done_ = true;
    };

    iterator begin() const { return iterator(this, empty_); }
    iterator end() const { return iterator(this, true); }

private:
    std::string id_;
    std::vector<std::size_t> card_;
    bool empty_ = false;
};

inline GenotypeRange enumerate(const SearchSpaceDesc& space) { return GenotypeRange(space); }

inline std::vector<Genotype> enumerate_all(const SearchSpaceDesc& space) {
    std::vector<Genotype> out;
    for (const auto& g : enumerate(space)) out.push_back(g);
    return out;
}

/// Text encoding of a computational equivalence class.
///
/// Node expressions are built in topological order: an edge contributes "#" when its op is
/// `none` or its source expression is exactly "#", the source expression itself for
/// `skip_connect`, and "(" + source + ")@" + op otherwise; a node joins the sorted
/// contributions with '+'. The output node's expression is the encoding. `dead` marks
/// architectures with no input-to-output path (the input symbol "0" never reaches the output).
struct CanonicalString {
    std::string text;
    bool dead = false;

    static constexpr const char* kDeadToken = "<dead>";

    /// The encoding, or the dead-architecture token.
    std::string token() const { return dead ? kDeadToken : text; }

    auto operator<=>(const CanonicalString&) const = default;
};

namespace detail {

inline std::string join_sorted(std::vector<std::string> terms) {
    std::sort(terms.begin(), terms.end());
    std::string s;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (i) s += '+';
        s += terms[i];
    }
    return s;
}

/// Node expressions of a topological genotype, one per cell node.
inline std::vector<std::string> node_expressions(const Genotype& g, const SearchSpaceDesc& space) {
    std::vector<std::string> expr(space.num_nodes);
    expr[0] = "0";
    if (space.kind == SpaceKind::op_on_edge) {
        for (std::size_t i = 1; i < space.num_nodes; ++i) {
            std::vector<std::string> terms;
            for (std::size_t e = 0; e < space.edges.size(); ++e) {
                auto [from, to] = space.edges[e];
                if (to != i) continue;
                const auto& op = space.ops[g.decisions[e]];
                if (op.kind == OpKind::none || expr[from] == "#") terms.emplace_back("#");
                else if (op.kind == OpKind::skip_connect) terms.push_back(expr[from]);
                else terms.push_back("(" + expr[from] + ")@" + op.name);
            }
            expr[i] = terms.empty() ? "#" : join_sorted(std::move(terms));
        }
    } else {
        const auto pairs = space.node_edge_pairs();
        const std::size_t base = pairs.size();
        for (std::size_t i = 1; i < space.num_nodes; ++i) {
            std::vector<std::string> terms;
            for (std::size_t e = 0; e < pairs.size(); ++e) {
                auto [from, to] = pairs[e];
                if (to != i) continue;
                terms.push_back(g.decisions[e] && expr[from] != "#" ? expr[from] : "#");
            }
            const std::string in = join_sorted(std::move(terms));
            bool live = in.find('0') != std::string::npos;
            if (i + 1 == space.num_nodes) expr[i] = in;
            else if (!live) expr[i] = "#";
            else expr[i] = "(" + in + ")@" + space.ops[g.decisions[base + i - 1]].name;
        }
    }
    return expr;
}

}  // namespace detail

inline CanonicalString canonicalize(const Genotype& g, const SearchSpaceDesc& space) {
    if (!space.topological())
        throw ConfigError("non-topological genotypes have no isomorphic variants to canonicalize");
    validate_genotype(g, space);
    auto expr = detail::node_expressions(g, space);
    CanonicalString c;
    c.text = std::move(expr.back());
    c.dead = c.text.find('0') == std::string::npos;
    return c;
}

struct ParamsFlops {
    std::uint64_t params = 0;
    std::uint64_t flops = 0;

    ParamsFlops& operator+=(const ParamsFlops& o) {
        params += o.params;
        flops += o.flops;
        return *this;
    }
    friend ParamsFlops operator+(ParamsFlops a, const ParamsFlops& b) { return a += b; }
    friend ParamsFlops operator*(std::uint64_t k, ParamsFlops a) { return {k * a.params, k * a.flops}; }
    bool operator==(const ParamsFlops&) const = default;
};

// FLOPs are 2 * multiply-accumulates of convolutions and linear layers. Batch-norm, pooling,
// ReLU and elementwise additions are not counted.
namespace cost {

inline ParamsFlops conv(std::size_t cin, std::size_t cout, std::size_t k, std::size_t out_hw,
                        std::size_t groups = 1, bool bias = false) {
    const std::uint64_t w = static_cast<std::uint64_t>(cin / groups) * cout * k * k;
    return {w + (bias ? cout : 0), 2 * w * out_hw * out_hw};
}

inline ParamsFlops bn(std::size_t c, bool affine) { return {affine ? 2 * static_cast<std::uint64_t>(c) : 0, 0}; }

inline ParamsFlops linear(std::size_t in, std::size_t out, bool bias = true) {
    const std::uint64_t w = static_cast<std::uint64_t>(in) * out;
    return {w + (bias ? out : 0), 2 * w};
}

/// One cell operation at `channels` x `hw`.
inline ParamsFlops op(const OpTemplate& o, std::size_t channels, std::size_t hw, bool affine) {
    if (!o.parametric()) return {};
    return conv(channels, channels, o.kernel, hw) + bn(channels, affine);
}

}  // namespace cost

enum class CountMode {
    /// Every operation the realized network instantiates.
    realized,
    /// Only operations that appear in the canonical expression; shared sub-expressions are
    /// counted once per occurrence, so members of one class always agree.
    simplified,
};

namespace detail {

/// Fixed skeleton of topological spaces: stem, reduction blocks between stages and head.
inline ParamsFlops skeleton_cost(const SearchSpaceDesc& s) {
    ParamsFlops c;
    const auto& st = s.stages;
    c += cost::conv(s.input_channels, st[0].channels, 3, st[0].spatial) + cost::bn(st[0].channels, s.bn_affine);
    for (std::size_t i = 1; i < st.size(); ++i) {
        const std::size_t cin = st[i - 1].channels, cout = st[i].channels, hw = st[i].spatial;
        c += cost::conv(cin, cout, 3, hw) + cost::bn(cout, s.bn_affine);
        c += cost::conv(cout, cout, 3, hw) + cost::bn(cout, s.bn_affine);
        c += cost::conv(cin, cout, 1, hw);
    }
    c += cost::bn(st.back().channels, s.bn_affine);
    c += cost::linear(st.back().channels, s.num_classes);
    return c;
}

/// Cost of one cell instance at (channels, hw).
inline ParamsFlops cell_cost(const Genotype& g, const SearchSpaceDesc& s, std::size_t channels,
                             std::size_t hw, CountMode mode) {
    ParamsFlops c;
    if (mode == CountMode::realized) {
        if (s.kind == SpaceKind::op_on_edge) {
            for (std::size_t e = 0; e < s.edges.size(); ++e)
                c += cost::op(s.ops[g.decisions[e]], channels, hw, s.bn_affine);
        } else {
            const std::size_t base = s.node_edge_pairs().size();
            for (std::size_t i = 1; i + 1 < s.num_nodes; ++i)
                c += cost::op(s.ops[g.decisions[base + i - 1]], channels, hw, s.bn_affine);
        }
        return c;
    }
    // Simplified: cost carried along the same recursion that builds the expressions.
    std::vector<ParamsFlops> nc(s.num_nodes);
    const auto expr = node_expressions(g, s);
    if (s.kind == SpaceKind::op_on_edge) {
        for (std::size_t i = 1; i < s.num_nodes; ++i)
            for (std::size_t e = 0; e < s.edges.size(); ++e) {
                auto [from, to] = s.edges[e];
                if (to != i) continue;
                const auto& op = s.ops[g.decisions[e]];
                if (op.kind == OpKind::none || expr[from] == "#") continue;
                nc[i] += nc[from] + cost::op(op, channels, hw, s.bn_affine);
            }
    } else {
        const auto pairs = s.node_edge_pairs();
        const std::size_t base = pairs.size();
        for (std::size_t i = 1; i < s.num_nodes; ++i) {
            ParamsFlops in;
            for (std::size_t e = 0; e < pairs.size(); ++e) {
                auto [from, to] = pairs[e];
                if (to == i && g.decisions[e] && expr[from] != "#") in += nc[from];
            }
            if (i + 1 == s.num_nodes) nc[i] = in;
            else if (expr[i] != "#") nc[i] = in + cost::op(s.ops[g.decisions[base + i - 1]], channels, hw, s.bn_affine);
        }
    }
    return nc.back();
}

}  // namespace detail

/// Resolved block geometry of one non-topological stage.
struct BlockStage {
    std::size_t depth = 1, width = 16, mid = 16, groups = 1;
};

inline std::size_t gcd_of(const std::vector<std::size_t>& v) {
    std::size_t g = 0;
    for (auto x : v) g = std::gcd(g, x);
    return g == 0 ? 1 : g;
}

/// Decodes a non-topological genotype into per-stage block geometry.
inline std::vector<BlockStage> decode_blocks(const Genotype& g, const SearchSpaceDesc& s) {
    validate_genotype(g, s);
    std::vector<BlockStage> out;
    for (std::size_t i = 0; i < s.block_stages.size(); ++i) {
        const auto& c = s.block_stages[i];
        BlockStage b;
        b.depth = c.depths[g.decisions[4 * i]];
        b.width = c.widths[g.decisions[4 * i + 1]];
        b.mid = static_cast<std::size_t>(std::llround(static_cast<double>(b.width) * c.ratios[g.decisions[4 * i + 2]]));
        b.groups = c.groups[g.decisions[4 * i + 3]];
        if (b.depth == 0 || b.width == 0 || b.mid == 0 || b.groups == 0 || b.mid % b.groups)
            throw ConfigError("genotype " + g.str() + ": stage " + std::to_string(i) +
                              " bottleneck width " + std::to_string(b.mid) + " not divisible by groups " +
                              std::to_string(b.groups));
        out.push_back(b);
    }
    return out;
}

/// Exact parameter and FLOP counts (FLOPs = 2 * MACs of conv/linear layers).
inline ParamsFlops count_params_flops(const Genotype& g, const SearchSpaceDesc& s,
                                      CountMode mode = CountMode::realized) {
    validate_genotype(g, s);
    if (s.topological()) {
        ParamsFlops c = detail::skeleton_cost(s);
        for (const auto& st : s.stages)
            c += st.cells * detail::cell_cost(g, s, st.channels, st.spatial, mode);
        return c;
    }
    const auto blocks = decode_blocks(g, s);
    ParamsFlops c;
    const std::size_t hw0 = s.stages.at(0).spatial;
    c += cost::conv(s.input_channels, s.stem_channels, 3, hw0) + cost::bn(s.stem_channels, s.bn_affine);
    std::size_t cin = s.stem_channels;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        const std::size_t hw = s.stages[i].spatial;
        for (std::size_t d = 0; d < b.depth; ++d) {
            const std::size_t in = d == 0 ? cin : b.width;
            c += cost::conv(in, b.mid, 1, d == 0 && i > 0 ? hw * 2 : hw) + cost::bn(b.mid, s.bn_affine);
            c += cost::conv(b.mid, b.mid, 3, hw, b.groups) + cost::bn(b.mid, s.bn_affine);
            c += cost::conv(b.mid, b.width, 1, hw) + cost::bn(b.width, s.bn_affine);
            if (d == 0) c += cost::conv(in, b.width, 1, hw) + cost::bn(b.width, s.bn_affine);
        }
        cin = b.width;
    }
    c += cost::linear(cin, s.num_classes);
    return c;
}

/// Every ordered pair (a, b) with a[p] == from_op, b[p] == to_op at one op position p and
/// a == b elsewhere.
inline void for_each_mutation_pair(const SearchSpaceDesc& space, std::size_t from_op, std::size_t to_op,
                                   const std::function<void(const Genotype&, const Genotype&)>& fn) {
    if (from_op == to_op) throw ConfigError("mutation_pairs needs from_op != to_op");
    if (from_op >= space.ops.size() || to_op >= space.ops.size())
        throw ConfigError("mutation_pairs op index out of range");
    const auto positions = space.op_positions();
    for (const auto& g : enumerate(space))
        for (auto p : positions) {
            if (g.decisions[p] != from_op) continue;
            Genotype h = g;
            h.decisions[p] = static_cast<std::uint32_t>(to_op);
            fn(g, h);
        }
}

inline std::vector<std::pair<Genotype, Genotype>> mutation_pairs(const SearchSpaceDesc& space, std::size_t from_op,
                                                                 std::size_t to_op) {
    std::vector<std::pair<Genotype, Genotype>> out;
    for_each_mutation_pair(space, from_op, to_op, [&](const Genotype& a, const Genotype& b) { out.emplace_back(a, b); });
    return out;
}

/// Isomorphism classes of a topological space with a fixed representative per class.
/// A full table is built by enumeration; a lazy table grows by rejection sampling, accepting a
/// draw only if its class is new (it becomes the representative) or it is the representative.
/// Lookups take a shared lock, inserts an exclusive one.
class DeisoTable {
public:
    explicit DeisoTable(SearchSpaceDesc space) : space_(std::move(space)) {
        if (!space_.topological()) throw ConfigError("deiso sampling requires a topological space");
    }

    /// Enumerates the space; the representative of each class is its first member in
    /// lexicographic order.
    void build_full() {
        std::unique_lock lock(mutex_);
        for (const auto& g : enumerate(space_)) insert_locked(canonicalize(g, space_).text, g);
        full_ = true;
    }

    bool full() const { return full_; }

    std::size_t num_classes() const {
        std::shared_lock lock(mutex_);
        return reps_.size();
    }

    const SearchSpaceDesc& space() const { return space_; }

    /// Representative of g's class, registering g as representative if the class is new.
    Genotype representative(const Genotype& g) {
        const auto key = canonicalize(g, space_).text;
        {
            std::shared_lock lock(mutex_);
            if (auto it = index_.find(key); it != index_.end()) return reps_[it->second].second;
        }
        std::unique_lock lock(mutex_);
        return reps_[insert_locked(key, g)].second;
    }

    /// Class keys and representatives in insertion order.
    std::vector<std::pair<std::string, Genotype>> classes() const {
        std::shared_lock lock(mutex_);
        return reps_;
    }

    std::size_t class_index(const Genotype& g) const {
        const auto key = canonicalize(g, space_).text;
        std::shared_lock lock(mutex_);
        auto it = index_.find(key);
        if (it == index_.end()) throw ConfigError("genotype " + g.str() + " is not in the deiso table");
        return it->second;
    }

    template <class Rng>
    Genotype sample(Rng& rng) {
        if (full_) {
            std::shared_lock lock(mutex_);
            std::uniform_int_distribution<std::size_t> pick(0, reps_.size() - 1);
            return reps_[pick(rng)].second;
        }
        const auto card = space_.cardinalities();
        for (;;) {
            Genotype g{space_.id, {}};
            for (auto c : card) g.decisions.push_back(std::uniform_int_distribution<std::uint32_t>(0, static_cast<std::uint32_t>(c - 1))(rng));
            const auto key = canonicalize(g, space_).text;
            std::unique_lock lock(mutex_);
            auto it = index_.find(key);
            if (it == index_.end()) {
                insert_locked(key, g);
                return g;
            }
            if (reps_[it->second].second == g) return g;
        }
    }

private:
    std::size_t insert_locked(const std::string& key, const Genotype& g) {
        auto [it, inserted] = index_.emplace(key, reps_.size());
        if (inserted) reps_.emplace_back(key, g);
        return it->second;
    }

    SearchSpaceDesc space_;
    mutable std::shared_mutex mutex_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::pair<std::string, Genotype>> reps_;
    bool full_ = false;
};

enum class SampleMode { uniform, deiso };

/// Uniform draw over raw genotypes.
template <class Rng>
Genotype sample_uniform(const SearchSpaceDesc& space, Rng& rng) {
    Genotype g{space.id, {}};
    for (auto c : space.cardinalities())
        g.decisions.push_back(std::uniform_int_distribution<std::uint32_t>(0, static_cast<std::uint32_t>(c - 1))(rng));
    return g;
}

/// Uniform mode ignores `table`; deiso mode requires it.
template <class Rng>
Genotype sample(const SearchSpaceDesc& space, Rng& rng, SampleMode mode, DeisoTable* table = nullptr) {
    if (mode == SampleMode::uniform) return sample_uniform(space, rng);
    if (!space.topological()) throw ConfigError("deiso sampling requires a topological space");
    if (!table) throw ConfigError("deiso sampling needs a DeisoTable");
    return table->sample(rng);
}

/// Number of ReLU layers a genotype adds over the fixed skeleton: one per convolution
/// instantiated in the searchable cells.
inline std::size_t cell_relu_count(const Genotype& g, const SearchSpaceDesc& s) {
    validate_genotype(g, s);
    std::size_t per_cell = 0;
    if (s.kind == SpaceKind::op_on_edge) {
        for (std::size_t e = 0; e < s.edges.size(); ++e) per_cell += s.ops[g.decisions[e]].parametric();
    } else if (s.kind == SpaceKind::op_on_node) {
        const std::size_t base = s.node_edge_pairs().size();
        for (std::size_t i = 1; i + 1 < s.num_nodes; ++i) per_cell += s.ops[g.decisions[base + i - 1]].parametric();
    } else {
        std::size_t n = 0;
        for (const auto& b : decode_blocks(g, s)) n += 3 * b.depth;
        return n;
    }
    std::size_t cells = 0;
    for (const auto& st : s.stages) cells += st.cells;
    return per_cell * cells;
}

/// Removes operations from a topological space's vocabulary.
inline SearchSpaceDesc prune_ops(const SearchSpaceDesc& space, const std::vector<std::string>& removed,
                                 const std::string& new_id = "") {
    if (!space.topological()) throw ConfigError("operation pruning needs a topological space");
    SearchSpaceDesc out = space;
    out.ops.clear();
    for (const auto& o : space.ops)
        if (std::find(removed.begin(), removed.end(), o.name) == removed.end()) out.ops.push_back(o);
    for (const auto& r : removed) space.op_index(r);
    if (out.ops.empty()) throw ConfigError("pruning would leave no operation in space '" + space.id + "'");
    if (!removed.empty()) out.id = new_id.empty() ? space.id + "-pruned" : new_id;
    return out;
}

/// Maps a genotype of a pruned space back to the space it was pruned from.
inline Genotype lift_genotype(const Genotype& g, const SearchSpaceDesc& pruned, const SearchSpaceDesc& full) {
    validate_genotype(g, pruned);
    Genotype out{full.id, g.decisions};
    for (auto p : pruned.op_positions()) out.decisions[p] = static_cast<std::uint32_t>(full.op_index(pruned.ops[g.decisions[p]].name));
    return out;
}

}  // namespace nasaudit
