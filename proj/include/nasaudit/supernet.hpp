#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "nasaudit/core/checkpoint.hpp"
#include "nasaudit/core/layers.hpp"
#include "nasaudit/core/network.hpp"
#include "nasaudit/search_space.hpp"

namespace nasaudit {

enum class ChannelPick { l1, ordinal };

inline const char* to_string(ChannelPick p) { return p == ChannelPick::l1 ? "l1" : "ordinal"; }

/// Shared parameters and buffers of a supernet, addressed by name. Names encode
/// (stage, cell, position, operation), so two genotypes that agree on a decision resolve to the
/// same tensors. Non-topological spaces hold maximal-size tensors that sub-networks slice.
template <std::floating_point T>
struct ParamStore {
    std::map<std::string, Tensor<T>> params;
    std::map<std::string, Tensor<T>> buffers;

    Tensor<T>& param(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw ConfigError("parameter store has no tensor '" + name + "'");
        return it->second;
    }
    Tensor<T>& buffer(const std::string& name) {
        auto it = buffers.find(name);
        if (it == buffers.end()) throw ConfigError("parameter store has no buffer '" + name + "'");
        return it->second;
    }
    bool has_param(const std::string& name) const { return params.count(name) != 0; }

    std::size_t num_parameters() const {
        std::size_t n = 0;
        for (const auto& [k, v] : params) n += v.size();
        return n;
    }

    template <std::floating_point U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [k, v] : params) {
            out.params.emplace(k, v.template cast<U>());
            out.params.at(k).requires_grad = true;
        }
        for (const auto& [k, v] : buffers) out.buffers.emplace(k, v.template cast<U>());
        return out;
    }

    /// Flat checkpoint view: "param/<name>" and "buffer/<name>".
    TensorMap<T> to_map() const {
        TensorMap<T> m;
        for (const auto& [k, v] : params) m.emplace("param/" + k, Tensor<T>(v.shape, v.data));
        for (const auto& [k, v] : buffers) m.emplace("buffer/" + k, Tensor<T>(v.shape, v.data));
        return m;
    }

    static ParamStore from_map(const TensorMap<T>& m) {
        ParamStore s;
        for (const auto& [k, v] : m) {
            if (k.rfind("param/", 0) == 0) {
                auto& t = s.params.emplace(k.substr(6), Tensor<T>(v.shape, v.data)).first->second;
                t.requires_grad = true;
            } else if (k.rfind("buffer/", 0) == 0) {
                s.buffers.emplace(k.substr(7), Tensor<T>(v.shape, v.data));
            }
        }
        return s;
    }
};

struct SupernetOptions {
    /// Channel picking for non-topological widths; forced to ordinal where groups vary.
    ChannelPick pick = ChannelPick::l1;
    double dropout = 0.0;
};

namespace detail {

inline std::string cell_prefix(std::size_t stage, std::size_t cell) {
    return "s" + std::to_string(stage) + ".c" + std::to_string(cell) + ".";
}

template <std::floating_point T>
void add_conv(ParamStore<T>& s, const std::string& name, std::size_t out, std::size_t in_per_group,
              std::size_t k, std::mt19937_64& rng) {
    Tensor<T> w({out, in_per_group, k, k});
    kaiming_uniform(w, in_per_group * k * k, rng);
    w.requires_grad = true;
    s.params.emplace(name + ".weight", std::move(w));
}

template <std::floating_point T>
void add_bn(ParamStore<T>& s, const std::string& name, std::size_t c, bool affine) {
    if (affine) {
        s.params.emplace(name + ".gamma", Tensor<T>({c}, T(1)));
        s.params.emplace(name + ".beta", Tensor<T>({c}, T(0)));
        s.params.at(name + ".gamma").requires_grad = true;
        s.params.at(name + ".beta").requires_grad = true;
    }
    s.buffers.emplace(name + ".running_mean", Tensor<T>({c}, T(0)));
    s.buffers.emplace(name + ".running_var", Tensor<T>({c}, T(1)));
}

template <std::floating_point T>
void add_linear(ParamStore<T>& s, const std::string& name, std::size_t in, std::size_t out,
                std::mt19937_64& rng) {
    Tensor<T> w({out, in}), b({out});
    kaiming_uniform(w, in, rng);
    kaiming_uniform(b, in, rng, 1.0);
    w.requires_grad = b.requires_grad = true;
    s.params.emplace(name + ".weight", std::move(w));
    s.params.emplace(name + ".bias", std::move(b));
}

inline void validate_geometry(const SearchSpaceDesc& space) {
    space.validate();
    if (!space.topological()) return;
    for (std::size_t i = 1; i < space.stages.size(); ++i)
        if (space.stages[i].spatial * 2 != space.stages[i - 1].spatial)
            throw ConfigError("stage " + std::to_string(i) + " spatial size must halve the previous stage");
}

/// Per-stage maxima of a non-topological space.
struct BlockStageMax {
    std::size_t depth, width, mid, stored_groups, in_channels;
    bool vary_groups;
};

inline std::vector<BlockStageMax> block_maxima(const SearchSpaceDesc& space) {
    std::vector<BlockStageMax> out;
    std::size_t cin = space.stem_channels;
    for (const auto& c : space.block_stages) {
        BlockStageMax m{};
        m.depth = *std::max_element(c.depths.begin(), c.depths.end());
        m.width = *std::max_element(c.widths.begin(), c.widths.end());
        m.mid = 0;
        for (auto w : c.widths)
            for (auto r : c.ratios)
                m.mid = std::max(m.mid, static_cast<std::size_t>(std::llround(static_cast<double>(w) * r)));
        m.stored_groups = gcd_of(c.groups);
        m.vary_groups = std::any_of(c.groups.begin(), c.groups.end(), [](std::size_t g) { return g > 1; });
        m.in_channels = cin;
        if (m.mid % m.stored_groups)
            throw ConfigError("maximal bottleneck width " + std::to_string(m.mid) +
                              " not divisible by stored groups " + std::to_string(m.stored_groups));
        out.push_back(m);
        cin = m.width;
    }
    return out;
}

}  // namespace detail

/// Builds the shared parameter store of a space (every operation at every position).
template <std::floating_point T>
ParamStore<T> make_param_store(const SearchSpaceDesc& space, std::uint64_t seed) {
    detail::validate_geometry(space);
    std::mt19937_64 rng(seed);
    ParamStore<T> s;
    const bool affine = space.bn_affine;
    if (space.topological()) {
        const auto& st = space.stages;
        detail::add_conv(s, "stem.conv", st[0].channels, space.input_channels, 3, rng);
        detail::add_bn(s, "stem.bn", st[0].channels, affine);
        for (std::size_t si = 0; si < st.size(); ++si) {
            const std::size_t c = st[si].channels;
            if (si > 0) {
                const std::string p = "r" + std::to_string(si) + ".";
                const std::size_t cin = st[si - 1].channels;
                detail::add_conv(s, p + "a.conv", c, cin, 3, rng);
                detail::add_bn(s, p + "a.bn", c, affine);
                detail::add_conv(s, p + "b.conv", c, c, 3, rng);
                detail::add_bn(s, p + "b.bn", c, affine);
                detail::add_conv(s, p + "short.conv", c, cin, 1, rng);
            }
            for (std::size_t ci = 0; ci < st[si].cells; ++ci) {
                const std::string cp = detail::cell_prefix(si, ci);
                auto add_op = [&](const std::string& where, const OpTemplate& op) {
                    if (!op.parametric()) return;
                    const std::string n = cp + where + "." + op.name;
                    detail::add_conv(s, n + ".conv", c, c, op.kernel, rng);
                    detail::add_bn(s, n + ".bn", c, affine);
                };
                if (space.kind == SpaceKind::op_on_edge) {
                    for (std::size_t e = 0; e < space.edges.size(); ++e)
                        for (const auto& op : space.ops) add_op("e" + std::to_string(e), op);
                } else {
                    for (std::size_t i = 1; i + 1 < space.num_nodes; ++i)
                        for (const auto& op : space.ops) add_op("n" + std::to_string(i), op);
                }
            }
        }
        detail::add_bn(s, "head.bn", st.back().channels, affine);
        detail::add_linear(s, "head.fc", st.back().channels, space.num_classes, rng);
        return s;
    }
    const auto maxima = detail::block_maxima(space);
    detail::add_conv(s, "stem.conv", space.stem_channels, space.input_channels, 3, rng);
    detail::add_bn(s, "stem.bn", space.stem_channels, affine);
    for (std::size_t si = 0; si < maxima.size(); ++si) {
        const auto& m = maxima[si];
        for (std::size_t d = 0; d < m.depth; ++d) {
            const std::string p = "s" + std::to_string(si) + ".b" + std::to_string(d) + ".";
            const std::size_t in = d == 0 ? m.in_channels : m.width;
            detail::add_conv(s, p + "conv1", m.mid, in, 1, rng);
            detail::add_bn(s, p + "bn1", m.mid, affine);
            detail::add_conv(s, p + "conv2", m.mid, m.mid / m.stored_groups, 3, rng);
            detail::add_bn(s, p + "bn2", m.mid, affine);
            detail::add_conv(s, p + "conv3", m.width, m.mid, 1, rng);
            detail::add_bn(s, p + "bn3", m.width, affine);
            if (d == 0) {
                detail::add_conv(s, p + "proj", m.width, in, 1, rng);
                detail::add_bn(s, p + "proj_bn", m.width, affine);
            }
        }
    }
    detail::add_linear(s, "head.fc", maxima.back().width, space.num_classes, rng);
    return s;
}

/// Output channels of a [O, I, k, k] kernel ranked by L1 norm (descending, ties by index);
/// the first `count` are returned in ascending index order.
template <std::floating_point T>
std::vector<std::size_t> pick_channels(const Tensor<T>& kernel, std::size_t count, ChannelPick rule) {
    const std::size_t out = kernel.dim(0);
    if (count > out) throw ConfigError("cannot pick " + std::to_string(count) + " of " + std::to_string(out) + " channels");
    std::vector<std::size_t> idx(out);
    std::iota(idx.begin(), idx.end(), 0);
    if (rule == ChannelPick::l1) {
        const std::size_t per = kernel.size() / out;
        std::vector<double> norm(out, 0.0);
        for (std::size_t o = 0; o < out; ++o)
            for (std::size_t j = 0; j < per; ++j) norm[o] += std::abs(static_cast<double>(kernel.data[o * per + j]));
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return norm[a] > norm[b]; });
    }
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Stored input-channel offset (within the stored kernel row) read by output channel i of a
/// grouped conv with `groups` actual groups over `out` outputs and `in` inputs, where the
/// store holds `stored_groups` groups.
inline std::size_t group_input_offset(std::size_t i, std::size_t out, std::size_t in, std::size_t groups,
                                      std::size_t stored_groups) {
    if (groups % stored_groups) throw ConfigError("actual groups must be a multiple of stored groups");
    return ((i * groups / out) % (groups / stored_groups)) * (in / groups);
}

/// One architecture realized on a parameter store.
template <std::floating_point T>
class SubNet final : public Network<T> {
public:
    using Id = typename Graph<T>::Id;

    SubNet(const SearchSpaceDesc& space, ParamStore<T>& store, Genotype g, SupernetOptions opts = {})
        : space_(space), store_(&store), genotype_(std::move(g)), opts_(opts) {
        validate_genotype(genotype_, space_);
        if (!space_.topological()) blocks_ = decode_blocks(genotype_, space_);
    }

    SubNet(const SearchSpaceDesc& space, std::shared_ptr<ParamStore<T>> owned, Genotype g, SupernetOptions opts = {})
        : SubNet(space, *owned, std::move(g), opts) {
        owned_ = std::move(owned);
    }

    const Genotype& genotype() const { return genotype_; }
    ParamStore<T>& store() { return *store_; }

    Id forward(Graph<T>& g, Id x) override {
        const Id out = space_.topological() ? forward_topological(g, x) : forward_blocks(g, x);
        g.set_layer(-1);
        return out;
    }

    std::vector<NamedTensor<T>> parameters() override {
        std::vector<NamedTensor<T>> out;
        for (const auto& name : parameter_names()) out.push_back({name, &store_->param(name)});
        return out;
    }

    std::vector<NamedTensor<T>> buffers() override {
        std::vector<NamedTensor<T>> out;
        for (const auto& name : parameter_names(true)) out.push_back({name, &store_->buffer(name)});
        return out;
    }

    std::size_t relu_layers() const override {
        if (!space_.topological()) return 1 + cell_relu_count(genotype_, space_);
        return 2 * (space_.stages.size() - 1) + 1 + cell_relu_count(genotype_, space_);
    }

    std::unique_ptr<Network<long double>> widen() const override {
        auto wide = std::make_shared<ParamStore<long double>>(store_->template cast<long double>());
        return std::make_unique<SubNet<long double>>(space_, std::move(wide), genotype_, opts_);
    }

    /// Names of the store tensors this genotype reads (parameters, or buffers when `buffers`).
    std::vector<std::string> parameter_names(bool buffers = false) const {
        std::vector<std::string> names;
        auto bn = [&](const std::string& n) {
            if (buffers) {
                names.push_back(n + ".running_mean");
                names.push_back(n + ".running_var");
            } else if (space_.bn_affine) {
                names.push_back(n + ".gamma");
                names.push_back(n + ".beta");
            }
        };
        auto conv = [&](const std::string& n) {
            if (!buffers) names.push_back(n + ".weight");
        };
        auto fc = [&](const std::string& n) {
            if (!buffers) {
                names.push_back(n + ".weight");
                names.push_back(n + ".bias");
            }
        };
        conv("stem.conv");
        bn("stem.bn");
        if (space_.topological()) {
            for (std::size_t si = 0; si < space_.stages.size(); ++si) {
                if (si > 0) {
                    const std::string p = "r" + std::to_string(si) + ".";
                    conv(p + "a.conv");
                    bn(p + "a.bn");
                    conv(p + "b.conv");
                    bn(p + "b.bn");
                    conv(p + "short.conv");
                }
                for (std::size_t ci = 0; ci < space_.stages[si].cells; ++ci)
                    for (const auto& [where, op] : chosen_ops()) {
                        if (!op->parametric()) continue;
                        const std::string n = detail::cell_prefix(si, ci) + where + "." + op->name;
                        conv(n + ".conv");
                        bn(n + ".bn");
                    }
            }
            bn("head.bn");
            fc("head.fc");
        } else {
            for (std::size_t si = 0; si < blocks_.size(); ++si)
                for (std::size_t d = 0; d < blocks_[si].depth; ++d) {
                    const std::string p = "s" + std::to_string(si) + ".b" + std::to_string(d) + ".";
                    conv(p + "conv1");
                    bn(p + "bn1");
                    conv(p + "conv2");
                    bn(p + "bn2");
                    conv(p + "conv3");
                    bn(p + "bn3");
                    if (d == 0) {
                        conv(p + "proj");
                        bn(p + "proj_bn");
                    }
                }
            fc("head.fc");
        }
        return names;
    }

    /// Channel indices (into the store's maximal tensors) used by each non-topological stage:
    /// {stage output channels, bottleneck channels}.
    std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> block_channels() const {
        if (space_.topological()) throw ConfigError("block_channels needs a non-topological space");
        const auto maxima = detail::block_maxima(space_);
        std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> out;
        for (std::size_t si = 0; si < blocks_.size(); ++si) {
            const auto& b = blocks_[si];
            const std::string p = "s" + std::to_string(si) + ".b0.";
            const ChannelPick rule = maxima[si].vary_groups ? ChannelPick::ordinal : opts_.pick;
            auto width = pick_channels(store_->param(p + "proj.weight"), b.width, opts_.pick);
            auto mid = pick_channels(store_->param(p + "conv1.weight"), b.mid, rule);
            out.emplace_back(std::move(width), std::move(mid));
        }
        return out;
    }

private:
    std::vector<std::pair<std::string, const OpTemplate*>> chosen_ops() const {
        std::vector<std::pair<std::string, const OpTemplate*>> out;
        if (space_.kind == SpaceKind::op_on_edge) {
            for (std::size_t e = 0; e < space_.edges.size(); ++e)
                out.emplace_back("e" + std::to_string(e), &space_.ops[genotype_.decisions[e]]);
        } else {
            const std::size_t base = space_.node_edge_pairs().size();
            for (std::size_t i = 1; i + 1 < space_.num_nodes; ++i)
                out.emplace_back("n" + std::to_string(i), &space_.ops[genotype_.decisions[base + i - 1]]);
        }
        return out;
    }

    Id param(Graph<T>& g, const std::string& name) { return g.parameter(store_->param(name)); }

    std::optional<Id> opt_param(Graph<T>& g, const std::string& name) {
        if (!store_->has_param(name)) return std::nullopt;
        return param(g, name);
    }

    Id bn(Graph<T>& g, Id x, const std::string& name, std::vector<std::size_t> channels = {}) {
        ops::BatchNormBuffers<T> buf;
        buf.running_mean = &store_->buffer(name + ".running_mean");
        buf.running_var = &store_->buffer(name + ".running_var");
        std::optional<Id> gamma, beta;
        if (space_.bn_affine) {
            gamma = param(g, name + ".gamma");
            beta = param(g, name + ".beta");
            if (!channels.empty()) {
                const std::size_t c = channels.size();
                gamma = ops::gather(g, *gamma, channels, Shape{c});
                beta = ops::gather(g, *beta, channels, Shape{c});
            }
        }
        buf.channels = std::move(channels);
        return ops::batch_norm(g, x, gamma, beta, std::move(buf));
    }

    Id conv(Graph<T>& g, Id x, const std::string& name, std::size_t stride, std::size_t pad) {
        return ops::conv2d(g, x, param(g, name + ".weight"), {stride, pad, 1});
    }

    Id zeros_like(Graph<T>& g, Id x) { return g.constant(Tensor<T>(g.shape(x), T(0))); }

    Id apply_op(Graph<T>& g, Id x, const OpTemplate& op, const std::string& name, bool node_style) {
        switch (op.kind) {
            case OpKind::none: return zeros_like(g, x);
            case OpKind::skip_connect: return x;
            case OpKind::avg_pool: return ops::avg_pool2d(g, x, 3, 1, 1);
            case OpKind::max_pool: return ops::max_pool2d(g, x, 3, 1, 1);
            case OpKind::conv:
                if (node_style) {
                    auto y = conv(g, x, name + ".conv", 1, op.kernel / 2);
                    return ops::relu(g, bn(g, y, name + ".bn"));
                } else {
                    auto y = conv(g, ops::relu(g, x), name + ".conv", 1, op.kernel / 2);
                    return bn(g, y, name + ".bn");
                }
        }
        return x;
    }

    Id forward_topological(Graph<T>& g, Id x) {
        int layer = 0;
        g.set_layer(layer++);
        x = bn(g, conv(g, x, "stem.conv", 1, 1), "stem.bn");
        const auto ops_chosen = chosen_ops();
        for (std::size_t si = 0; si < space_.stages.size(); ++si) {
            if (si > 0) {
                g.set_layer(layer++);
                const std::string p = "r" + std::to_string(si) + ".";
                auto a = bn(g, conv(g, ops::relu(g, x), p + "a.conv", 2, 1), p + "a.bn");
                auto b = bn(g, conv(g, ops::relu(g, a), p + "b.conv", 1, 1), p + "b.bn");
                auto sc = conv(g, ops::avg_pool2d(g, x, 2, 2, 0), p + "short.conv", 1, 0);
                x = ops::add(g, b, sc);
            }
            for (std::size_t ci = 0; ci < space_.stages[si].cells; ++ci) {
                g.set_layer(layer++);
                const std::string cp = detail::cell_prefix(si, ci);
                std::vector<Id> node(space_.num_nodes);
                node[0] = x;
                if (space_.kind == SpaceKind::op_on_edge) {
                    for (std::size_t i = 1; i < space_.num_nodes; ++i) {
                        std::vector<Id> terms;
                        for (std::size_t e = 0; e < space_.edges.size(); ++e) {
                            auto [from, to] = space_.edges[e];
                            if (to != i) continue;
                            const auto& op = *ops_chosen[e].second;
                            if (op.kind == OpKind::none) continue;
                            terms.push_back(apply_op(g, node[from], op, cp + ops_chosen[e].first + "." + op.name, false));
                        }
                        node[i] = terms.empty() ? zeros_like(g, x) : ops::add_n(g, terms);
                    }
                } else {
                    const auto pairs = space_.node_edge_pairs();
                    for (std::size_t i = 1; i < space_.num_nodes; ++i) {
                        std::vector<Id> terms;
                        for (std::size_t e = 0; e < pairs.size(); ++e)
                            if (pairs[e].second == i && genotype_.decisions[e]) terms.push_back(node[pairs[e].first]);
                        Id in = terms.empty() ? zeros_like(g, x) : ops::add_n(g, terms);
                        if (i + 1 == space_.num_nodes) node[i] = in;
                        else {
                            const auto& op = *ops_chosen[i - 1].second;
                            node[i] = apply_op(g, in, op, cp + ops_chosen[i - 1].first + "." + op.name, true);
                        }
                    }
                }
                x = node.back();
            }
        }
        g.set_layer(layer);
        x = ops::relu(g, bn(g, x, "head.bn"));
        x = ops::global_avg_pool(g, x);
        x = ops::dropout(g, x, opts_.dropout);
        return ops::linear(g, x, param(g, "head.fc.weight"), param(g, "head.fc.bias"));
    }

    /// Gathers kernel[out_idx, in_idx, :, :] into a dense [|out|, |in|, k, k] tensor.
    Id slice_kernel(Graph<T>& g, const std::string& name, const std::vector<std::size_t>& out_idx,
                    const std::vector<std::vector<std::size_t>>& in_idx_per_out) {
        const Tensor<T>& w = store_->param(name);
        const std::size_t in_stored = w.dim(1), kk = w.dim(2) * w.dim(3);
        const std::size_t in_sel = in_idx_per_out.front().size();
        bool identity = out_idx.size() == w.dim(0) && in_sel == in_stored;
        for (std::size_t o = 0; identity && o < out_idx.size(); ++o) {
            identity = out_idx[o] == o;
            for (std::size_t i = 0; identity && i < in_sel; ++i) identity = in_idx_per_out[o][i] == i;
        }
        Id full = param(g, name);
        if (identity) return full;
        std::vector<std::size_t> idx;
        idx.reserve(out_idx.size() * in_sel * kk);
        for (std::size_t o = 0; o < out_idx.size(); ++o)
            for (std::size_t i : in_idx_per_out[o])
                for (std::size_t k = 0; k < kk; ++k) idx.push_back((out_idx[o] * in_stored + i) * kk + k);
        return ops::gather(g, full, std::move(idx), Shape{out_idx.size(), in_sel, w.dim(2), w.dim(3)});
    }

    Id dense_slice(Graph<T>& g, const std::string& name, const std::vector<std::size_t>& out_idx,
                   const std::vector<std::size_t>& in_idx) {
        return slice_kernel(g, name, out_idx, std::vector<std::vector<std::size_t>>(out_idx.size(), in_idx));
    }

    Id forward_blocks(Graph<T>& g, Id x) {
        const auto maxima = detail::block_maxima(space_);
        const auto channels = block_channels();
        int layer = 0;
        g.set_layer(layer++);
        x = ops::relu(g, bn(g, conv(g, x, "stem.conv", 1, 1), "stem.bn"));
        std::vector<std::size_t> in_ch(space_.stem_channels);
        std::iota(in_ch.begin(), in_ch.end(), 0);
        for (std::size_t si = 0; si < blocks_.size(); ++si) {
            const auto& b = blocks_[si];
            const auto& m = maxima[si];
            const auto& [out_ch, mid_ch] = channels[si];
            for (std::size_t d = 0; d < b.depth; ++d) {
                g.set_layer(layer++);
                const std::string p = "s" + std::to_string(si) + ".b" + std::to_string(d) + ".";
                const std::size_t stride = (d == 0 && si > 0) ? 2 : 1;
                const auto& cur_in = d == 0 ? in_ch : out_ch;
                auto h = ops::conv2d(g, x, dense_slice(g, p + "conv1.weight", mid_ch, cur_in), {1, 0, 1});
                h = ops::relu(g, bn(g, h, p + "bn1", mid_ch));
                // Grouped 3x3: stored with m.stored_groups groups over m.mid channels.
                const std::size_t groups = b.groups;
                if (b.mid % groups) throw ConfigError("bottleneck width not divisible by groups");
                const std::size_t in_per_group = b.mid / groups;
                std::vector<std::vector<std::size_t>> in_rows(b.mid);
                for (std::size_t o = 0; o < b.mid; ++o) {
                    const std::size_t off = group_input_offset(o, b.mid, b.mid, groups, m.stored_groups);
                    if (off + in_per_group > m.mid / m.stored_groups)
                        throw ConfigError("group slice exceeds the stored kernel");
                    for (std::size_t i = 0; i < in_per_group; ++i) in_rows[o].push_back(off + i);
                }
                auto w2 = slice_kernel(g, p + "conv2.weight", mid_ch, in_rows);
                h = ops::conv2d(g, h, w2, {stride, 1, groups});
                h = ops::relu(g, bn(g, h, p + "bn2", mid_ch));
                h = ops::conv2d(g, h, dense_slice(g, p + "conv3.weight", out_ch, mid_ch), {1, 0, 1});
                h = bn(g, h, p + "bn3", out_ch);
                Id sc = x;
                if (d == 0) {
                    sc = ops::conv2d(g, x, dense_slice(g, p + "proj.weight", out_ch, cur_in), {stride, 0, 1});
                    sc = bn(g, sc, p + "proj_bn", out_ch);
                }
                x = ops::relu(g, ops::add(g, h, sc));
            }
            in_ch = out_ch;
        }
        g.set_layer(layer);
        x = ops::global_avg_pool(g, x);
        x = ops::dropout(g, x, opts_.dropout);
        const auto& fw = store_->param("head.fc.weight");
        Id w = param(g, "head.fc.weight");
        if (in_ch.size() != fw.dim(1)) {
            std::vector<std::size_t> idx;
            for (std::size_t o = 0; o < fw.dim(0); ++o)
                for (auto c : in_ch) idx.push_back(o * fw.dim(1) + c);
            w = ops::gather(g, w, std::move(idx), Shape{fw.dim(0), in_ch.size()});
        }
        return ops::linear(g, x, w, param(g, "head.fc.bias"));
    }

    SearchSpaceDesc space_;
    ParamStore<T>* store_;
    std::shared_ptr<ParamStore<T>> owned_;
    Genotype genotype_;
    SupernetOptions opts_;
    std::vector<BlockStage> blocks_;
};

/// A freshly initialized standalone network for one genotype.
template <std::floating_point T>
SubNet<T> make_standalone(const SearchSpaceDesc& space, const Genotype& g, std::uint64_t seed,
                          SupernetOptions opts = {}) {
    return SubNet<T>(space, std::make_shared<ParamStore<T>>(make_param_store<T>(space, seed)), g, opts);
}

enum class EvalBnMode {
    /// Batch statistics (running buffers untouched); usual for shared-weight evaluation.
    batch,
    /// Running buffers accumulated during training.
    running,
};

struct EvalResult {
    double accuracy = 0.0;
    double loss = 0.0;
    std::size_t examples = 0;
};

/// Accuracy and mean cross-entropy over `batches`, both example-weighted.
template <std::floating_point T>
EvalResult evaluate(Network<T>& net, const std::vector<Batch<T>>& batches, EvalBnMode bn = EvalBnMode::batch) {
    if (batches.empty()) throw ConfigError("evaluate needs at least one validation batch");
    EvalResult r;
    double correct = 0.0, loss = 0.0;
    for (const auto& b : batches) {
        GraphOptions<T> o;
        o.mode = bn == EvalBnMode::batch ? Mode::train : Mode::eval;
        o.update_running_stats = false;
        o.dropout = false;
        Graph<T> g(std::move(o));
        auto logits = net.forward(g, g.input(b.x));
        auto l = ops::softmax_cross_entropy(g, logits, std::span<const int>(b.y));
        const auto& lv = g.value(logits).data;
        const std::size_t n = b.size(), k = lv.size() / n;
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = lv.begin() + static_cast<std::ptrdiff_t>(i * k);
            const auto pred = static_cast<int>(std::max_element(row, row + static_cast<std::ptrdiff_t>(k)) - row);
            correct += pred == b.y[i];
        }
        loss += static_cast<double>(g.value(l).data[0]) * static_cast<double>(n);
        r.examples += n;
    }
    r.accuracy = correct / static_cast<double>(r.examples);
    r.loss = loss / static_cast<double>(r.examples);
    return r;
}

template <std::floating_point T>
EvalResult evaluate(const SearchSpaceDesc& space, ParamStore<T>& store, const Genotype& g,
                    const std::vector<Batch<T>>& batches, EvalBnMode bn = EvalBnMode::batch,
                    SupernetOptions opts = {}) {
    SubNet<T> net(space, store, g, opts);
    return evaluate(net, batches, bn);
}

/// Replaces each genotype's score with the mean over its canonical class members present in
/// `scores` (post-deiso averaging).
inline std::map<Genotype, double> average_by_class(const SearchSpaceDesc& space,
                                                   const std::map<Genotype, double>& scores) {
    std::unordered_map<std::string, std::pair<double, std::size_t>> acc;
    for (const auto& [g, s] : scores) {
        auto& a = acc[canonicalize(g, space).text];
        a.first += s;
        a.second += 1;
    }
    std::map<Genotype, double> out;
    for (const auto& [g, s] : scores) {
        const auto& a = acc.at(canonicalize(g, space).text);
        out.emplace(g, a.first / static_cast<double>(a.second));
    }
    return out;
}

/// Elementwise mean of parameters and buffers over checkpoints with identical layouts.
template <std::floating_point T>
ParamStore<T> temporal_ensemble(const std::vector<const ParamStore<T>*>& checkpoints) {
    if (checkpoints.empty()) throw ConfigError("temporal_ensemble needs at least one checkpoint");
    auto average = [&](auto member) {
        std::map<std::string, Tensor<T>> out;
        const auto& first = checkpoints.front()->*member;
        for (const auto& [name, t] : first) {
            std::vector<const Tensor<T>*> src;
            for (const auto* c : checkpoints) {
                const auto& m = c->*member;
                auto it = m.find(name);
                if (it == m.end() || it->second.shape != t.shape)
                    throw ConfigError("temporal_ensemble: checkpoint layouts differ at '" + name + "'");
                src.push_back(&it->second);
            }
            // Sorted values, mean taken as min + mean offset: independent of checkpoint order and
            // exact for identical copies and for +x/-x pairs.
            Tensor<T> avg(t.shape);
            std::vector<long double> v(src.size());
            for (std::size_t i = 0; i < t.size(); ++i) {
                for (std::size_t c = 0; c < src.size(); ++c) v[c] = static_cast<long double>(src[c]->data[i]);
                std::sort(v.begin(), v.end());
                long double off = 0.0L;
                for (std::size_t c = 1; c < v.size(); ++c) off += v[c] - v[0];
                avg.data[i] = static_cast<T>(v[0] + off / static_cast<long double>(v.size()));
            }
            avg.requires_grad = t.requires_grad;
            out.emplace(name, std::move(avg));
        }
        for (const auto* c : checkpoints)
            if ((c->*member).size() != first.size())
                throw ConfigError("temporal_ensemble: checkpoints hold different tensor sets");
        return out;
    };
    ParamStore<T> out;
    out.params = average(&ParamStore<T>::params);
    out.buffers = average(&ParamStore<T>::buffers);
    return out;
}

}  // namespace nasaudit
