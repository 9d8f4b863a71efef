#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nasaudit/core/optim.hpp"
#include "nasaudit/pareto.hpp"
#include "nasaudit/supernet.hpp"

namespace nasaudit {

enum class SamplerKind { uniform, deiso, fairnas, controller };
enum class ControllerMode { single_evo, pareto_evo };
enum class RewardKind { os_accuracy, os_loss };

inline const char* to_string(SamplerKind k) {
    switch (k) {
        case SamplerKind::uniform: return "uniform";
        case SamplerKind::deiso: return "deiso";
        case SamplerKind::fairnas: return "fairnas";
        case SamplerKind::controller: return "controller";
    }
    return "?";
}

inline SamplerKind sampler_from_string(const std::string& s) {
    if (s == "uniform") return SamplerKind::uniform;
    if (s == "deiso") return SamplerKind::deiso;
    if (s == "fairnas") return SamplerKind::fairnas;
    if (s == "controller") return SamplerKind::controller;
    throw ConfigError("unknown sampler '" + s + "'");
}

inline const char* to_string(ControllerMode m) { return m == ControllerMode::single_evo ? "single_evo" : "pareto_evo"; }

inline ControllerMode controller_mode_from_string(const std::string& s) {
    if (s == "single_evo") return ControllerMode::single_evo;
    if (s == "pareto_evo") return ControllerMode::pareto_evo;
    throw ConfigError("unknown controller mode '" + s + "'");
}

struct TrainConfig {
    std::size_t mc_samples = 1;
    SamplerKind sampler = SamplerKind::uniform;
    std::size_t epochs = 50;
    std::size_t batch_size = 64;
    SgdConfig sgd{};
    double dropout = 0.0;
    double plateau_factor = 0.5;
    int plateau_patience = 30;
    double min_lr = 1e-5;
    std::size_t ensemble_window = 3;
    std::uint64_t seed = 20;
    /// Epochs between checkpoints when a checkpoint directory is set; 0 keeps only the last.
    std::size_t checkpoint_every = 1;
    ControllerMode controller_mode = ControllerMode::single_evo;
    std::size_t population = 100;
    std::size_t controller_period = 1;
    std::size_t warmup_epochs = 0;
    RewardKind reward = RewardKind::os_accuracy;

    void validate(const SearchSpaceDesc& space) const {
        if (mc_samples < 1) throw ConfigError("mc_samples must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(sgd.lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (sampler == SamplerKind::fairnas) {
            if (!space.topological()) throw ConfigError("fairnas sampling needs a topological space");
            if (mc_samples != space.ops.size())
                throw ConfigError("fairnas requires mc_samples == number of operations (" +
                                  std::to_string(space.ops.size()) + ")");
        }
        if (sampler == SamplerKind::deiso && !space.topological())
            throw ConfigError("deiso sampling needs a topological space");
        if (sampler == SamplerKind::controller && (population < 2 || controller_period < 1))
            throw ConfigError("controller needs population >= 2 and period >= 1");
    }
};

struct StepStats {
    double loss = 0.0;
    bool skipped = false;
    double grad_norm = 0.0;
};


/// One supernet update: forward+backward every sampled genotype on the same batch, average
/// the gradients, and take one SGD step over every shared parameter (untouched ones see only
/// weight decay). A non-finite loss skips the whole update.
template <std::floating_point T>
StepStats train_step(const SearchSpaceDesc& space, ParamStore<T>& store, std::map<std::string, std::vector<T>>& momentum,
                     const Batch<T>& batch, const std::vector<Genotype>& sampled, const SgdConfig& sgd,
                     std::mt19937_64& rng, SupernetOptions opts = {}) {
    if (sampled.empty()) throw ConfigError("train_step needs at least one genotype");
    for (auto& [name, p] : store.params) {
        p.requires_grad = true;
        p.grad_buffer();
        p.zero_grad();
    }
    StepStats st;
    double loss = 0.0;
    for (const auto& g : sampled) {
        SubNet<T> net(space, store, g, opts);
        GraphOptions<T> o;
        o.rng = &rng;
        Graph<T> graph(std::move(o));
        auto logits = net.forward(graph, graph.input(batch.x));
        auto l = ops::softmax_cross_entropy(graph, logits, std::span<const int>(batch.y));
        const double v = static_cast<double>(graph.value(l).data[0]);
        if (!std::isfinite(v)) {
            st.skipped = true;
            st.loss = v;
            for (auto& [name, p] : store.params) p.zero_grad();
            return st;
        }
        loss += v;
        graph.backward(l);
    }
    const T inv = T(1) / static_cast<T>(sampled.size());
    std::vector<Tensor<T>*> ps;
    std::vector<std::vector<T>*> bufs;
    for (auto& [name, p] : store.params) {
        for (auto& gv : *p.grad) gv *= inv;
        if (!all_finite(*p.grad)) {
            st.skipped = true;
            st.loss = loss / static_cast<double>(sampled.size());
            for (auto& [n2, q] : store.params) q.zero_grad();
            return st;
        }
        ps.push_back(&p);
        bufs.push_back(&momentum[name]);
    }
    st.grad_norm = sgd_step<T>(ps, bufs, sgd);
    st.loss = loss / static_cast<double>(sampled.size());
    return st;
}

/// FairNAS round: independent permutation of the N operations at every op position; the N
/// column genotypes train each operation exactly once per position. op_on_node adjacency
/// bits are drawn uniformly per genotype.
inline std::vector<Genotype> fairnas_round(const SearchSpaceDesc& space, std::mt19937_64& rng) {
    if (!space.topological()) throw ConfigError("fairnas needs a topological space");
    const auto card = space.cardinalities();
    const auto positions = space.op_positions();
    const std::size_t n = space.ops.size();
    for (auto p : positions)
        if (card[p] != n) throw ConfigError("fairnas needs the same operation count at every position");
    std::vector<Genotype> out(n, Genotype{space.id, std::vector<std::uint32_t>(card.size(), 0)});
    std::vector<std::uint32_t> perm(n);
    for (auto p : positions) {
        std::iota(perm.begin(), perm.end(), 0u);
        std::shuffle(perm.begin(), perm.end(), rng);
        for (std::size_t k = 0; k < n; ++k) out[k].decisions[p] = perm[k];
    }
    if (space.kind == SpaceKind::op_on_node)
        for (auto& g : out)
            for (std::size_t p = 0; p < space.node_edge_pairs().size(); ++p)
                g.decisions[p] = std::uniform_int_distribution<std::uint32_t>(0, 1)(rng);
    return out;
}

/// Top ceil(p*M) genotypes by score (descending, ties by genotype order).
inline std::vector<Genotype> prune_archs(std::vector<std::pair<Genotype, double>> scored, double keep) {
    if (!(keep > 0.0 && keep <= 1.0)) throw ConfigError("keep fraction must be in (0, 1]");
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    const auto n = static_cast<std::size_t>(std::ceil(keep * static_cast<double>(scored.size()) - 1e-9));
    std::vector<Genotype> out;
    for (std::size_t i = 0; i < n && i < scored.size(); ++i) out.push_back(scored[i].first);
    return out;
}

struct ControllerState {
    std::vector<Genotype> population;
    ControllerMode mode = ControllerMode::single_evo;
    std::size_t population_size = 100;
    std::size_t period = 1;
    std::size_t warmup_epochs = 0;
};

/// Candidates for one controller round: the current population plus P new genotypes, 50%
/// random, 25% uniform crossover of two members, 25% single-position mutation. An empty
/// population yields 2P random genotypes.
inline std::vector<Genotype> controller_candidates(const ControllerState& st, const SearchSpaceDesc& space,
                                                   std::mt19937_64& rng) {
    const std::size_t p = st.population_size;
    std::vector<Genotype> out = st.population;
    if (st.population.empty()) {
        for (std::size_t i = 0; i < 2 * p; ++i) out.push_back(sample_uniform(space, rng));
        return out;
    }
    const auto card = space.cardinalities();
    std::uniform_int_distribution<std::size_t> member(0, st.population.size() - 1);
    const std::size_t n_random = p / 2, n_cross = p / 4;
    for (std::size_t i = 0; i < p; ++i) {
        if (i < n_random) {
            out.push_back(sample_uniform(space, rng));
        } else if (i < n_random + n_cross) {
            const auto& a = st.population[member(rng)];
            const auto& b = st.population[member(rng)];
            Genotype c = a;
            std::bernoulli_distribution coin(0.5);
            for (std::size_t k = 0; k < c.size(); ++k)
                if (coin(rng)) c.decisions[k] = b.decisions[k];
            out.push_back(std::move(c));
        } else {
            Genotype c = st.population[member(rng)];
            const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, c.size() - 1)(rng);
            if (card[pos] > 1) {
                auto v = std::uniform_int_distribution<std::uint32_t>(0, static_cast<std::uint32_t>(card[pos] - 2))(rng);
                c.decisions[pos] = v >= c.decisions[pos] ? v + 1 : v;
            }
            out.push_back(std::move(c));
        }
    }
    return out;
}

/// New population from scored candidates. single_evo keeps the P best rewards. pareto_evo fills
/// P from alternating reward-vs-param and reward-vs-inverse-param Pareto levels; a level that
/// does not fit entirely contributes its best rewards.
inline ControllerState controller_update(ControllerState st, const std::vector<Genotype>& candidates,
                                         const std::vector<double>& rewards, const std::vector<double>& complexity) {
    if (rewards.size() != candidates.size() || complexity.size() != candidates.size())
        throw ConfigError("controller_update needs one reward and complexity per candidate");
    const std::size_t p = std::min(st.population_size, candidates.size());
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    auto better = [&](std::size_t a, std::size_t b) {
        if (rewards[a] != rewards[b]) return rewards[a] > rewards[b];
        return candidates[a] < candidates[b];
    };
    std::vector<std::size_t> keep;
    if (st.mode == ControllerMode::single_evo) {
        std::sort(order.begin(), order.end(), better);
        keep.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(p));
    } else {
        std::vector<ParetoPoint> pts;
        for (std::size_t i = 0; i < candidates.size(); ++i) pts.push_back({rewards[i], complexity[i]});
        auto normal = pareto_layers(pts, ParetoDirection::param);
        auto inverse = pareto_layers(pts, ParetoDirection::inverse_param);
        std::vector<bool> chosen(candidates.size(), false);
        for (std::size_t level = 0; keep.size() < p; ++level) {
            for (const auto* layers : {&normal, &inverse}) {
                if (level >= layers->size() || keep.size() >= p) continue;
                std::vector<std::size_t> fresh;
                for (auto i : (*layers)[level])
                    if (!chosen[i]) fresh.push_back(i);
                std::sort(fresh.begin(), fresh.end(), better);
                for (auto i : fresh) {
                    if (keep.size() >= p) break;
                    chosen[i] = true;
                    keep.push_back(i);
                }
            }
            if (level >= normal.size() && level >= inverse.size()) break;
        }
    }
    st.population.clear();
    for (auto i : keep) st.population.push_back(candidates[i]);
    return st;
}

struct EpochLog {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double lr = 0.0;
    std::size_t steps = 0;
    std::size_t skipped = 0;
    std::vector<std::string> sampled;

    nlohmann::json to_json() const {
        return {{"epoch", epoch}, {"mean_loss", mean_loss}, {"lr", lr}, {"steps", steps},
                {"skipped", skipped}, {"sampled", sampled}};
    }
};

/// Single-writer supernet trainer with sampling strategies, plateau LR schedule, temporal
/// checkpoint window and exact resumption.
template <std::floating_point T>
class SupernetTrainer {
public:
    using StepHook = std::function<void(std::size_t step, const std::vector<Genotype>& sampled)>;
    using RewardFn = std::function<std::vector<double>(const std::vector<Genotype>&)>;

    SupernetTrainer(SearchSpaceDesc space, TrainConfig cfg, SupernetOptions opts = {})
        : space_(std::move(space)), cfg_(cfg), opts_(opts), rng_(cfg.seed),
          scheduler_(cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr) {
        cfg_.validate(space_);
        opts_.dropout = cfg_.dropout;
        store_ = make_param_store<T>(space_, cfg_.seed);
        lr_ = cfg_.sgd.lr;
        controller_.mode = cfg_.controller_mode;
        controller_.population_size = cfg_.population;
        controller_.period = cfg_.controller_period;
        controller_.warmup_epochs = cfg_.warmup_epochs;
        if (cfg_.sampler == SamplerKind::deiso) {
            deiso_ = std::make_unique<DeisoTable>(space_);
            if (space_.size() <= kEnumerationGuard) deiso_->build_full();
        }
    }

    const SearchSpaceDesc& space() const { return space_; }
    const TrainConfig& config() const { return cfg_; }
    const SupernetOptions& options() const { return opts_; }
    ParamStore<T>& store() { return store_; }
    std::size_t epoch() const { return epoch_; }
    double lr() const { return lr_; }
    std::size_t skipped_steps() const { return skipped_total_; }
    std::mt19937_64& rng() { return rng_; }
    const ControllerState& controller() const { return controller_; }

    /// Called after every update with the genotypes it trained on.
    void on_step(StepHook hook) { hook_ = std::move(hook); }

    /// Scores controller candidates; required for the controller sampler.
    void set_reward(RewardFn fn) { reward_ = std::move(fn); }

    /// Restricts subsequent sampling to a fixed genotype subset (architecture pruning).
    void restrict_to(std::vector<Genotype> subset) {
        if (subset.empty()) throw ConfigError("restricted genotype set is empty");
        for (const auto& g : subset) validate_genotype(g, space_);
        subset_ = std::move(subset);
    }

    /// Sets the learning rate for the following steps (the plateau schedule continues from it).
    void set_lr(double lr) {
        if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
        lr_ = lr;
    }

    std::vector<Genotype> sample_step() {
        const std::size_t s = cfg_.mc_samples;
        std::vector<Genotype> out;
        if (!subset_.empty()) {
            std::uniform_int_distribution<std::size_t> pick(0, subset_.size() - 1);
            for (std::size_t i = 0; i < s; ++i) out.push_back(subset_[pick(rng_)]);
            return out;
        }
        switch (cfg_.sampler) {
            case SamplerKind::uniform:
                for (std::size_t i = 0; i < s; ++i) out.push_back(sample_uniform(space_, rng_));
                break;
            case SamplerKind::deiso:
                for (std::size_t i = 0; i < s; ++i) out.push_back(deiso_->sample(rng_));
                break;
            case SamplerKind::fairnas: out = fairnas_round(space_, rng_); break;
            case SamplerKind::controller:
                if (controller_.population.empty() || epoch_ < controller_.warmup_epochs) {
                    for (std::size_t i = 0; i < s; ++i) out.push_back(sample_uniform(space_, rng_));
                } else {
                    std::uniform_int_distribution<std::size_t> pick(0, controller_.population.size() - 1);
                    for (std::size_t i = 0; i < s; ++i) out.push_back(controller_.population[pick(rng_)]);
                }
                break;
        }
        return out;
    }

    /// Trains one epoch over `batches`; the plateau schedule sees the epoch's mean loss.
    EpochLog run_epoch(const std::vector<Batch<T>>& batches) {
        EpochLog log;
        log.epoch = epoch_ + 1;
        double loss = 0.0;
        SgdConfig sgd = cfg_.sgd;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            auto sampled = sample_step();
            sgd.lr = lr_;
            auto st = train_step(space_, store_, momentum_, batches[b], sampled, sgd, rng_, opts_);
            ++log.steps;
            for (const auto& g : sampled) log.sampled.push_back(g.str());
            if (st.skipped) {
                ++log.skipped;
                ++skipped_total_;
            } else {
                loss += st.loss;
            }
            if (hook_) hook_(b, sampled);
        }
        const std::size_t good = log.steps - log.skipped;
        log.mean_loss = good ? loss / static_cast<double>(good) : std::numeric_limits<double>::quiet_NaN();
        if (good) lr_ = scheduler_.step(log.mean_loss, lr_);
        log.lr = lr_;
        ++epoch_;
        if (cfg_.sampler == SamplerKind::controller && epoch_ >= controller_.warmup_epochs &&
            (epoch_ - controller_.warmup_epochs) % controller_.period == 0)
            controller_round();
        window_.push_back(store_);
        while (window_.size() > std::max<std::size_t>(cfg_.ensemble_window, 1)) window_.pop_front();
        return log;
    }

    /// Mean of the last `ensemble_window` end-of-epoch stores.
    ParamStore<T> ensemble() const {
        std::vector<const ParamStore<T>*> ptrs;
        for (const auto& s : window_) ptrs.push_back(&s);
        return temporal_ensemble(ptrs);
    }

    void controller_round() {
        if (!reward_) throw ConfigError("controller sampler needs a reward function");
        auto cand = controller_candidates(controller_, space_, rng_);
        auto rewards = reward_(cand);
        std::vector<double> complexity;
        for (const auto& g : cand) complexity.push_back(static_cast<double>(count_params_flops(g, space_).params));
        controller_ = controller_update(controller_, cand, rewards, complexity);
    }

    /// Writes `<dir>/epoch_<n>.ckpt` and `<dir>/manifest.json` (atomic).
    void save(const std::filesystem::path& dir, const std::string& config_hash = "") const {
        auto map = store_.to_map();
        for (const auto& [k, v] : momentum_) map.emplace("momentum/" + k, Tensor<T>({v.size()}, v));
        const std::string file = "epoch_" + std::to_string(epoch_) + ".ckpt";
        save_checkpoint(dir / file, map);
        std::ostringstream rs;
        rs << rng_;
        nlohmann::json m;
        m["epoch"] = epoch_;
        m["checkpoint"] = file;
        m["config_hash"] = config_hash;
        m["rng_state"] = rs.str();
        m["lr"] = lr_;
        m["plateau_best"] = std::isfinite(scheduler_.best()) ? nlohmann::json(scheduler_.best()) : nlohmann::json(nullptr);
        m["plateau_bad_epochs"] = scheduler_.bad_epochs();
        m["skipped_steps"] = skipped_total_;
        std::vector<std::string> pop, sub;
        for (const auto& g : controller_.population) pop.push_back(g.str());
        for (const auto& g : subset_) sub.push_back(g.str());
        m["controller_population"] = pop;
        m["restricted_subset"] = sub;
        atomic_write(dir / "manifest.json", m.dump(2) + "\n");
    }

    /// Restores the state written by save(); returns false when no manifest exists.
    bool load(const std::filesystem::path& dir, const std::string& expected_hash = "") {
        if (!std::filesystem::exists(dir / "manifest.json")) return false;
        auto m = nlohmann::json::parse(read_file(dir / "manifest.json"));
        if (!expected_hash.empty() && m.value("config_hash", "") != expected_hash)
            throw ConfigError("checkpoint in " + dir.string() + " was written by a different configuration");
        auto map = load_checkpoint<T>(dir / m.at("checkpoint").get<std::string>());
        store_ = ParamStore<T>::from_map(map);
        momentum_.clear();
        for (const auto& [k, v] : map)
            if (k.rfind("momentum/", 0) == 0) momentum_[k.substr(9)] = v.data;
        epoch_ = m.at("epoch").get<std::size_t>();
        std::istringstream rs(m.at("rng_state").get<std::string>());
        rs >> rng_;
        lr_ = m.at("lr").get<double>();
        const double best = m.at("plateau_best").is_null() ? std::numeric_limits<double>::infinity()
                                                            : m.at("plateau_best").get<double>();
        scheduler_.restore(best, m.at("plateau_bad_epochs").get<int>());
        skipped_total_ = m.at("skipped_steps").get<std::size_t>();
        controller_.population.clear();
        for (const auto& s : m.at("controller_population")) controller_.population.push_back(Genotype::parse(s));
        subset_.clear();
        for (const auto& s : m.at("restricted_subset")) subset_.push_back(Genotype::parse(s));
        window_.clear();
        window_.push_back(store_);
        return true;
    }

private:
    SearchSpaceDesc space_;
    TrainConfig cfg_;
    SupernetOptions opts_;
    std::mt19937_64 rng_;
    PlateauScheduler scheduler_;
    ParamStore<T> store_;
    std::map<std::string, std::vector<T>> momentum_;
    double lr_ = 0.0;
    std::size_t epoch_ = 0;
    std::size_t skipped_total_ = 0;
    std::unique_ptr<DeisoTable> deiso_;
    ControllerState controller_;
    std::vector<Genotype> subset_;
    std::deque<ParamStore<T>> window_;
    StepHook hook_;
    RewardFn reward_;
};

}  // namespace nasaudit
