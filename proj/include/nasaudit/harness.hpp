#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "nasaudit/criteria.hpp"
#include "nasaudit/data.hpp"
#include "nasaudit/diagnostics.hpp"
#include "nasaudit/report.hpp"
#include "nasaudit/search_space.hpp"
#include "nasaudit/supernet.hpp"
#include "nasaudit/training.hpp"
#include "nasaudit/zero_shot.hpp"

namespace nasaudit {

using ojson = nlohmann::ordered_json;

inline constexpr const char* kOutputRootEnv = "NASAUDIT_OUTPUT_ROOT";
inline constexpr std::size_t kOracleGuard = 500;

// ---------------------------------------------------------------------------------------------
// Search space <-> JSON

inline ojson space_to_json(const SearchSpaceDesc& s) {
    ojson j;
    j["id"] = s.id;
    j["kind"] = to_string(s.kind);
    j["num_nodes"] = s.num_nodes;
    ojson edges = ojson::array();
    for (auto [a, b] : s.edges) edges.push_back({a, b});
    j["edges"] = edges;
    ojson ops = ojson::array();
    for (const auto& o : s.ops) ops.push_back(o.name);
    j["ops"] = ops;
    ojson stages = ojson::array();
    for (const auto& g : s.stages) stages.push_back({{"channels", g.channels}, {"spatial", g.spatial}, {"cells", g.cells}});
    j["stages"] = stages;
    ojson blocks = ojson::array();
    for (const auto& b : s.block_stages)
        blocks.push_back({{"depths", b.depths}, {"widths", b.widths}, {"ratios", b.ratios}, {"groups", b.groups}});
    j["block_stages"] = blocks;
    j["stem_channels"] = s.stem_channels;
    j["input_channels"] = s.input_channels;
    j["num_classes"] = s.num_classes;
    j["bn_affine"] = s.bn_affine;
    return j;
}

inline SpaceKind space_kind_from_string(const std::string& k) {
    if (k == "op_on_edge") return SpaceKind::op_on_edge;
    if (k == "op_on_node") return SpaceKind::op_on_node;
    if (k == "non_topological") return SpaceKind::non_topological;
    throw ConfigError("unknown space kind '" + k + "'");
}

/// Accepts the full form written by space_to_json, or {"preset": ...} with optional overrides.
inline SearchSpaceDesc space_from_json(const ojson& j) {
    SearchSpaceDesc s;
    if (j.contains("preset")) {
        const auto p = j.at("preset").get<std::string>();
        if (p == "nb201_like") s = nb201_like();
        else if (p == "nb101_like") s = nb101_like();
        else if (p == "resnet_like") s = resnet_like({BlockStageChoices{}, BlockStageChoices{}});
        else throw ConfigError("unknown space preset '" + p + "'");
    } else {
        s.kind = space_kind_from_string(j.at("kind").get<std::string>());
    }
    if (j.contains("id")) s.id = j.at("id").get<std::string>();
    if (j.contains("kind")) s.kind = space_kind_from_string(j.at("kind").get<std::string>());
    if (j.contains("num_nodes")) s.num_nodes = j.at("num_nodes").get<std::size_t>();
    if (j.contains("edges")) {
        s.edges.clear();
        for (const auto& e : j.at("edges")) s.edges.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>());
    } else if (!j.contains("preset") && s.kind == SpaceKind::op_on_edge) {
        for (std::size_t to = 1; to < s.num_nodes; ++to)
            for (std::size_t from = 0; from < to; ++from) s.edges.emplace_back(from, to);
    }
    if (j.contains("ops")) {
        s.ops.clear();
        for (const auto& o : j.at("ops")) s.ops.push_back(OpTemplate::parse(o.get<std::string>()));
    }
    if (j.contains("stages")) {
        s.stages.clear();
        for (const auto& g : j.at("stages"))
            s.stages.push_back({g.at("channels").get<std::size_t>(), g.at("spatial").get<std::size_t>(),
                                g.at("cells").get<std::size_t>()});
    }
    if (j.contains("block_stages")) {
        s.block_stages.clear();
        for (const auto& b : j.at("block_stages"))
            s.block_stages.push_back({b.at("depths").get<std::vector<std::size_t>>(),
                                      b.at("widths").get<std::vector<std::size_t>>(),
                                      b.at("ratios").get<std::vector<double>>(),
                                      b.at("groups").get<std::vector<std::size_t>>()});
    }
    if (j.contains("stem_channels")) s.stem_channels = j.at("stem_channels").get<std::size_t>();
    if (j.contains("input_channels")) s.input_channels = j.at("input_channels").get<std::size_t>();
    if (j.contains("num_classes")) s.num_classes = j.at("num_classes").get<std::size_t>();
    if (j.contains("bn_affine")) s.bn_affine = j.at("bn_affine").get<bool>();
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------------------------
// Configuration

enum class SubsetMode { all, sample, representatives, list };

struct SubsetSpec {
    SubsetMode mode = SubsetMode::sample;
    std::size_t count = 50;
    std::uint64_t seed = 0;
    std::vector<std::string> genotypes;
};

struct StandaloneConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    SgdConfig sgd{};
    /// Cosine decay of the learning rate to zero over the epochs.
    bool cosine = true;
};

struct SupernetStageConfig {
    TrainConfig train{};
    /// Epochs after which every subset genotype is evaluated with shared weights.
    std::vector<std::size_t> eval_epochs;
    std::size_t eval_batches = 2;
    EvalBnMode bn = EvalBnMode::batch;
    /// Evaluate the temporal ensemble of the last `ensemble_window` epochs instead of the live weights.
    bool use_ensemble = false;
};

struct DiagnosticsConfig {
    bool ranking_difference = true;
    bool complexity_bias = true;
    ComplexityKey complexity_key = ComplexityKey::flops;
    std::size_t groups = 5;
    bool mutation = true;
    std::size_t pareto_levels = 3;
    bool forgetting = false;
    std::size_t forgetting_probes = 64;
    bool gradient_similarity = false;
    std::vector<std::size_t> gradient_similarity_epochs;
    std::size_t gradient_similarity_pairs = 32;
};

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> s{"oracle", "supernet", "zero_shot", "criteria", "diagnostics"};
    return s;
}

inline const std::vector<std::string>& one_shot_names() {
    static const std::vector<std::string> s{"os_acc", "os_loss"};
    return s;
}

struct ExperimentConfig {
    std::string name = "experiment";
    SearchSpaceDesc space = nb201_like({{16, 16, 1}, {32, 8, 1}, {64, 4, 1}});
    DatasetSpec dataset{};
    SubsetSpec subset{};
    StandaloneConfig oracle{};
    SupernetStageConfig supernet{};
    ZseConfig zero_shot{};
    std::vector<std::string> vote_experts{"synflow", "jacob_cov", "snip"};
    std::vector<std::string> estimators{"os_acc", "params", "flops"};
    std::vector<double> criteria_ks = default_ks();
    DiagnosticsConfig diagnostics{};
    std::vector<std::string> stages = stage_names();
    std::string output_dir;
    std::vector<std::uint64_t> seeds{20, 2020, 202020};
    std::size_t threads = 1;

    bool has_stage(const std::string& s) const { return std::find(stages.begin(), stages.end(), s) != stages.end(); }

    static bool is_one_shot(const std::string& e) {
        return std::find(one_shot_names().begin(), one_shot_names().end(), e) != one_shot_names().end();
    }
    static bool is_baseline(const std::string& e) {
        return std::find(baseline_names().begin(), baseline_names().end(), e) != baseline_names().end();
    }
    static bool is_zero_shot(const std::string& e) {
        return e == "vote" || std::find(zse_names().begin(), zse_names().end(), e) != zse_names().end();
    }

    void validate() const {
        space.validate();
        dataset.validate();
        if (seeds.empty()) throw ConfigError("at least one seed is required");
        if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
            throw ConfigError("seeds must be distinct");
        if (threads == 0) throw ConfigError("threads must be >= 1");
        for (const auto& s : stages)
            if (std::find(stage_names().begin(), stage_names().end(), s) == stage_names().end())
                throw ConfigError("unknown stage '" + s + "'");
        for (const auto& e : estimators)
            if (!is_one_shot(e) && !is_baseline(e) && !is_zero_shot(e))
                throw ConfigError("unknown estimator '" + e + "'");
        if (std::find(estimators.begin(), estimators.end(), "vote") != estimators.end()) {
            if (vote_experts.size() < 3 || vote_experts.size() % 2 == 0)
                throw ConfigError("vote needs an odd number (>= 3) of experts");
            for (const auto& e : vote_experts)
                if (std::find(zse_names().begin(), zse_names().end(), e) == zse_names().end())
                    throw ConfigError("vote expert '" + e + "' is not a zero-shot estimator");
        }
        for (double k : criteria_ks) topk_count(k, 1);
        if (oracle.epochs == 0 || oracle.batch_size == 0) throw ConfigError("oracle needs epochs and batch size >= 1");
        if (!(oracle.sgd.lr > 0.0)) throw ConfigError("oracle learning rate must be positive");
        supernet.train.validate(space);
        for (auto e : supernet.eval_epochs)
            if (e == 0 || e > supernet.train.epochs) throw ConfigError("eval epochs must be in [1, epochs]");
        if (supernet.eval_batches == 0) throw ConfigError("eval_batches must be >= 1");
        if (diagnostics.groups == 0 || diagnostics.pareto_levels == 0)
            throw ConfigError("diagnostics need groups and pareto levels >= 1");
        if (space.num_classes != (dataset.source == DataSource::synthetic ? dataset.classes : 10))
            throw ConfigError("space num_classes does not match the dataset");
        const std::size_t res = dataset.source == DataSource::synthetic ? dataset.resolution : 32;
        const std::size_t ch = dataset.source == DataSource::synthetic ? dataset.channels : 3;
        if (space.input_channels != ch) throw ConfigError("space input_channels does not match the dataset");
        if (space.stages.empty() || space.stages.front().spatial != res)
            throw ConfigError("first stage spatial size does not match the dataset resolution");
    }

    /// Epochs evaluated by the supernet stage (configured list, or 1 and the last).
    std::vector<std::size_t> supernet_eval_epochs() const {
        std::set<std::size_t> e(supernet.eval_epochs.begin(), supernet.eval_epochs.end());
        if (e.empty()) {
            e.insert(1);
            e.insert(supernet.train.epochs);
        }
        return {e.begin(), e.end()};
    }
};

namespace detail {

inline ojson sgd_to_json(const SgdConfig& s) {
    return {{"lr", s.lr}, {"momentum", s.momentum}, {"weight_decay", s.weight_decay}, {"grad_clip", s.grad_clip}};
}

inline SgdConfig sgd_from_json(const ojson& j, SgdConfig d = {}) {
    d.lr = j.value("lr", d.lr);
    d.momentum = j.value("momentum", d.momentum);
    d.weight_decay = j.value("weight_decay", d.weight_decay);
    d.grad_clip = j.value("grad_clip", d.grad_clip);
    return d;
}

inline const char* subset_mode_name(SubsetMode m) {
    switch (m) {
        case SubsetMode::all: return "all";
        case SubsetMode::sample: return "sample";
        case SubsetMode::representatives: return "representatives";
        case SubsetMode::list: return "list";
    }
    return "?";
}

inline SubsetMode subset_mode_from_string(const std::string& s) {
    if (s == "all") return SubsetMode::all;
    if (s == "sample") return SubsetMode::sample;
    if (s == "representatives") return SubsetMode::representatives;
    if (s == "list") return SubsetMode::list;
    throw ConfigError("unknown subset mode '" + s + "'");
}

inline const char* bn_mode_name(Mode m) { return m == Mode::train ? "train" : "eval"; }

inline Mode bn_mode_from_string(const std::string& s) {
    if (s == "train") return Mode::train;
    if (s == "eval") return Mode::eval;
    throw ConfigError("unknown batch-norm mode '" + s + "'");
}

inline const char* eval_bn_name(EvalBnMode m) { return m == EvalBnMode::batch ? "batch" : "running"; }

inline EvalBnMode eval_bn_from_string(const std::string& s) {
    if (s == "batch") return EvalBnMode::batch;
    if (s == "running") return EvalBnMode::running;
    throw ConfigError("unknown evaluation batch-norm mode '" + s + "'");
}

inline const char* reward_name(RewardKind r) { return r == RewardKind::os_accuracy ? "os_accuracy" : "os_loss"; }

inline RewardKind reward_from_string(const std::string& s) {
    if (s == "os_accuracy") return RewardKind::os_accuracy;
    if (s == "os_loss") return RewardKind::os_loss;
    throw ConfigError("unknown reward '" + s + "'");
}

}  // namespace detail

inline ojson config_to_json(const ExperimentConfig& c) {
    ojson j;
    j["name"] = c.name;
    j["space"] = space_to_json(c.space);
    ojson ds;
    to_json(ds, c.dataset);
    j["dataset"] = ds;
    j["subset"] = {{"mode", detail::subset_mode_name(c.subset.mode)},
                   {"count", c.subset.count},
                   {"seed", c.subset.seed},
                   {"genotypes", c.subset.genotypes}};
    j["oracle"] = {{"epochs", c.oracle.epochs},
                   {"batch_size", c.oracle.batch_size},
                   {"sgd", detail::sgd_to_json(c.oracle.sgd)},
                   {"cosine", c.oracle.cosine}};
    const auto& t = c.supernet.train;
    j["supernet"] = {{"mc_samples", t.mc_samples},
                     {"sampler", to_string(t.sampler)},
                     {"epochs", t.epochs},
                     {"batch_size", t.batch_size},
                     {"sgd", detail::sgd_to_json(t.sgd)},
                     {"dropout", t.dropout},
                     {"plateau_factor", t.plateau_factor},
                     {"plateau_patience", t.plateau_patience},
                     {"min_lr", t.min_lr},
                     {"ensemble_window", t.ensemble_window},
                     {"checkpoint_every", t.checkpoint_every},
                     {"controller_mode", to_string(t.controller_mode)},
                     {"population", t.population},
                     {"controller_period", t.controller_period},
                     {"warmup_epochs", t.warmup_epochs},
                     {"reward", detail::reward_name(t.reward)},
                     {"eval_epochs", c.supernet.eval_epochs},
                     {"eval_batches", c.supernet.eval_batches},
                     {"eval_bn", detail::eval_bn_name(c.supernet.bn)},
                     {"use_ensemble", c.supernet.use_ensemble}};
    const auto& z = c.zero_shot;
    j["zero_shot"] = {{"n_batches", z.n_batches},
                      {"batch_size", z.batch_size},
                      {"source", to_string(z.source)},
                      {"jacob_k", z.jacob_k},
                      {"jacob_functional", z.jacob_functional == JacobianFunctional::sum_logits ? "sum_logits" : "target_logit"},
                      {"grasp_eps", z.grasp_eps},
                      {"bn_mode", detail::bn_mode_name(z.bn_mode)},
                      {"relu_logdet_variant", z.relu_logdet_variant == ReluLogdetVariant::logdet ? "logdet" : "log_frobenius"},
                      {"vote_experts", c.vote_experts}};
    j["estimators"] = c.estimators;
    j["criteria_ks"] = c.criteria_ks;
    const auto& d = c.diagnostics;
    j["diagnostics"] = {{"ranking_difference", d.ranking_difference},
                        {"complexity_bias", d.complexity_bias},
                        {"complexity_key", to_string(d.complexity_key)},
                        {"groups", d.groups},
                        {"mutation", d.mutation},
                        {"pareto_levels", d.pareto_levels},
                        {"forgetting", d.forgetting},
                        {"forgetting_probes", d.forgetting_probes},
                        {"gradient_similarity", d.gradient_similarity},
                        {"gradient_similarity_epochs", d.gradient_similarity_epochs},
                        {"gradient_similarity_pairs", d.gradient_similarity_pairs}};
    j["stages"] = c.stages;
    j["output_dir"] = c.output_dir;
    j["seeds"] = c.seeds;
    j["threads"] = c.threads;
    return j;
}

/// Missing keys keep their defaults; unknown top-level keys are rejected.
inline ExperimentConfig config_from_json(const ojson& j) {
    static const std::set<std::string> known{"name",   "space",       "dataset",     "subset",  "oracle",
                                             "supernet", "zero_shot", "estimators",  "criteria_ks",
                                             "diagnostics", "stages", "output_dir", "seeds",   "threads"};
    if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw ConfigError("unknown configuration key '" + k + "'");
    ExperimentConfig c;
    try {
        c.name = j.value("name", c.name);
        if (j.contains("space")) c.space = space_from_json(j.at("space"));
        if (j.contains("dataset")) from_json(j.at("dataset"), c.dataset);
        if (j.contains("subset")) {
            const auto& s = j.at("subset");
            c.subset.mode = detail::subset_mode_from_string(s.value("mode", std::string("all")));
            c.subset.count = s.value("count", c.subset.count);
            c.subset.seed = s.value("seed", c.subset.seed);
            c.subset.genotypes = s.value("genotypes", c.subset.genotypes);
        }
        if (j.contains("oracle")) {
            const auto& o = j.at("oracle");
            c.oracle.epochs = o.value("epochs", c.oracle.epochs);
            c.oracle.batch_size = o.value("batch_size", c.oracle.batch_size);
            if (o.contains("sgd")) c.oracle.sgd = detail::sgd_from_json(o.at("sgd"));
            c.oracle.cosine = o.value("cosine", c.oracle.cosine);
        }
        if (j.contains("supernet")) {
            const auto& s = j.at("supernet");
            auto& t = c.supernet.train;
            t.mc_samples = s.value("mc_samples", t.mc_samples);
            if (s.contains("sampler")) t.sampler = sampler_from_string(s.at("sampler").get<std::string>());
            t.epochs = s.value("epochs", t.epochs);
            t.batch_size = s.value("batch_size", t.batch_size);
            if (s.contains("sgd")) t.sgd = detail::sgd_from_json(s.at("sgd"));
            t.dropout = s.value("dropout", t.dropout);
            t.plateau_factor = s.value("plateau_factor", t.plateau_factor);
            t.plateau_patience = s.value("plateau_patience", t.plateau_patience);
            t.min_lr = s.value("min_lr", t.min_lr);
            t.ensemble_window = s.value("ensemble_window", t.ensemble_window);
            t.checkpoint_every = s.value("checkpoint_every", t.checkpoint_every);
            if (s.contains("controller_mode"))
                t.controller_mode = controller_mode_from_string(s.at("controller_mode").get<std::string>());
            t.population = s.value("population", t.population);
            t.controller_period = s.value("controller_period", t.controller_period);
            t.warmup_epochs = s.value("warmup_epochs", t.warmup_epochs);
            if (s.contains("reward")) t.reward = detail::reward_from_string(s.at("reward").get<std::string>());
            c.supernet.eval_epochs = s.value("eval_epochs", c.supernet.eval_epochs);
            c.supernet.eval_batches = s.value("eval_batches", c.supernet.eval_batches);
            if (s.contains("eval_bn")) c.supernet.bn = detail::eval_bn_from_string(s.at("eval_bn").get<std::string>());
            c.supernet.use_ensemble = s.value("use_ensemble", c.supernet.use_ensemble);
        }
        if (j.contains("zero_shot")) {
            const auto& z = j.at("zero_shot");
            auto& zc = c.zero_shot;
            zc.n_batches = z.value("n_batches", zc.n_batches);
            zc.batch_size = z.value("batch_size", zc.batch_size);
            if (z.contains("source")) zc.source = input_source_from_string(z.at("source").get<std::string>());
            zc.jacob_k = z.value("jacob_k", zc.jacob_k);
            if (z.contains("jacob_functional")) {
                const auto f = z.at("jacob_functional").get<std::string>();
                if (f != "sum_logits" && f != "target_logit") throw ConfigError("unknown jacobian functional '" + f + "'");
                zc.jacob_functional = f == "sum_logits" ? JacobianFunctional::sum_logits : JacobianFunctional::target_logit;
            }
            zc.grasp_eps = z.value("grasp_eps", zc.grasp_eps);
            if (z.contains("bn_mode")) zc.bn_mode = detail::bn_mode_from_string(z.at("bn_mode").get<std::string>());
            if (z.contains("relu_logdet_variant")) {
                const auto v = z.at("relu_logdet_variant").get<std::string>();
                if (v != "logdet" && v != "log_frobenius") throw ConfigError("unknown relu_logdet variant '" + v + "'");
                zc.relu_logdet_variant = v == "logdet" ? ReluLogdetVariant::logdet : ReluLogdetVariant::log_frobenius;
            }
            c.vote_experts = z.value("vote_experts", c.vote_experts);
        }
        c.estimators = j.value("estimators", c.estimators);
        c.criteria_ks = j.value("criteria_ks", c.criteria_ks);
        if (j.contains("diagnostics")) {
            const auto& d = j.at("diagnostics");
            auto& dc = c.diagnostics;
            dc.ranking_difference = d.value("ranking_difference", dc.ranking_difference);
            dc.complexity_bias = d.value("complexity_bias", dc.complexity_bias);
            if (d.contains("complexity_key"))
                dc.complexity_key = complexity_key_from_string(d.at("complexity_key").get<std::string>());
            dc.groups = d.value("groups", dc.groups);
            dc.mutation = d.value("mutation", dc.mutation);
            dc.pareto_levels = d.value("pareto_levels", dc.pareto_levels);
            dc.forgetting = d.value("forgetting", dc.forgetting);
            dc.forgetting_probes = d.value("forgetting_probes", dc.forgetting_probes);
            dc.gradient_similarity = d.value("gradient_similarity", dc.gradient_similarity);
            dc.gradient_similarity_epochs = d.value("gradient_similarity_epochs", dc.gradient_similarity_epochs);
            dc.gradient_similarity_pairs = d.value("gradient_similarity_pairs", dc.gradient_similarity_pairs);
        }
        c.stages = j.value("stages", c.stages);
        c.output_dir = j.value("output_dir", c.output_dir);
        c.seeds = j.value("seeds", c.seeds);
        c.threads = j.value("threads", c.threads);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed configuration: ") + e.what());
    }
    c.validate();
    return c;
}

/// Canonical text form; parse(to_text(c)) re-serializes to the same bytes.
inline std::string config_to_text(const ExperimentConfig& c) { return config_to_json(c).dump(2) + "\n"; }

inline ExperimentConfig config_from_text(const std::string& text) {
    ojson j;
    try {
        j = ojson::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("configuration file not found: " + path.string());
    return config_from_text(read_file(path));
}

inline std::string hash_json(const ojson& j) { return sha1_hex(j.dump()); }

/// Hash of everything that affects results (output directory and thread count excluded).
inline std::string config_hash(const ExperimentConfig& c) {
    auto j = config_to_json(c);
    j.erase("output_dir");
    j.erase("threads");
    return hash_json(j);
}

inline std::string oracle_hash(const ExperimentConfig& c) {
    const auto j = config_to_json(c);
    return hash_json({{"space", j["space"]}, {"dataset", j["dataset"]}, {"subset", j["subset"]},
                      {"oracle", j["oracle"]}, {"seeds", j["seeds"]}});
}

inline std::string supernet_hash(const ExperimentConfig& c, std::uint64_t seed) {
    const auto j = config_to_json(c);
    return hash_json({{"space", j["space"]}, {"dataset", j["dataset"]}, {"subset", j["subset"]},
                      {"supernet", j["supernet"]}, {"diagnostics", j["diagnostics"]}, {"seed", seed}});
}

inline std::string zero_shot_hash(const ExperimentConfig& c, std::uint64_t seed) {
    const auto j = config_to_json(c);
    return hash_json({{"space", j["space"]}, {"dataset", j["dataset"]}, {"subset", j["subset"]},
                      {"zero_shot", j["zero_shot"]}, {"estimators", j["estimators"]}, {"seed", seed}});
}

/// CLI flag, then the config, then the environment variable, then ./nasaudit-out.
inline std::filesystem::path resolve_output_dir(const ExperimentConfig& c, const std::string& cli_override = "") {
    if (!cli_override.empty()) return cli_override;
    if (!c.output_dir.empty()) return c.output_dir;
    if (const char* env = std::getenv(kOutputRootEnv); env && *env) return std::filesystem::path(env) / c.name;
    return std::filesystem::path("nasaudit-out") / c.name;
}

// ---------------------------------------------------------------------------------------------
// Worker pool

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first failure.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (std::size_t i; !failed && (i = next++) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(mu);
                    if (!error) error = std::current_exception();
                    failed = true;
                }
            }
        });
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------------------------
// Genotype subsets

inline std::vector<Genotype> select_subset(const SearchSpaceDesc& space, const SubsetSpec& spec) {
    std::vector<Genotype> out;
    switch (spec.mode) {
        case SubsetMode::all: out = enumerate_all(space); break;
        case SubsetMode::sample: {
            if (spec.count == 0) throw ConfigError("subset sample needs count >= 1");
            std::mt19937_64 rng(spec.seed);
            out = sample_probes(space, spec.count, rng);
            break;
        }
        case SubsetMode::representatives: {
            // live classes only
            DeisoTable table(space);
            table.build_full();
            for (const auto& [key, rep] : table.classes())
                if (!canonicalize(rep, space).dead) out.push_back(rep);
            if (spec.count && spec.count < out.size()) {
                std::mt19937_64 rng(spec.seed);
                std::shuffle(out.begin(), out.end(), rng);
                out.resize(spec.count);
            }
            break;
        }
        case SubsetMode::list:
            for (const auto& s : spec.genotypes) {
                auto g = Genotype::parse(s);
                validate_genotype(g, space);
                out.push_back(std::move(g));
            }
            break;
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    if (out.empty()) throw ConfigError("genotype subset is empty");
    return out;
}

// ---------------------------------------------------------------------------------------------
// Ground-truth oracle

struct OracleEntry {
    std::string genotype;
    std::vector<double> accuracy;  // per seed; NaN where training diverged
    double mean = std::numeric_limits<double>::quiet_NaN();
    bool diverged = false;
    std::string config_hash;
};

struct GroundTruthOracle {
    std::vector<std::uint64_t> seeds;
    std::vector<OracleEntry> entries;
    std::size_t diverged = 0;

    /// Mean accuracy of every non-diverged genotype.
    std::map<std::string, double> table() const {
        std::map<std::string, double> m;
        for (const auto& e : entries)
            if (!e.diverged) m.emplace(e.genotype, e.mean);
        return m;
    }
};

/// Trains a fresh network for `g` and returns its validation accuracy (running BN statistics);
/// NaN when any step produced a non-finite loss.
inline double train_standalone(const SearchSpaceDesc& space, const Genotype& g, const Dataset& data,
                               const StandaloneConfig& cfg, std::uint64_t seed, std::size_t* steps = nullptr) {
    auto store = make_param_store<float>(space, seed);
    std::map<std::string, std::vector<float>> momentum;
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    SgdConfig sgd = cfg.sgd;
    const auto valid = make_batches<float>(data.valid, cfg.batch_size, 0, false);
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        if (cfg.cosine)
            sgd.lr = cfg.sgd.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(e) / static_cast<double>(cfg.epochs)));
        for (const auto& b : make_batches<float>(data.train, cfg.batch_size, seed * 1000003ULL + e)) {
            auto st = train_step(space, store, momentum, b, {g}, sgd, rng);
            if (steps) ++*steps;
            if (st.skipped) return std::numeric_limits<double>::quiet_NaN();
        }
    }
    return evaluate(space, store, g, valid, EvalBnMode::running).accuracy;
}

inline GroundTruthOracle train_oracle(const SearchSpaceDesc& space, const std::vector<Genotype>& subset,
                                      const Dataset& data, const StandaloneConfig& cfg,
                                      const std::vector<std::uint64_t>& seeds, const std::string& hash = "",
                                      std::size_t threads = 1, std::atomic<std::size_t>* steps = nullptr) {
    if (subset.empty()) throw ConfigError("oracle subset is empty");
    if (subset.size() > kOracleGuard)
        throw ConfigError("oracle subset has " + std::to_string(subset.size()) + " genotypes; the limit is " +
                          std::to_string(kOracleGuard));
    if (seeds.empty()) throw ConfigError("oracle needs at least one seed");
    GroundTruthOracle o;
    o.seeds = seeds;
    o.entries.resize(subset.size());
    std::vector<double> acc(subset.size() * seeds.size());
    parallel_for(acc.size(), threads, [&](std::size_t k) {
        std::size_t local = 0;
        acc[k] = train_standalone(space, subset[k / seeds.size()], data, cfg, seeds[k % seeds.size()], &local);
        if (steps) *steps += local;
    });
    for (std::size_t i = 0; i < subset.size(); ++i) {
        auto& e = o.entries[i];
        e.genotype = subset[i].str();
        e.config_hash = hash;
        double sum = 0;
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            const double a = acc[i * seeds.size() + s];
            e.accuracy.push_back(a);
            if (std::isnan(a)) e.diverged = true;
            sum += a;
        }
        if (e.diverged) ++o.diverged;
        else e.mean = sum / static_cast<double>(seeds.size());
    }
    return o;
}

inline Table oracle_to_table(const GroundTruthOracle& o) {
    Table t{report_schemas().at("oracle"), {}};
    for (const auto& e : o.entries)
        for (std::size_t s = 0; s < o.seeds.size(); ++s)
            t.add({e.genotype, std::to_string(o.seeds[s]), format_double(e.accuracy[s]),
                   std::isnan(e.accuracy[s]) ? "diverged" : "ok", e.config_hash});
    return t;
}

inline GroundTruthOracle oracle_from_table(const Table& t) {
    GroundTruthOracle o;
    std::map<std::string, std::size_t> at;
    std::set<std::uint64_t> seen_seeds;
    for (const auto& r : t.rows) {
        const auto seed = std::stoull(r[1]);
        if (seen_seeds.insert(seed).second) o.seeds.push_back(seed);
        auto [it, fresh] = at.emplace(r[0], o.entries.size());
        if (fresh) o.entries.push_back({r[0], {}, 0.0, false, r[4]});
        auto& e = o.entries[it->second];
        e.accuracy.push_back(parse_double(r[2]));
        if (r[3] != "ok") e.diverged = true;
    }
    for (auto& e : o.entries) {
        if (e.diverged) {
            ++o.diverged;
            e.mean = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        double sum = 0;
        for (double a : e.accuracy) sum += a;
        e.mean = sum / static_cast<double>(e.accuracy.size());
    }
    return o;
}

// ---------------------------------------------------------------------------------------------
// Scores

/// One estimator's scores per genotype at one epoch (0 for estimators without training).
struct EstimatorScores {
    std::string estimator;
    std::uint64_t seed = 0;
    std::size_t epoch = 0;
    std::map<std::string, double> values;
};

inline void append_scores(Table& t, const EstimatorScores& s) {
    for (const auto& [g, v] : s.values)
        t.add({g, s.estimator, std::to_string(s.seed), std::to_string(s.epoch), format_double(v)});
}

inline std::vector<EstimatorScores> scores_from_table(const Table& t) {
    std::map<std::tuple<std::string, std::uint64_t, std::size_t>, EstimatorScores> by;
    for (const auto& r : t.rows) {
        const auto key = std::make_tuple(r[1], std::stoull(r[2]), static_cast<std::size_t>(std::stoull(r[3])));
        auto& s = by[key];
        s.estimator = r[1];
        s.seed = std::get<1>(key);
        s.epoch = std::get<2>(key);
        s.values[r[0]] = parse_double(r[4]);
    }
    std::vector<EstimatorScores> out;
    for (auto& [k, v] : by) out.push_back(std::move(v));
    return out;
}

/// Joins estimator scores with oracle means over the genotypes both cover. OS loss is negated
/// so that higher is better for every estimator.
inline ScoreTable join_scores(const std::map<std::string, double>& gt, const EstimatorScores& s) {
    ScoreTable t;
    const double sign = s.estimator == "os_loss" ? -1.0 : 1.0;
    for (const auto& [g, y] : gt) {
        auto it = s.values.find(g);
        if (it != s.values.end()) t.add(g, y, sign * it->second);
    }
    return t;
}

/// Zero-shot and baseline scores of every subset genotype for one initialization seed.
template <std::floating_point T = double>
std::vector<EstimatorScores> score_zero_shot(const SearchSpaceDesc& space, const std::vector<Genotype>& subset,
                                             const std::vector<std::string>& estimators, const ZseConfig& base,
                                             const std::vector<std::string>& vote_experts,
                                             const std::vector<Batch<T>>& batches, std::uint64_t seed,
                                             std::size_t threads = 1) {
    std::vector<std::string> zse;
    for (const auto& e : estimators)
        if (std::find(zse_names().begin(), zse_names().end(), e) != zse_names().end()) zse.push_back(e);
    const bool want_vote = std::find(estimators.begin(), estimators.end(), "vote") != estimators.end();
    if (want_vote)
        for (const auto& e : vote_experts)
            if (std::find(zse.begin(), zse.end(), e) == zse.end()) zse.push_back(e);
    std::vector<std::vector<double>> values(zse.size(), std::vector<double>(subset.size()));
    parallel_for(subset.size(), threads, [&](std::size_t i) {
        for (std::size_t k = 0; k < zse.size(); ++k) {
            auto net = make_standalone<T>(space, subset[i], seed);
            ZseConfig cfg = base;
            cfg.estimator = zse[k];
            cfg.seed = seed;
            values[k][i] = score_zse(cfg, net, batches, subset[i].str()).value;
        }
    });
    std::vector<EstimatorScores> out;
    for (const auto& e : estimators) {
        EstimatorScores s{e, seed, 0, {}};
        if (ExperimentConfig::is_baseline(e)) {
            for (const auto& g : subset) s.values[g.str()] = baseline_value(baselines(g, space), e);
        } else if (e == "vote") {
            std::vector<std::vector<double>> experts;
            for (const auto& x : vote_experts)
                experts.push_back(values[static_cast<std::size_t>(std::find(zse.begin(), zse.end(), x) - zse.begin())]);
            const auto r = vote(experts);
            for (std::size_t i = 0; i < subset.size(); ++i) s.values[subset[i].str()] = r.wins[i];
        } else if (!ExperimentConfig::is_one_shot(e)) {
            const auto k = static_cast<std::size_t>(std::find(zse.begin(), zse.end(), e) - zse.begin());
            for (std::size_t i = 0; i < subset.size(); ++i) s.values[subset[i].str()] = values[k][i];
        } else {
            continue;
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Pipeline

enum class StageStatus { ran, skipped, failed, blocked };

inline const char* to_string(StageStatus s) {
    switch (s) {
        case StageStatus::ran: return "ran";
        case StageStatus::skipped: return "skipped";
        case StageStatus::failed: return "failed";
        case StageStatus::blocked: return "blocked";
    }
    return "?";
}

struct StageReport {
    std::string stage;
    StageStatus status = StageStatus::ran;
    std::string message;
};

struct PipelineResult {
    std::filesystem::path output_dir;
    std::vector<StageReport> stages;
    std::size_t training_steps = 0;  // supernet and oracle SGD steps performed by this run
    bool numeric_failure = false;

    bool ok() const {
        return std::none_of(stages.begin(), stages.end(), [](const StageReport& s) {
            return s.status == StageStatus::failed || s.status == StageStatus::blocked;
        });
    }
    const StageReport* find(const std::string& stage) const {
        for (const auto& s : stages)
            if (s.stage == stage) return &s;
        return nullptr;
    }
};

struct PipelineOptions {
    std::string output_override;
    /// Optional log sink for progress lines.
    std::function<void(const std::string&)> log;
};

/// Paths of the artifacts the pipeline writes.
struct PipelineLayout {
    std::filesystem::path root;
    std::filesystem::path config() const { return root / "config.json"; }
    std::filesystem::path oracle() const { return root / "oracle.tsv"; }
    std::filesystem::path os_scores(std::uint64_t seed) const {
        return root / "scores" / ("one_shot_seed" + std::to_string(seed) + ".tsv");
    }
    std::filesystem::path zs_scores(std::uint64_t seed) const {
        return root / "scores" / ("zero_shot_seed" + std::to_string(seed) + ".tsv");
    }
    std::filesystem::path epochs(std::uint64_t seed) const {
        return root / "supernet" / ("epochs_seed" + std::to_string(seed) + ".tsv");
    }
    std::filesystem::path checkpoints(std::uint64_t seed) const {
        return root / "checkpoints" / ("seed" + std::to_string(seed));
    }
    std::filesystem::path forgetting(std::uint64_t seed) const {
        return root / "diagnostics" / ("forgetting_seed" + std::to_string(seed) + ".tsv");
    }
    std::filesystem::path gradient_similarity(std::uint64_t seed) const {
        return root / "diagnostics" / ("gradient_similarity_seed" + std::to_string(seed) + ".tsv");
    }
    std::filesystem::path criteria(const std::string& est, std::uint64_t seed) const {
        return root / "criteria" / (est + "_seed" + std::to_string(seed) + ".tsv");
    }
    std::filesystem::path diagnostic(const std::string& kind) const { return root / "diagnostics" / (kind + ".tsv"); }
};

namespace detail {

/// Runs one supernet seed: training, periodic shared-weight evaluation, optional forgetting
/// and gradient-similarity probes. Resumes from the seed's checkpoint directory.
inline void run_supernet_seed(const ExperimentConfig& cfg, const Dataset& data, const std::vector<Genotype>& subset,
                              std::uint64_t seed, const PipelineLayout& layout, const std::string& hash,
                              std::atomic<std::size_t>& steps) {
    TrainConfig tc = cfg.supernet.train;
    tc.seed = seed;
    SupernetTrainer<float> trainer(cfg.space, tc);
    const auto ckpt = layout.checkpoints(seed);
    trainer.load(ckpt, hash);
    const auto valid = make_batches<float>(data.valid, tc.batch_size, 0, false);
    const std::vector<Batch<float>> eval_batches(valid.begin(),
                                                 valid.begin() + static_cast<std::ptrdiff_t>(
                                                                     std::min(cfg.supernet.eval_batches, valid.size())));
    if (tc.sampler == SamplerKind::controller)
        trainer.set_reward([&](const std::vector<Genotype>& cands) {
            std::vector<double> r;
            for (const auto& g : cands) {
                const auto e = evaluate(cfg.space, trainer.store(), g, {eval_batches.front()}, cfg.supernet.bn,
                                        trainer.options());
                r.push_back(tc.reward == RewardKind::os_accuracy ? e.accuracy : -e.loss);
            }
            return r;
        });

    // Resumed runs re-read what earlier epochs already produced.
    Table scores{report_schemas().at("scores"), {}};
    Table epochs{report_schemas().at("epochs"), {}};
    Table forgetting{report_schemas().at("forgetting"), {}};
    Table gsim{report_schemas().at("gradient_similarity"), {}};
    const auto partial = [&](const std::filesystem::path& p, Table& t, const std::string& schema) {
        if (trainer.epoch() > 0 && std::filesystem::exists(p)) {
            auto old = read_artifact(p, schema);
            const std::size_t epoch_col = old.column("epoch");
            for (auto& r : old.rows)
                if (std::stoull(r[epoch_col]) <= trainer.epoch()) t.rows.push_back(std::move(r));
        }
    };
    auto partial_path = [](std::filesystem::path p) { return p += ".partial"; };
    partial(partial_path(layout.os_scores(seed)), scores, "scores");
    partial(partial_path(layout.epochs(seed)), epochs, "epochs");
    partial(partial_path(layout.forgetting(seed)), forgetting, "forgetting");
    partial(partial_path(layout.gradient_similarity(seed)), gsim, "gradient_similarity");

    std::unique_ptr<ForgettingTracer<float>> tracer;
    if (cfg.diagnostics.forgetting) {
        std::mt19937_64 prng(seed ^ 0xf0f0ULL);
        auto probes = subset;
        std::shuffle(probes.begin(), probes.end(), prng);
        if (probes.size() > cfg.diagnostics.forgetting_probes) probes.resize(cfg.diagnostics.forgetting_probes);
        tracer = std::make_unique<ForgettingTracer<float>>(trainer, probes, eval_batches, cfg.supernet.bn);
    }
    std::vector<std::pair<Genotype, Genotype>> gpairs;
    if (cfg.diagnostics.gradient_similarity) {
        std::mt19937_64 prng(seed ^ 0x0f0fULL);
        std::uniform_int_distribution<std::size_t> pick(0, subset.size() - 1);
        for (std::size_t i = 0; i < cfg.diagnostics.gradient_similarity_pairs; ++i)
            gpairs.emplace_back(subset[pick(prng)], subset[pick(prng)]);
    }
    const auto eval_epochs = cfg.supernet_eval_epochs();
    while (trainer.epoch() < tc.epochs) {
        const std::size_t epoch = trainer.epoch() + 1;
        const auto train = make_batches<float>(data.train, tc.batch_size, seed * 1000003ULL + epoch);
        EpochLog log;
        if (tracer) {
            const auto recs = tracer->run_epoch(train);
            for (const auto& r : recs)
                forgetting.add({std::to_string(seed), std::to_string(r.epoch), std::to_string(r.step), r.genotype,
                                format_double(r.acc1), format_double(r.acc2), format_double(r.fv())});
            log.epoch = epoch;
            log.steps = train.size();
            log.lr = trainer.lr();
            log.mean_loss = std::numeric_limits<double>::quiet_NaN();
        } else {
            log = trainer.run_epoch(train);
        }
        steps += train.size();
        epochs.add({std::to_string(seed), std::to_string(log.epoch), format_double(log.mean_loss),
                    format_double(log.lr), std::to_string(log.steps), std::to_string(log.skipped)});
        const auto& ge = cfg.diagnostics.gradient_similarity_epochs;
        if (!gpairs.empty() && (ge.empty() ? epoch == tc.epochs : std::find(ge.begin(), ge.end(), epoch) != ge.end())) {
            for (const auto& l : gradient_similarity(cfg.space, trainer.store(), gpairs, valid.front(),
                                                     default_layer_of, trainer.options())) {
                std::string hist;
                for (auto c : l.histogram()) hist += (hist.empty() ? "" : ",") + std::to_string(c);
                gsim.add({std::to_string(seed), std::to_string(epoch), l.layer, std::to_string(l.cosines.size()),
                          std::to_string(l.skipped_zero), format_double(l.mean()), hist});
            }
        }
        if (std::find(eval_epochs.begin(), eval_epochs.end(), epoch) != eval_epochs.end()) {
            ParamStore<float> ens;
            ParamStore<float>* store = &trainer.store();
            if (cfg.supernet.use_ensemble) {
                ens = trainer.ensemble();
                store = &ens;
            }
            EstimatorScores acc{"os_acc", seed, epoch, {}}, loss{"os_loss", seed, epoch, {}};
            for (const auto& g : subset) {
                const auto r = evaluate(cfg.space, *store, g, eval_batches, cfg.supernet.bn, trainer.options());
                acc.values[g.str()] = r.accuracy;
                loss.values[g.str()] = r.loss;
            }
            append_scores(scores, acc);
            append_scores(scores, loss);
        }
        const bool last = epoch == tc.epochs;
        if (last || (tc.checkpoint_every && epoch % tc.checkpoint_every == 0)) {
            trainer.save(ckpt, hash);
            write_artifact(partial_path(layout.os_scores(seed)), scores, "scores", hash, {seed});
            write_artifact(partial_path(layout.epochs(seed)), epochs, "epochs", hash, {seed});
            if (tracer) write_artifact(partial_path(layout.forgetting(seed)), forgetting, "forgetting", hash, {seed});
            if (!gpairs.empty())
                write_artifact(partial_path(layout.gradient_similarity(seed)), gsim, "gradient_similarity", hash, {seed});
        }
    }
    if (tracer) write_artifact(layout.forgetting(seed), forgetting, "forgetting", hash, {seed});
    if (!gpairs.empty()) write_artifact(layout.gradient_similarity(seed), gsim, "gradient_similarity", hash, {seed});
    write_artifact(layout.epochs(seed), epochs, "epochs", hash, {seed});
    // Written last: its sidecar marks the seed complete.
    write_artifact(layout.os_scores(seed), scores, "scores", hash, {seed});
}

inline std::vector<double> complexities(const SearchSpaceDesc& space, const ScoreTable& t, ComplexityKey key) {
    std::vector<double> c;
    for (const auto& r : t.rows()) {
        const auto pf = count_params_flops(Genotype::parse(r.id), space);
        c.push_back(static_cast<double>(key == ComplexityKey::params ? pf.params : pf.flops));
    }
    return c;
}

}  // namespace detail

/// Executes the configured stages in dependency order. Completed artifacts whose sidecar
/// matches the current configuration are reused, so re-running a finished pipeline trains
/// nothing. A failed stage blocks its dependents and leaves earlier artifacts in place.
inline PipelineResult run_pipeline(const ExperimentConfig& cfg, const PipelineOptions& opts = {}) {
    cfg.validate();
    PipelineResult res;
    const PipelineLayout layout{resolve_output_dir(cfg, opts.output_override)};
    res.output_dir = layout.root;
    std::filesystem::create_directories(layout.root);
    atomic_write(layout.config(), config_to_text(cfg));
    auto log = [&](const std::string& m) {
        if (opts.log) opts.log(m);
    };
    std::atomic<std::size_t> steps{0};
    const std::string full_hash = config_hash(cfg);
    std::map<std::string, bool> failed;

    auto run_stage = [&](const std::string& name, const std::vector<std::string>& deps,
                         const std::function<bool()>& body) {
        if (!cfg.has_stage(name)) return;
        for (const auto& d : deps)
            if (failed[d]) {
                failed[name] = true;
                res.stages.push_back({name, StageStatus::blocked, "dependency '" + d + "' failed"});
                log(name + ": blocked by " + d);
                return;
            }
        try {
            const bool ran = body();
            res.stages.push_back({name, ran ? StageStatus::ran : StageStatus::skipped, ""});
            log(name + (ran ? ": done" : ": up to date"));
        } catch (const NumericError& e) {
            failed[name] = true;
            res.numeric_failure = true;
            res.stages.push_back({name, StageStatus::failed, e.what()});
            log(name + ": failed: " + e.what());
        } catch (const std::exception& e) {
            failed[name] = true;
            res.stages.push_back({name, StageStatus::failed, e.what()});
            log(name + ": failed: " + e.what());
        }
    };

    std::optional<Dataset> data;
    auto dataset = [&]() -> const Dataset& {
        if (!data) data = ingest(cfg.dataset);
        return *data;
    };
    const auto subset = select_subset(cfg.space, cfg.subset);
    const std::string ohash = oracle_hash(cfg);

    run_stage("oracle", {}, [&] {
        if (artifact_complete(layout.oracle(), ohash)) return false;
        std::atomic<std::size_t> local{0};
        const auto o = train_oracle(cfg.space, subset, dataset(), cfg.oracle, cfg.seeds, ohash, cfg.threads, &local);
        steps += local;
        write_artifact(layout.oracle(), oracle_to_table(o), "oracle", ohash, cfg.seeds);
        return true;
    });

    run_stage("supernet", {}, [&] {
        std::vector<std::uint64_t> todo;
        for (auto s : cfg.seeds)
            if (!artifact_complete(layout.os_scores(s), supernet_hash(cfg, s))) todo.push_back(s);
        if (todo.empty()) return false;
        parallel_for(todo.size(), cfg.threads, [&](std::size_t i) {
            detail::run_supernet_seed(cfg, dataset(), subset, todo[i], layout, supernet_hash(cfg, todo[i]), steps);
        });
        return true;
    });

    run_stage("zero_shot", {}, [&] {
        bool any = false;
        for (auto s : cfg.seeds) {
            const auto h = zero_shot_hash(cfg, s);
            if (artifact_complete(layout.zs_scores(s), h)) continue;
            std::vector<Batch<double>> batches;
            if (cfg.zero_shot.source == InputSource::dataset) {
                batches = make_batches<double>(dataset().train, cfg.zero_shot.batch_size, s, true, true);
                if (batches.size() < cfg.zero_shot.n_batches)
                    throw ConfigError("training split too small for the requested zero-shot batches");
                batches.resize(cfg.zero_shot.n_batches);
            } else {
                const auto res_px = cfg.space.stages.front().spatial;
                batches = noise_batches<double>(cfg.zero_shot.source,
                                                {cfg.zero_shot.batch_size, cfg.space.input_channels, res_px, res_px},
                                                cfg.zero_shot.n_batches, cfg.space.num_classes, s);
            }
            Table t{report_schemas().at("scores"), {}};
            for (const auto& sc : score_zero_shot<double>(cfg.space, subset, cfg.estimators, cfg.zero_shot,
                                                          cfg.vote_experts, batches, s, cfg.threads))
                append_scores(t, sc);
            write_artifact(layout.zs_scores(s), t, "scores", h, {s});
            any = true;
        }
        return any;
    });

    // Scores for the criteria and diagnostics stages: final epoch of one-shot estimators.
    auto load_scores = [&](std::uint64_t seed) {
        std::vector<EstimatorScores> all;
        if (std::filesystem::exists(layout.os_scores(seed)))
            for (auto& s : scores_from_table(read_artifact(layout.os_scores(seed), "scores"))) all.push_back(std::move(s));
        if (std::filesystem::exists(layout.zs_scores(seed)))
            for (auto& s : scores_from_table(read_artifact(layout.zs_scores(seed), "scores"))) all.push_back(std::move(s));
        return all;
    };
    auto final_scores = [&](const std::vector<EstimatorScores>& all, const std::string& est) -> const EstimatorScores* {
        const EstimatorScores* best = nullptr;
        for (const auto& s : all)
            if (s.estimator == est && (!best || s.epoch > best->epoch)) best = &s;
        return best;
    };
    auto gt_table = [&] {
        if (!std::filesystem::exists(layout.oracle())) throw ConfigError("oracle results missing; run the oracle stage");
        return oracle_from_table(read_artifact(layout.oracle(), "oracle")).table();
    };

    run_stage("criteria", {"oracle", "supernet", "zero_shot"}, [&] {
        bool any = false;
        const auto gt = gt_table();
        for (auto seed : cfg.seeds) {
            const auto all = load_scores(seed);
            for (const auto& est : cfg.estimators) {
                const auto path = layout.criteria(est, seed);
                if (artifact_complete(path, full_hash)) continue;
                Table t{report_schemas().at("criteria"), {}};
                bool found = false;
                for (const auto& s : all) {
                    if (s.estimator != est) continue;
                    found = true;
                    const auto table = join_scores(gt, s);
                    if (table.size() < 2) throw ConfigError("fewer than two genotypes with both GT and " + est);
                    for (const auto& v : criteria_report(table, cfg.criteria_ks).flatten())
                        t.add({est, std::to_string(seed), std::to_string(s.epoch), v.criterion,
                               std::isnan(v.k) ? "" : format_double(v.k), format_double(v.value)});
                }
                if (!found) throw ConfigError("no scores for estimator '" + est + "' seed " + std::to_string(seed));
                write_artifact(path, t, "criteria", full_hash, {seed});
                any = true;
            }
        }
        return any;
    });

    run_stage("diagnostics", {"oracle", "supernet", "zero_shot"}, [&] {
        const auto& d = cfg.diagnostics;
        std::vector<std::string> kinds;
        if (d.ranking_difference) kinds.push_back("ranking_difference");
        if (d.complexity_bias) kinds.push_back("complexity_bias");
        if (d.mutation && cfg.space.topological() && cfg.space.size() <= kEnumerationGuard) kinds.push_back("mutation");
        if (d.pareto_levels) kinds.push_back("pareto");
        if (std::all_of(kinds.begin(), kinds.end(),
                        [&](const std::string& k) { return artifact_complete(layout.diagnostic(k), full_hash); }))
            return false;
        const auto gt = gt_table();
        std::map<std::string, Table> out;
        for (const auto& k : kinds) out[k] = Table{report_schemas().at(k), {}};
        GenotypeScores gt_scores;
        for (const auto& [g, y] : gt) gt_scores[Genotype::parse(g)] = y;
        for (auto seed : cfg.seeds) {
            const auto all = load_scores(seed);
            for (const auto& est : cfg.estimators) {
                const auto* s = final_scores(all, est);
                if (!s) throw ConfigError("no scores for estimator '" + est + "' seed " + std::to_string(seed));
                const auto table = join_scores(gt, *s);
                const std::string seed_s = std::to_string(seed);
                if (d.ranking_difference) {
                    const auto rd = ranking_difference(table);
                    const auto r = table.gt_ranks(), n = table.est_ranks();
                    for (std::size_t i = 0; i < table.size(); ++i)
                        out["ranking_difference"].add({est, seed_s, table[i].id, std::to_string(r[i]),
                                                       std::to_string(n[i]), std::to_string(rd[i])});
                }
                const auto cx = detail::complexities(cfg.space, table, d.complexity_key);
                const auto grouping = ComplexityGrouping::build(table.ids(), cx, d.complexity_key, d.groups);
                if (d.complexity_bias)
                    for (const auto& g : complexity_bias(table, grouping))
                        out["complexity_bias"].add({est, seed_s, to_string(d.complexity_key), std::to_string(g.group),
                                                    std::to_string(g.size), format_double(g.mean_rd),
                                                    format_double(g.kd)});
                if (out.count("mutation")) {
                    GenotypeScores os, loss;
                    const double sign = est == "os_loss" ? -1.0 : 1.0;
                    for (const auto& [g, v] : s->values) os[Genotype::parse(g)] = sign * v;
                    const EstimatorScores* ls = est == "os_acc" ? final_scores(all, "os_loss") : nullptr;
                    if (ls)
                        for (const auto& [g, v] : ls->values) loss[Genotype::parse(g)] = v;
                    for (const auto& m : mutation_analysis(cfg.space, gt_scores, os, ls ? &loss : nullptr, &grouping))
                        out["mutation"].add({est, seed_s, cfg.space.ops[m.from_op].name, cfg.space.ops[m.to_op].name,
                                             m.group ? std::to_string(*m.group) : "all", std::to_string(m.pairs),
                                             std::to_string(m.missing), format_double(m.gt_increase),
                                             format_double(m.os_acc_increase), format_double(m.os_loss_decrease)});
                }
                if (d.pareto_levels)
                    for (auto dir : {ParetoDirection::param, ParetoDirection::inverse_param}) {
                        const auto layers = pareto_frontier(table, cx, d.pareto_levels, dir);
                        for (std::size_t l = 0; l < layers.size(); ++l)
                            for (const auto& g : layers[l])
                                out["pareto"].add({est, seed_s, dir == ParetoDirection::param ? "param" : "inverse_param",
                                                   to_string(d.complexity_key), std::to_string(l + 1), g});
                    }
            }
        }
        for (const auto& [k, t] : out) write_artifact(layout.diagnostic(k), t, k, full_hash, cfg.seeds);
        return true;
    });

    res.training_steps = steps;
    return res;
}

}  // namespace nasaudit
