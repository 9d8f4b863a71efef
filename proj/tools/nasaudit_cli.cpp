#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "nasaudit/harness.hpp"

namespace {

using namespace nasaudit;

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::optional<std::size_t> threads;
};

ExperimentConfig load(const Globals& g) {
    ExperimentConfig c = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
    if (g.seed) c.seeds = {*g.seed};
    if (g.threads) c.threads = *g.threads;
    if (!g.out_dir.empty()) c.output_dir = g.out_dir;
    c.validate();
    return c;
}

SearchSpaceDesc space_for(const Globals& g, const std::string& preset) {
    if (!preset.empty()) return space_from_json(ojson{{"preset", preset}});
    return load(g).space;
}

int run_stages(const Globals& g, std::vector<std::string> stages) {
    auto c = load(g);
    c.stages = std::move(stages);
    PipelineOptions o;
    o.log = [](const std::string& m) { std::cerr << m << "\n"; };
    const auto r = run_pipeline(c, o);
    std::cout << "output: " << r.output_dir.string() << "\n";
    for (const auto& s : r.stages)
        std::cout << s.stage << "\t" << to_string(s.status) << (s.message.empty() ? "" : "\t" + s.message) << "\n";
    std::cout << "training_steps\t" << r.training_steps << "\n";
    if (r.numeric_failure) return kExitNumeric;
    return r.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Architecture performance estimator audit toolkit"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "Experiment configuration (JSON)");
    app.add_option("--seed", g.seed, "Run a single seed instead of the configured list");
    app.add_option("--out-dir", g.out_dir, "Output directory (overrides config and " + std::string(kOutputRootEnv) + ")");
    app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);

    auto* enumerate_cmd = app.add_subcommand("enumerate", "List genotypes of a search space");
    std::string preset;
    bool count_only = false, classes = false;
    std::size_t limit = 0;
    enumerate_cmd->add_option("--space", preset, "Preset instead of the config space")
        ->check(CLI::IsMember({"nb201_like", "nb101_like", "resnet_like"}));
    enumerate_cmd->add_flag("--count", count_only, "Print only the number of genotypes");
    enumerate_cmd->add_flag("--classes", classes, "Also count canonical (isomorphism) classes");
    enumerate_cmd->add_option("--limit", limit, "Print at most this many genotypes");

    auto* canon_cmd = app.add_subcommand("canonicalize", "Canonical form of genotypes");
    std::vector<std::string> genotypes;
    canon_cmd->add_option("--space", preset, "Preset instead of the config space")
        ->check(CLI::IsMember({"nb201_like", "nb101_like"}));
    canon_cmd->add_option("genotypes", genotypes, "Genotype ids (space/i,j,...)")->required();

    auto* train_cmd = app.add_subcommand("train-supernet", "Train the supernet and record one-shot scores");
    auto* score_cmd = app.add_subcommand("score", "Score the genotype subset");
    std::string kind = "zero-shot";
    score_cmd->add_option("--kind", kind, "one-shot or zero-shot")->check(CLI::IsMember({"one-shot", "zero-shot"}));
    auto* oracle_cmd = app.add_subcommand("oracle", "Train the ground-truth oracle");
    auto* criteria_cmd = app.add_subcommand("criteria", "Ranking criteria from pipeline scores or a table");
    std::string table_path;
    std::vector<double> ks;
    criteria_cmd->add_option("--table", table_path, "TSV with columns genotype, gt, estimate")->check(CLI::ExistingFile);
    criteria_cmd->add_option("--k", ks, "Top-K proportions");
    auto* diagnose_cmd = app.add_subcommand("diagnose", "Bias and variance diagnostics");
    auto* pipeline_cmd = app.add_subcommand("pipeline", "Run every configured stage");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*enumerate_cmd) {
            const auto space = space_for(g, preset);
            std::cout << "genotypes\t" << static_cast<double>(space.size()) << "\n";
            if (classes) {
                DeisoTable t(space);
                t.build_full();
                std::size_t dead = 0;
                for (const auto& [k, rep] : t.classes()) dead += canonicalize(rep, space).dead;
                std::cout << "classes\t" << t.num_classes() << "\nlive_classes\t" << t.num_classes() - dead << "\n";
            }
            if (!count_only) {
                std::size_t n = 0;
                for (const auto& gt : enumerate(space)) {
                    if (limit && n++ >= limit) break;
                    std::cout << gt.str() << "\n";
                }
            }
            return 0;
        }
        if (*canon_cmd) {
            const auto space = space_for(g, preset);
            for (const auto& s : genotypes) {
                const auto gt = Genotype::parse(s);
                const auto c = canonicalize(gt, space);
                std::cout << s << "\t" << c.token() << "\t" << (c.dead ? "dead" : "live") << "\n";
            }
            return 0;
        }
        if (*train_cmd) return run_stages(g, {"supernet"});
        if (*score_cmd) return run_stages(g, {kind == "one-shot" ? "supernet" : "zero_shot"});
        if (*oracle_cmd) return run_stages(g, {"oracle"});
        if (*criteria_cmd) {
            if (table_path.empty()) return run_stages(g, {"criteria"});
            const auto t = parse_tsv(read_file(table_path), table_path);
            ScoreTable st;
            const auto gi = t.column("genotype"), yi = t.column("gt"), si = t.column("estimate");
            for (const auto& r : t.rows) st.add(r[gi], parse_double(r[yi]), parse_double(r[si]));
            const auto rep = criteria_report(st, ks.empty() ? default_ks() : ks);
            std::cout << "criterion\tK\tvalue\n";
            for (const auto& v : rep.flatten())
                std::cout << v.criterion << "\t" << (std::isnan(v.k) ? "" : format_double(v.k)) << "\t"
                          << format_double(v.value) << "\n";
            return 0;
        }
        if (*diagnose_cmd) return run_stages(g, {"diagnostics"});
        if (*pipeline_cmd) return run_stages(g, load(g).stages);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
