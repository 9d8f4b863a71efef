#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sys/wait.h>
#include <unistd.h>

#include "nasaudit/harness.hpp"

using namespace nasaudit;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("nasaudit_harness_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ExperimentConfig toy_config(const fs::path& out) {
    ExperimentConfig c;
    c.name = "toy";
    c.space = edge_space("toy", 3, {OpTemplate::skip(), OpTemplate::conv(1), OpTemplate::conv(3)}, {{4, 8, 1}});
    c.space.num_classes = 4;
    c.dataset.resolution = 8;
    c.dataset.classes = 4;
    c.dataset.per_class = 10;
    c.dataset.seed = 3;
    c.subset.mode = SubsetMode::all;
    c.oracle.epochs = 1;
    c.oracle.batch_size = 16;
    c.supernet.train.epochs = 2;
    c.supernet.train.batch_size = 16;
    c.supernet.eval_batches = 1;
    c.zero_shot.n_batches = 1;
    c.zero_shot.batch_size = 8;
    c.estimators = {"os_acc", "os_loss", "params", "flops", "synflow"};
    c.seeds = {20, 2020};
    c.output_dir = out.string();
    return c;
}

std::string slurp(const fs::path& p) { return read_file(p); }

std::size_t count_files(const fs::path& dir, const std::string& ext) {
    if (!fs::exists(dir)) return 0;
    std::size_t n = 0;
    for (const auto& f : fs::recursive_directory_iterator(dir))
        if (f.is_regular_file() && f.path().extension() == ext) ++n;
    return n;
}

std::string record(unsigned char label, unsigned char fill) {
    std::string r(kCifarRecord, static_cast<char>(fill));
    r[0] = static_cast<char>(label);
    return r;
}

}  // namespace

TEST(Config, TextRoundTripIsByteIdentical) {
    for (const auto& c : {ExperimentConfig{}, toy_config("/tmp/x")}) {
        const auto text = config_to_text(c);
        const auto back = config_from_text(text);
        EXPECT_EQ(config_to_text(back), text);
        EXPECT_EQ(config_hash(back), config_hash(c));
    }
}

TEST(Config, PresetsAndDefaults) {
    const auto c = config_from_text(R"({"name": "p", "space": {"preset": "nb201_like",
        "stages": [{"channels": 8, "spatial": 16, "cells": 1}]}})");
    EXPECT_EQ(c.space.size(), 15625.0);
    EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{20, 2020, 202020}));
    EXPECT_DOUBLE_EQ(c.dataset.train_fraction, 0.8);
    // re-serialized presets expand to the full form and stay stable
    const auto text = config_to_text(c);
    EXPECT_EQ(config_to_text(config_from_text(text)), text);
}

TEST(Config, ErrorsAreConfigErrors) {
    EXPECT_THROW(config_from_text("{not json"), ConfigError);
    EXPECT_THROW(config_from_text(R"({"bogus": 1})"), ConfigError);
    EXPECT_THROW(config_from_text(R"({"seeds": [1, 1]})"), ConfigError);
    EXPECT_THROW(config_from_text(R"({"seeds": []})"), ConfigError);
    EXPECT_THROW(config_from_text(R"({"estimators": ["oracle_peek"]})"), ConfigError);
    EXPECT_THROW(config_from_text(R"({"stages": ["train"]})"), ConfigError);
    EXPECT_THROW(config_from_text(R"({"dataset": {"classes": 7}})"), ConfigError);
    EXPECT_THROW(config_from_text(R"({"dataset": {"train_fraction": 1.0}})"), ConfigError);
    EXPECT_THROW(config_from_text(R"({"estimators": ["vote"], "zero_shot": {"vote_experts": ["snip", "synflow"]}})"),
                 ConfigError);
    EXPECT_THROW(config_from_text(R"({"supernet": {"epochs": 3, "eval_epochs": [4]}})"), ConfigError);
    EXPECT_THROW(config_from_text(R"({"threads": "many"})"), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, HashIgnoresOutputAndThreads) {
    auto a = toy_config("/tmp/a");
    auto b = toy_config("/tmp/b");
    b.threads = 4;
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.supernet.train.epochs = 3;
    EXPECT_NE(config_hash(a), config_hash(b));
    EXPECT_EQ(oracle_hash(a), oracle_hash(b));
    EXPECT_NE(supernet_hash(a, 20), supernet_hash(b, 20));
    EXPECT_NE(supernet_hash(a, 20), supernet_hash(a, 2020));
}

TEST(Config, OutputDirectoryPrecedence) {
    auto c = toy_config("");
    c.output_dir.clear();
    ::unsetenv(kOutputRootEnv);
    EXPECT_EQ(resolve_output_dir(c), fs::path("nasaudit-out") / "toy");
    ::setenv(kOutputRootEnv, "/tmp/root", 1);
    EXPECT_EQ(resolve_output_dir(c), fs::path("/tmp/root") / "toy");
    c.output_dir = "/tmp/cfg";
    EXPECT_EQ(resolve_output_dir(c), fs::path("/tmp/cfg"));
    EXPECT_EQ(resolve_output_dir(c, "/tmp/cli"), fs::path("/tmp/cli"));
    ::unsetenv(kOutputRootEnv);
}

TEST(Ingest, SyntheticIsDeterministic) {
    DatasetSpec s;
    s.per_class = 20;
    s.seed = 7;
    const auto a = ingest(s), b = ingest(s);
    const auto ba = make_batches<float>(a.train, 32, 1), bb = make_batches<float>(b.train, 32, 1);
    EXPECT_EQ(batch_checksum(ba.front()), batch_checksum(bb.front()));
    s.seed = 8;
    const auto c = ingest(s);
    EXPECT_NE(batch_checksum(make_batches<float>(c.train, 32, 1).front()), batch_checksum(ba.front()));
    // a different batch order seed changes the batch, not the data
    EXPECT_NE(batch_checksum(make_batches<float>(a.train, 32, 2).front()), batch_checksum(ba.front()));
}

TEST(Ingest, SplitIsEightyTwentyAndExhaustive) {
    DatasetSpec s;  // 10 classes x 100
    const auto d = ingest(s);
    EXPECT_EQ(d.train.size(), 800u);
    EXPECT_EQ(d.valid.size(), 200u);
    std::vector<std::size_t> per(10, 0);
    for (int y : d.train.y) per[static_cast<std::size_t>(y)]++;
    for (int y : d.valid.y) per[static_cast<std::size_t>(y)]++;
    for (auto n : per) EXPECT_EQ(n, 100u);
}

TEST(Ingest, TrainingSplitIsNormalized) {
    DatasetSpec s;
    s.per_class = 30;
    const auto d = ingest(s);
    const std::size_t hw = d.train.height * d.train.width;
    for (std::size_t ch = 0; ch < d.train.channels; ++ch) {
        double sum = 0, sq = 0;
        for (std::size_t k = 0; k < d.train.size(); ++k)
            for (std::size_t p = 0; p < hw; ++p) {
                const double v = d.train.x[(k * d.train.channels + ch) * hw + p];
                sum += v;
                sq += v * v;
            }
        const double n = static_cast<double>(d.train.size() * hw);
        EXPECT_NEAR(sum / n, 0.0, 1e-5);
        EXPECT_NEAR(sq / n, 1.0, 1e-4);
    }
}

TEST(Ingest, CifarRecordsParse) {
    std::string bytes = record(3, 0) + record(9, 255);
    bytes[kCifarRecord + 1] = static_cast<char>(51);  // first red pixel of record 2
    bytes[1 + 1024] = static_cast<char>(102);         // first green pixel of record 1
    const auto e = parse_cifar10(bytes);
    ASSERT_EQ(e.size(), 2u);
    EXPECT_EQ(e.y, (std::vector<int>{3, 9}));
    EXPECT_EQ(e.x.size(), 2u * 3072u);
    EXPECT_FLOAT_EQ(e.x[0], 0.0f);
    EXPECT_FLOAT_EQ(e.x[1024], 102.0f / 255.0f);
    EXPECT_FLOAT_EQ(e.x[3072], 51.0f / 255.0f);
    EXPECT_FLOAT_EQ(e.x[3073], 1.0f);
    EXPECT_EQ(parse_cifar10(bytes, "b", 1).size(), 1u);
    // decoded pixels sum back to the raw pixel bytes
    double sum = 0;
    for (float v : e.x) sum += std::round(static_cast<double>(v) * 255.0);
    EXPECT_EQ(sum, 102.0 + 51.0 + 3071.0 * 255.0);
}

TEST(Ingest, CifarErrorsCarryByteOffsets) {
    const std::string good = record(1, 7);
    try {
        parse_cifar10(good + good.substr(0, 100), "f.bin");
        FAIL() << "truncated input accepted";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset 3073"), std::string::npos) << e.what();
    }
    try {
        parse_cifar10(good + record(10, 0), "f.bin");
        FAIL() << "invalid label accepted";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset 3073"), std::string::npos) << e.what();
    }
}

TEST(Ingest, CifarDirectoryLoad) {
    const auto dir = temp_dir("cifar");
    std::string bytes;
    for (int i = 0; i < 10; ++i) bytes += record(static_cast<unsigned char>(i), static_cast<unsigned char>(i * 20));
    for (const char* name : {"data_batch_1.bin", "data_batch_2.bin"}) {
        std::ofstream f(dir / name, std::ios::binary);
        f << bytes;
    }
    std::ofstream(dir / "test_batch.bin", std::ios::binary) << bytes;
    EXPECT_EQ(load_cifar10({dir.string()}).size(), 20u);
    EXPECT_EQ(load_cifar10({dir.string()}, 13).size(), 13u);
    DatasetSpec s;
    s.source = DataSource::cifar10_binary;
    s.paths = {dir.string()};
    const auto d = ingest(s);
    EXPECT_EQ(d.train.size(), 16u);
    EXPECT_EQ(d.valid.size(), 4u);
    EXPECT_EQ(d.train.height, 32u);
    EXPECT_THROW(load_cifar10({(dir / "missing").string()}), ConfigError);
    fs::remove_all(dir);
}

TEST(Subset, Modes) {
    const auto s = edge_space("toy", 3, {OpTemplate::none(), OpTemplate::skip(), OpTemplate::conv(1), OpTemplate::conv(3)},
                              {{4, 8, 1}});
    EXPECT_EQ(select_subset(s, {SubsetMode::all, 0, 0, {}}).size(), 64u);
    const auto reps = select_subset(s, {SubsetMode::representatives, 0, 0, {}});
    std::set<std::string> keys;
    for (const auto& g : reps) {
        const auto c = canonicalize(g, s);
        EXPECT_FALSE(c.dead);
        EXPECT_TRUE(keys.insert(c.text).second);
    }
    EXPECT_EQ(select_subset(s, {SubsetMode::sample, 10, 4, {}}).size(), 10u);
    EXPECT_EQ(select_subset(s, {SubsetMode::sample, 10, 4, {}}), select_subset(s, {SubsetMode::sample, 10, 4, {}}));
    EXPECT_EQ(select_subset(s, {SubsetMode::list, 0, 0, {"toy/1,2,3", "toy/1,2,3"}}).size(), 1u);
    EXPECT_THROW(select_subset(s, {SubsetMode::list, 0, 0, {"toy/1,2,9"}}), ConfigError);
    EXPECT_THROW(select_subset(s, {SubsetMode::list, 0, 0, {}}), ConfigError);
}

TEST(Oracle, SingleGenotypeAndDeterminism) {
    auto c = toy_config("");
    const auto data = ingest(c.dataset);
    const Genotype g{"toy", {1, 2, 0}};
    const auto o = train_oracle(c.space, {g}, data, c.oracle, {5, 5}, "h");
    ASSERT_EQ(o.entries.size(), 1u);
    EXPECT_EQ(o.table().size(), 1u);
    ASSERT_EQ(o.entries[0].accuracy.size(), 2u);
    EXPECT_EQ(o.entries[0].accuracy[0], o.entries[0].accuracy[1]);
    EXPECT_EQ(o.entries[0].config_hash, "h");
    const auto back = oracle_from_table(oracle_to_table(o));
    EXPECT_EQ(back.entries[0].genotype, g.str());
    EXPECT_EQ(back.entries[0].mean, o.entries[0].mean);
}

TEST(Oracle, DivergenceIsFlaggedAndExcluded) {
    auto c = toy_config("");
    const auto data = ingest(c.dataset);
    StandaloneConfig bad = c.oracle;
    bad.sgd.lr = 1e30;
    bad.sgd.grad_clip = 0.0;
    bad.epochs = 3;
    bad.cosine = false;
    const auto o = train_oracle(c.space, {Genotype{"toy", {2, 2, 2}}, Genotype{"toy", {0, 0, 0}}}, data, bad, {1});
    EXPECT_GE(o.diverged, 1u);
    EXPECT_EQ(o.table().size(), o.entries.size() - o.diverged);
    const auto t = oracle_to_table(o);
    EXPECT_EQ(oracle_from_table(t).diverged, o.diverged);
}

TEST(Oracle, GuardRejectsLargeSubsets) {
    const auto s = nb201_like({{4, 8, 1}});
    const auto all = enumerate_all(s);
    const std::vector<Genotype> big(all.begin(), all.begin() + 501);
    auto c = toy_config("");
    EXPECT_THROW(train_oracle(s, big, ingest(c.dataset), c.oracle, {1}), ConfigError);
}

TEST(Reports, TsvAndDoublesRoundTrip) {
    for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 1e300, 0.0}) EXPECT_EQ(parse_double(format_double(v)), v);
    EXPECT_TRUE(std::isnan(parse_double(format_double(std::nan("")))));
    EXPECT_EQ(parse_double("-inf"), -std::numeric_limits<double>::infinity());
    EXPECT_THROW(parse_double("1.5x"), ConfigError);
    Table t{{"a", "b"}, {}};
    t.add({"1", "x"});
    EXPECT_THROW(t.add({"1"}), ConfigError);
    const auto back = parse_tsv(to_tsv(t));
    EXPECT_EQ(back.columns, t.columns);
    EXPECT_EQ(back.rows, t.rows);
    EXPECT_THROW(parse_tsv("a\tb\n1\n"), ConfigError);
    EXPECT_EQ(content_address("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(Reports, ArtifactCompletionTracksHashAndContent) {
    const auto dir = temp_dir("artifact");
    Table t{report_schemas().at("epochs"), {}};
    t.add({"20", "1", "0.5", "0.1", "3", "0"});
    const auto p = dir / "e.tsv";
    write_artifact(p, t, "epochs", "abc", {20});
    EXPECT_TRUE(artifact_complete(p, "abc"));
    EXPECT_FALSE(artifact_complete(p, "abd"));
    EXPECT_EQ(read_meta(p)->rows, 1u);
    std::ofstream(p, std::ios::app) << "20\t2\t0.4\t0.1\t3\t0\n";
    EXPECT_FALSE(artifact_complete(p, "abc"));
    EXPECT_THROW(write_artifact(dir / "bad.tsv", t, "oracle", "abc"), ConfigError);
    fs::remove_all(dir);
}

TEST(Pipeline, EstimatorsOnlyRunWritesNoCheckpoints) {
    const auto dir = temp_dir("zs_only");
    auto c = toy_config(dir);
    c.stages = {"oracle", "zero_shot", "criteria"};
    c.estimators = {"params", "flops", "synflow", "snip"};
    const auto r = run_pipeline(c);
    ASSERT_TRUE(r.ok());
    const PipelineLayout layout{dir};
    EXPECT_FALSE(fs::exists(dir / "checkpoints"));
    EXPECT_FALSE(fs::exists(dir / "supernet"));
    for (auto seed : c.seeds) {
        EXPECT_TRUE(artifact_complete(layout.zs_scores(seed), zero_shot_hash(c, seed)));
        for (const auto& e : c.estimators) EXPECT_TRUE(fs::exists(layout.criteria(e, seed))) << e;
    }
    EXPECT_EQ(count_files(dir / "criteria", ".tsv"), c.estimators.size() * c.seeds.size());
    fs::remove_all(dir);
}

TEST(Pipeline, EndToEndCountsIdempotenceAndSchemas) {
    const auto dir = temp_dir("e2e");
    auto c = toy_config(dir);
    const auto first = run_pipeline(c);
    ASSERT_TRUE(first.ok());
    EXPECT_GT(first.training_steps, 0u);
    for (const auto& s : first.stages) EXPECT_EQ(s.status, StageStatus::ran) << s.stage;
    // one criteria artifact per (estimator, seed), with the epoch-1 and final-epoch rows for one-shot
    EXPECT_EQ(count_files(dir / "criteria", ".tsv"), c.estimators.size() * c.seeds.size());
    const PipelineLayout layout{dir};
    const auto crit = read_artifact(layout.criteria("os_acc", 20), "criteria");
    std::set<std::string> epochs;
    for (const auto& row : crit.rows) epochs.insert(row[2]);
    EXPECT_EQ(epochs, (std::set<std::string>{"1", "2"}));
    for (auto seed : c.seeds) EXPECT_TRUE(fs::exists(layout.checkpoints(seed) / "manifest.json"));
    // every table validates against the schema its sidecar names
    std::size_t tables = 0;
    for (const auto& f : fs::recursive_directory_iterator(dir)) {
        if (f.path().extension() != ".tsv") continue;
        auto meta = read_meta(f.path());
        ASSERT_TRUE(meta) << f.path();
        EXPECT_NO_THROW(read_artifact(f.path(), meta->schema)) << f.path();
        EXPECT_EQ(meta->content_address, content_address(slurp(f.path())));
        ++tables;
    }
    EXPECT_GE(tables, 1 + 2 * 3 + c.estimators.size() * c.seeds.size() + 4);

    const auto again = run_pipeline(c);
    EXPECT_TRUE(again.ok());
    EXPECT_EQ(again.training_steps, 0u);
    for (const auto& s : again.stages) EXPECT_EQ(s.status, StageStatus::skipped) << s.stage;
    fs::remove_all(dir);
}

TEST(Pipeline, SameConfigGivesIdenticalScores) {
    const auto a = temp_dir("det_a"), b = temp_dir("det_b");
    auto ca = toy_config(a), cb = toy_config(b);
    for (auto* c : {&ca, &cb}) {
        c->stages = {"supernet", "zero_shot"};
        c->seeds = {20};
        c->supernet.train.epochs = 1;
    }
    ASSERT_TRUE(run_pipeline(ca).ok());
    ASSERT_TRUE(run_pipeline(cb).ok());
    const PipelineLayout la{a}, lb{b};
    EXPECT_EQ(slurp(la.os_scores(20)), slurp(lb.os_scores(20)));
    EXPECT_EQ(slurp(la.zs_scores(20)), slurp(lb.zs_scores(20)));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Pipeline, FailedStageBlocksDependentsAndKeepsOthers) {
    const auto dir = temp_dir("fail");
    ExperimentConfig c;
    c.name = "fail";
    c.space = edge_space("toy", 3, {OpTemplate::skip(), OpTemplate::conv(1)}, {{4, 32, 1}});
    c.dataset.source = DataSource::cifar10_binary;
    c.dataset.paths = {(dir / "absent.bin").string()};
    c.subset.mode = SubsetMode::all;
    c.zero_shot.source = InputSource::gaussian_noise;
    c.zero_shot.n_batches = 1;
    c.zero_shot.batch_size = 4;
    c.estimators = {"params", "synflow"};
    c.stages = {"oracle", "zero_shot", "criteria"};
    c.seeds = {1};
    c.output_dir = dir.string();
    const auto r = run_pipeline(c);
    EXPECT_FALSE(r.ok());
    EXPECT_EQ(r.find("oracle")->status, StageStatus::failed);
    EXPECT_EQ(r.find("zero_shot")->status, StageStatus::ran);
    EXPECT_EQ(r.find("criteria")->status, StageStatus::blocked);
    EXPECT_TRUE(fs::exists(PipelineLayout{dir}.zs_scores(1)));
    fs::remove_all(dir);
}

TEST(Parallel, ForRunsEveryIndexAndRethrows) {
    std::vector<int> hit(100, 0);
    parallel_for(hit.size(), 4, [&](std::size_t i) { hit[i]++; });
    for (int h : hit) EXPECT_EQ(h, 1);
    EXPECT_THROW(parallel_for(10, 3,
                              [](std::size_t i) {
                                  if (i == 7) throw ConfigError("boom");
                              }),
                 ConfigError);
}

#ifdef NASAUDIT_CLI_PATH
namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(NASAUDIT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

}  // namespace

TEST(Cli, ExitCodes) {
    const auto dir = temp_dir("cli");
    EXPECT_EQ(run_cli("enumerate --space nb201_like --count"), 0);
    EXPECT_EQ(run_cli("canonicalize --space nb201_like nb201-like/0,0,0,0,0,0"), 0);
    EXPECT_EQ(run_cli("--config /nonexistent.json pipeline"), 2);
    EXPECT_EQ(run_cli("no-such-verb"), 2);
    EXPECT_EQ(run_cli("canonicalize --space nb201_like nb201-like/9,9,9,9,9,9"), 2);
    {
        std::ofstream(dir / "bad.json") << R"({"seeds": [1, 1]})";
    }
    EXPECT_EQ(run_cli("--config " + (dir / "bad.json").string() + " pipeline"), 2);
    {
        std::ofstream f(dir / "t.tsv");
        f << "genotype\tgt\testimate\na\t0.1\t0.2\nb\t0.3\t0.5\nc\t0.2\t0.1\n";
    }
    EXPECT_EQ(run_cli("criteria --table " + (dir / "t.tsv").string()), 0);
    {
        auto c = toy_config(dir / "out");
        c.stages = {"zero_shot"};
        c.estimators = {"params"};
        c.seeds = {1};
        std::ofstream(dir / "ok.json") << config_to_text(c);
    }
    EXPECT_EQ(run_cli("--config " + (dir / "ok.json").string() + " pipeline"), 0);
    EXPECT_TRUE(fs::exists(dir / "out" / "scores" / "zero_shot_seed1.tsv"));
    {
        // overflowing inputs make every gradient non-finite
        auto c = toy_config(dir / "num");
        c.dataset.noise = 1e308;
        c.stages = {"zero_shot"};
        c.estimators = {"snip"};
        c.seeds = {1};
        std::ofstream(dir / "num.json") << config_to_text(c);
    }
    EXPECT_EQ(run_cli("--config " + (dir / "num.json").string() + " pipeline"), 3);
    fs::remove_all(dir);
}
#endif
