#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <random>
#include <set>

#include <unistd.h>

#include "nasaudit/training.hpp"

using namespace nasaudit;
namespace fs = std::filesystem;

namespace {

SearchSpaceDesc toy(std::size_t classes = 4) {
    auto s = edge_space("toy", 3, {OpTemplate::skip(), OpTemplate::conv(1), OpTemplate::conv(3)}, {{4, 8, 1}});
    s.num_classes = classes;
    return s;
}

std::vector<Batch<double>> batches(std::size_t count, std::size_t n, std::size_t classes, std::uint64_t seed,
                                   std::size_t hw = 8) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::uniform_int_distribution<int> lab(0, static_cast<int>(classes) - 1);
    std::vector<Batch<double>> out;
    for (std::size_t b = 0; b < count; ++b) {
        Batch<double> batch{Tensor<double>({n, 3, hw, hw}), std::vector<int>(n)};
        for (auto& y : batch.y) y = lab(rng);
        // Class-dependent mean so the problem is learnable.
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < 3 * hw * hw; ++j)
                batch.x.data[i * 3 * hw * hw + j] = nd(rng) + (j % 4 == static_cast<std::size_t>(batch.y[i]) ? 1.5 : 0.0);
        out.push_back(std::move(batch));
    }
    return out;
}

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("nasaudit_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

template <class T>
bool same_store(const ParamStore<T>& a, const ParamStore<T>& b) {
    if (a.params.size() != b.params.size() || a.buffers.size() != b.buffers.size()) return false;
    for (const auto& [k, v] : a.params)
        if (!b.params.count(k) || b.params.at(k).data != v.data) return false;
    for (const auto& [k, v] : a.buffers)
        if (!b.buffers.count(k) || b.buffers.at(k).data != v.data) return false;
    return true;
}

}  // namespace

TEST(SubNet, ForwardShapesForEverySpaceKind) {
    std::mt19937_64 rng(1);
    const std::vector<SearchSpaceDesc> spaces{
        nb201_like({{4, 8, 1}, {8, 4, 1}}),
        nb101_like(4, {{4, 8, 1}}),
        resnet_like({BlockStageChoices{{1, 2}, {8, 16}, {0.5, 1.0}, {1, 2}}, BlockStageChoices{}}, 8, 8),
    };
    for (const auto& s : spaces) {
        auto store = make_param_store<double>(s, 3);
        const auto b = batches(1, 3, 10, 4).front();
        for (int t = 0; t < 8; ++t) {
            SubNet<double> net(s, store, sample_uniform(s, rng));
            Graph<double> g;
            auto out = net.forward(g, g.input(b.x));
            EXPECT_EQ(g.shape(out), (Shape{3, 10})) << s.id;
            EXPECT_TRUE(all_finite(g.value(out).data));
        }
    }
}

TEST(SubNet, AgreeingDecisionsShareTensors) {
    const auto s = nb201_like({{4, 8, 1}});
    auto store = make_param_store<double>(s, 1);
    SubNet<double> a(s, store, Genotype{s.id, {3, 2, 0, 3, 1, 4}});
    SubNet<double> b(s, store, Genotype{s.id, {3, 3, 0, 2, 1, 4}});
    std::map<std::string, Tensor<double>*> pa, pb;
    for (auto& p : a.parameters()) pa[p.name] = p.tensor;
    for (auto& p : b.parameters()) pb[p.name] = p.tensor;
    EXPECT_EQ(pa.at("s0.c0.e0.nor_conv_3x3.conv.weight"), pb.at("s0.c0.e0.nor_conv_3x3.conv.weight"));
    EXPECT_EQ(pa.count("s0.c0.e1.nor_conv_3x3.conv.weight"), 0u);
    EXPECT_EQ(pb.count("s0.c0.e1.nor_conv_3x3.conv.weight"), 1u);
    EXPECT_EQ(pa.at("head.fc.weight"), pb.at("head.fc.weight"));
}

TEST(TrainStep, OnlySampledParametersMoveWithoutWeightDecay) {
    const auto s = toy();
    auto store = make_param_store<double>(s, 2);
    const auto before = store;
    std::map<std::string, std::vector<double>> mom;
    std::mt19937_64 rng(3);
    SgdConfig sgd;
    sgd.weight_decay = 0.0;
    const Genotype g{s.id, {1, 0, 2}};
    const auto st = train_step(s, store, mom, batches(1, 6, 4, 5).front(), {g}, sgd, rng);
    EXPECT_FALSE(st.skipped);
    SubNet<double> net(s, store, g);
    const auto used_list = net.parameter_names();
    const std::set<std::string> used(used_list.begin(), used_list.end());
    for (const auto& [name, t] : store.params) {
        if (used.count(name)) {
            EXPECT_NE(t.data, before.params.at(name).data) << name;
        } else {
            EXPECT_EQ(t.data, before.params.at(name).data) << name;
        }
    }
}

TEST(TrainStep, NonFiniteLossSkipsTheUpdate) {
    const auto s = toy();
    auto store = make_param_store<double>(s, 2);
    store.param("head.fc.bias").data[0] = std::numeric_limits<double>::quiet_NaN();
    const auto before = store.params.at("stem.conv.weight").data;
    std::map<std::string, std::vector<double>> mom;
    std::mt19937_64 rng(3);
    const auto st = train_step(s, store, mom, batches(1, 4, 4, 5).front(), {Genotype{s.id, {0, 1, 2}}}, SgdConfig{}, rng);
    EXPECT_TRUE(st.skipped);
    EXPECT_EQ(store.params.at("stem.conv.weight").data, before);
}

TEST(Slicing, ChannelPickRules) {
    Tensor<double> k({4, 1, 1, 1}, std::vector<double>{0.1, -3.0, 2.0, 0.5});
    EXPECT_EQ(pick_channels(k, 2, ChannelPick::l1), (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(pick_channels(k, 2, ChannelPick::ordinal), (std::vector<std::size_t>{0, 1}));
    EXPECT_THROW(pick_channels(k, 5, ChannelPick::l1), ConfigError);
}

TEST(Slicing, GroupOffsetsStayInsideStoredGroups) {
    // 8 -> 8 channels, 4 actual groups, 2 stored groups: stored rows hold 4 inputs.
    EXPECT_EQ(group_input_offset(0, 8, 8, 4, 2), 0u);
    EXPECT_EQ(group_input_offset(2, 8, 8, 4, 2), 2u);
    EXPECT_EQ(group_input_offset(4, 8, 8, 4, 2), 0u);
    EXPECT_EQ(group_input_offset(6, 8, 8, 4, 2), 2u);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(group_input_offset(i, 8, 8, 2, 2), 0u);
    EXPECT_THROW(group_input_offset(0, 8, 8, 3, 2), ConfigError);
}

TEST(Slicing, LargestChoiceUsesEveryStoredChannel) {
    const auto s = resnet_like({BlockStageChoices{{1}, {8, 16}, {0.5, 1.0}, {1}}}, 8, 8);
    auto store = make_param_store<double>(s, 1);
    SubNet<double> big(s, store, Genotype{s.id, {0, 1, 1, 0}});
    const auto ch = big.block_channels();
    EXPECT_EQ(ch[0].first.size(), 16u);
    EXPECT_EQ(ch[0].second.size(), 16u);
    SubNet<double> small(s, store, Genotype{s.id, {0, 0, 0, 0}});
    EXPECT_EQ(small.block_channels()[0].first.size(), 8u);
    EXPECT_EQ(small.block_channels()[0].second.size(), 4u);
}

TEST(FairNas, CountsStayExactlyEqualOver10kRounds) {
    const auto s = nb201_like();
    std::mt19937_64 rng(7);
    std::vector<std::vector<std::size_t>> counts(6, std::vector<std::size_t>(5, 0));
    for (int r = 1; r <= 10000; ++r) {
        const auto round = fairnas_round(s, rng);
        ASSERT_EQ(round.size(), 5u);
        for (const auto& g : round)
            for (std::size_t p = 0; p < 6; ++p) counts[p][g.decisions[p]]++;
        if (r % 997 == 0 || r == 10000) {
            for (const auto& row : counts)
                for (auto c : row) ASSERT_EQ(c, static_cast<std::size_t>(r));
        }
    }
}

TEST(FairNas, TrainerTrainsEveryOperationEquallyOften) {
    const auto s = toy();
    TrainConfig cfg;
    cfg.sampler = SamplerKind::fairnas;
    cfg.mc_samples = 3;
    SupernetTrainer<double> tr(s, cfg);
    std::vector<std::vector<std::size_t>> counts(3, std::vector<std::size_t>(3, 0));
    tr.on_step([&](std::size_t, const std::vector<Genotype>& sampled) {
        for (const auto& g : sampled)
            for (std::size_t p = 0; p < 3; ++p) counts[p][g.decisions[p]]++;
    });
    const auto data = batches(3, 4, 4, 8);
    tr.run_epoch(data);
    tr.run_epoch(data);
    for (const auto& row : counts)
        for (auto c : row) EXPECT_EQ(c, 6u);
    cfg.mc_samples = 2;
    EXPECT_THROW(SupernetTrainer<double>(s, cfg), ConfigError);
}

TEST(Ensemble, IdenticalCheckpointsAreIdentity) {
    const auto s = toy();
    auto a = make_param_store<double>(s, 1);
    for (std::size_t k : {1u, 2u, 3u, 7u}) {
        std::vector<const ParamStore<double>*> ptrs(k, &a);
        EXPECT_TRUE(same_store(temporal_ensemble(ptrs), a)) << k;
    }
}

TEST(Ensemble, OppositePairCancelsExactly) {
    const auto s = toy();
    auto a = make_param_store<double>(s, 1);
    auto neg = a;
    for (auto& [k, t] : neg.params)
        for (auto& v : t.data) v = -v;
    for (auto& [k, t] : neg.buffers)
        for (auto& v : t.data) v = -v;
    const auto e = temporal_ensemble<double>({&a, &neg});
    for (const auto& [k, t] : e.params)
        for (double v : t.data) ASSERT_EQ(v, 0.0) << k;
    for (const auto& [k, t] : e.buffers)
        for (double v : t.data) ASSERT_EQ(v, 0.0) << k;
}

TEST(Ensemble, OrderDoesNotMatter) {
    const auto s = toy();
    std::vector<ParamStore<double>> stores;
    for (int i = 0; i < 4; ++i) stores.push_back(make_param_store<double>(s, 10 + i));
    std::vector<const ParamStore<double>*> ptrs;
    for (const auto& st : stores) ptrs.push_back(&st);
    const auto ref = temporal_ensemble(ptrs);
    std::mt19937_64 rng(3);
    for (int t = 0; t < 10; ++t) {
        std::shuffle(ptrs.begin(), ptrs.end(), rng);
        EXPECT_TRUE(same_store(temporal_ensemble(ptrs), ref));
    }
    const auto& w = ref.params.at("stem.conv.weight").data;
    for (std::size_t i = 0; i < 5; ++i) {
        double mean = 0;
        for (const auto& st : stores) mean += st.params.at("stem.conv.weight").data[i] / 4.0;
        EXPECT_NEAR(w[i], mean, 1e-15);
    }
}

TEST(Ensemble, LayoutMismatchIsRejected) {
    auto a = make_param_store<double>(toy(), 1);
    auto b = make_param_store<double>(toy(5), 1);
    EXPECT_THROW(temporal_ensemble<double>({&a, &b}), ConfigError);
    EXPECT_THROW(temporal_ensemble<double>({}), ConfigError);
}

TEST(Trainer, EnsembleWindowAveragesRecentEpochs) {
    TrainConfig cfg;
    cfg.ensemble_window = 2;
    SupernetTrainer<double> tr(toy(), cfg);
    const auto data = batches(2, 4, 4, 1);
    tr.run_epoch(data);
    const auto e1 = tr.store();
    tr.run_epoch(data);
    const auto e2 = tr.store();
    tr.run_epoch(data);
    const auto e3 = tr.store();
    EXPECT_TRUE(same_store(tr.ensemble(), temporal_ensemble<double>({&e2, &e3})));
    EXPECT_FALSE(same_store(tr.ensemble(), temporal_ensemble<double>({&e1, &e2})));
}

TEST(Trainer, ResumeIsBitIdentical) {
    const auto s = toy();
    TrainConfig cfg;
    cfg.mc_samples = 2;
    cfg.plateau_patience = 0;
    const auto data = batches(3, 4, 4, 9);
    SupernetTrainer<double> straight(s, cfg);
    for (int e = 0; e < 3; ++e) straight.run_epoch(data);

    const auto dir = temp_dir("resume");
    {
        SupernetTrainer<double> first(s, cfg);
        first.run_epoch(data);
        first.save(dir, "abc");
    }
    SupernetTrainer<double> resumed(s, cfg);
    ASSERT_TRUE(resumed.load(dir, "abc"));
    EXPECT_EQ(resumed.epoch(), 1u);
    resumed.run_epoch(data);
    resumed.run_epoch(data);
    EXPECT_TRUE(same_store(resumed.store(), straight.store()));
    EXPECT_EQ(resumed.lr(), straight.lr());

    SupernetTrainer<double> other(s, cfg);
    EXPECT_THROW(other.load(dir, "different"), ConfigError);
    EXPECT_FALSE(other.load(dir / "missing"));
    fs::remove_all(dir);
}

TEST(Trainer, LossDecreasesOnLearnableData) {
    TrainConfig cfg;
    cfg.sgd.lr = 0.05;
    SupernetTrainer<double> tr(toy(), cfg);
    const auto data = batches(6, 16, 4, 2);
    const double first = tr.run_epoch(data).mean_loss;
    double last = first;
    for (int e = 0; e < 5; ++e) last = tr.run_epoch(data).mean_loss;
    EXPECT_LT(last, first);
}

TEST(Trainer, DeisoSamplesRepresentatives) {
    const auto s = toy();
    TrainConfig cfg;
    cfg.sampler = SamplerKind::deiso;
    SupernetTrainer<double> tr(s, cfg);
    DeisoTable table(s);
    table.build_full();
    for (int i = 0; i < 200; ++i) {
        const auto g = tr.sample_step().front();
        EXPECT_EQ(table.representative(g), g);
    }
}

TEST(Trainer, RestrictedSubsetOnlySamplesMembers) {
    const auto s = toy();
    SupernetTrainer<double> tr(s, TrainConfig{});
    const std::vector<Genotype> subset{{s.id, {0, 0, 0}}, {s.id, {2, 2, 2}}};
    tr.restrict_to(subset);
    for (int i = 0; i < 50; ++i) {
        const auto g = tr.sample_step().front();
        EXPECT_TRUE(g == subset[0] || g == subset[1]);
    }
    EXPECT_THROW(tr.restrict_to({}), ConfigError);
}

TEST(Controller, CandidatesAndSingleObjectiveSelection) {
    const auto s = nb201_like();
    std::mt19937_64 rng(4);
    ControllerState st;
    st.population_size = 8;
    auto cand = controller_candidates(st, s, rng);
    EXPECT_EQ(cand.size(), 16u);
    std::vector<double> reward(cand.size()), cx(cand.size(), 1.0);
    for (std::size_t i = 0; i < cand.size(); ++i) reward[i] = static_cast<double>(i);
    st = controller_update(st, cand, reward, cx);
    ASSERT_EQ(st.population.size(), 8u);
    EXPECT_EQ(st.population.front(), cand.back());
    cand = controller_candidates(st, s, rng);
    EXPECT_EQ(cand.size(), 16u);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(cand[i], st.population[i]);
}

TEST(Controller, ParetoModeKeepsBothExtremes) {
    ControllerState st;
    st.mode = ControllerMode::pareto_evo;
    st.population_size = 2;
    const std::vector<Genotype> cand{{"x", {0}}, {"x", {1}}, {"x", {2}}, {"x", {3}}};
    // Reward vs params: {3} is best overall; {0} leads the inverse-param front.
    const std::vector<double> reward{0.5, 0.4, 0.3, 0.9}, params{10, 20, 30, 40};
    st = controller_update(st, cand, reward, params);
    ASSERT_EQ(st.population.size(), 2u);
    const std::set<Genotype> got(st.population.begin(), st.population.end());
    EXPECT_TRUE(got.count(cand[3]));
    EXPECT_TRUE(got.count(cand[0]));
}

TEST(Pruning, KeepsTopFractionRoundedUp) {
    std::vector<std::pair<Genotype, double>> scored;
    for (std::uint32_t i = 0; i < 10; ++i) scored.push_back({Genotype{"x", {i}}, static_cast<double>(i % 4)});
    const auto kept = prune_archs(scored, 0.25);
    ASSERT_EQ(kept.size(), 3u);
    EXPECT_EQ(kept[0], (Genotype{"x", {3}}));
    EXPECT_EQ(kept[1], (Genotype{"x", {7}}));
    EXPECT_EQ(kept[2], (Genotype{"x", {2}}));
    EXPECT_THROW(prune_archs(scored, 0.0), ConfigError);
}

TEST(Evaluate, BatchStatisticsLeaveBuffersAlone) {
    const auto s = toy();
    auto store = make_param_store<double>(s, 3);
    const auto before = store.buffers;
    const auto r = evaluate(s, store, Genotype{s.id, {2, 1, 0}}, batches(2, 5, 4, 1));
    EXPECT_EQ(r.examples, 10u);
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
    EXPECT_GT(r.loss, 0.0);
    for (const auto& [k, t] : store.buffers) EXPECT_EQ(t.data, before.at(k).data);
}

TEST(Evaluate, ClassAveragingUsesCanonicalClasses) {
    const auto s = nb201_like();
    const Genotype a{s.id, {0, 0, 0, 3, 0, 0}}, b{s.id, {1, 0, 0, 0, 3, 0}}, c{s.id, {3, 3, 3, 3, 3, 3}};
    const auto out = average_by_class(s, {{a, 1.0}, {b, 3.0}, {c, 5.0}});
    EXPECT_EQ(out.at(a), 2.0);
    EXPECT_EQ(out.at(b), 2.0);
    EXPECT_EQ(out.at(c), 5.0);
}

TEST(Checkpoint, StoreRoundTripsThroughFlatMap) {
    auto a = make_param_store<double>(nb201_like({{4, 8, 1}}), 5);
    const auto back = ParamStore<double>::from_map(a.to_map());
    EXPECT_TRUE(same_store(a, back));
    const auto f = a.cast<float>();
    EXPECT_EQ(f.params.size(), a.params.size());
}
