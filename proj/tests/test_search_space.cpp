#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include <map>
#include <random>
#include <set>

#include "nasaudit/criteria.hpp"
#include "nasaudit/search_space.hpp"

using namespace nasaudit;

namespace {

constexpr std::uint32_t kNone = 0, kSkip = 1, kC1 = 2, kC3 = 3, kPool = 4;

Genotype nb(std::vector<std::uint32_t> d) { return {"nb201-like", std::move(d)}; }

SearchSpaceDesc toy27() {
    return edge_space("toy", 3, {OpTemplate::skip(), OpTemplate::conv(1), OpTemplate::conv(3)}, {{8, 8, 1}});
}

double chi2_p(const std::vector<std::size_t>& counts, double expected) {
    double stat = 0;
    for (auto c : counts) stat += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) / expected;
    boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
    return boost::math::cdf(boost::math::complement(dist, stat));
}

// Nodes with a non-none path to the output node.
std::vector<bool> useful_nodes(const Genotype& g, const SearchSpaceDesc& s) {
    std::vector<bool> useful(s.num_nodes, false);
    useful[s.num_nodes - 1] = true;
    for (std::size_t n = s.num_nodes - 1; n-- > 0;)
        for (std::size_t e = 0; e < s.edges.size(); ++e)
            if (s.edges[e].first == n && useful[s.edges[e].second] && s.ops[g.decisions[e]].kind != OpKind::none)
                useful[n] = true;
    return useful;
}

}  // namespace

TEST(Enumerate, Nb201HasAll15625InLexicographicOrder) {
    const auto all = enumerate_all(nb201_like());
    ASSERT_EQ(all.size(), 15625u);
    EXPECT_TRUE(std::is_sorted(all.begin(), all.end()));
    EXPECT_EQ(std::adjacent_find(all.begin(), all.end()), all.end());
    EXPECT_EQ(all.front().str(), "nb201-like/0,0,0,0,0,0");
    EXPECT_EQ(all.back().str(), "nb201-like/4,4,4,4,4,4");
}

TEST(Enumerate, OneEdgeOneOp) {
    const auto s = edge_space("one", 2, {OpTemplate::conv(3)}, {{8, 8, 1}});
    EXPECT_EQ(enumerate_all(s).size(), 1u);
}

TEST(Enumerate, ThreeEdgesThreeOps) { EXPECT_EQ(enumerate_all(toy27()).size(), 27u); }

TEST(Enumerate, GuardAdvisesSampling) {
    const auto big = edge_space("big", 7, nb201_like().ops, {{8, 8, 1}});
    EXPECT_GT(big.size(), 1e7L);
    try {
        enumerate(big);
        FAIL() << "expected a guard error";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("sample"), std::string::npos);
    }
}

TEST(Genotype, TextRoundTripAndValidation) {
    const auto g = Genotype::parse("nb201-like/0,3,1,4,2,2");
    EXPECT_EQ(g.space, "nb201-like");
    EXPECT_EQ(g.decisions, (std::vector<std::uint32_t>{0, 3, 1, 4, 2, 2}));
    EXPECT_EQ(g.str(), "nb201-like/0,3,1,4,2,2");
    EXPECT_NO_THROW(validate_genotype(g, nb201_like()));
    EXPECT_THROW(validate_genotype(nb({0, 0, 0, 0, 0, 5}), nb201_like()), ConfigError);
    EXPECT_THROW(validate_genotype(nb({0, 0, 0}), nb201_like()), ConfigError);
    EXPECT_THROW(Genotype::parse("nb201-like"), ConfigError);
    EXPECT_THROW(Genotype::parse("nb201-like/1,x"), ConfigError);
    EXPECT_LT(nb({0, 0, 0, 0, 0, 1}), nb({0, 0, 0, 0, 1, 0}));
}

TEST(Canonicalize, NoneEdgeOffMainPathIsInvisible) {
    const auto s = nb201_like();
    // conv3 straight to the output; node 1 feeds nothing, so the 0->1 edge is dead weight.
    const auto a = nb({kNone, kNone, kNone, kC3, kNone, kNone});
    const auto b = nb({kC1, kNone, kNone, kC3, kNone, kNone});
    EXPECT_EQ(canonicalize(a, s).text, canonicalize(b, s).text);
}

TEST(Canonicalize, SkipReroutingIsInvisible) {
    const auto s = nb201_like();
    const auto direct = nb({kNone, kNone, kNone, kC3, kNone, kNone});
    const auto via_skip = nb({kSkip, kNone, kNone, kNone, kC3, kNone});
    EXPECT_EQ(canonicalize(direct, s).text, canonicalize(via_skip, s).text);
}

TEST(Canonicalize, AllNoneIsDead) {
    const auto s = nb201_like();
    const auto c = canonicalize(nb({0, 0, 0, 0, 0, 0}), s);
    EXPECT_TRUE(c.dead);
    EXPECT_EQ(c.token(), canonicalize(nb({kC3, kNone, kNone, kNone, kNone, kNone}), s).token());
    EXPECT_FALSE(canonicalize(nb({kNone, kNone, kNone, kSkip, kNone, kNone}), s).dead);
}

TEST(Canonicalize, Nb201Has6466DistinctStrings) {
    const auto s = nb201_like();
    std::set<std::string> all, live;
    for (const auto& g : enumerate(s)) {
        const auto c = canonicalize(g, s);
        all.insert(c.text);
        if (!c.dead) live.insert(c.text);
    }
    EXPECT_EQ(all.size(), 6466u);
    EXPECT_EQ(live.size(), 6461u);
}

TEST(Canonicalize, RemovingEdgesIntoUselessNodesIsACongruence) {
    const auto s = nb201_like();
    std::mt19937_64 rng(3);
    std::size_t checked = 0;
    for (int t = 0; t < 3000; ++t) {
        auto g = sample_uniform(s, rng);
        const auto useful = useful_nodes(g, s);
        for (std::size_t e = 0; e < s.edges.size(); ++e) {
            if (useful[s.edges[e].second] || g.decisions[e] == kNone) continue;
            auto h = g;
            h.decisions[e] = kNone;
            ASSERT_EQ(canonicalize(g, s).text, canonicalize(h, s).text) << g.str() << " vs " << h.str();
            ++checked;
        }
    }
    EXPECT_GT(checked, 100u);
}

TEST(Canonicalize, NonTopologicalIsRejected) {
    const auto s = resnet_like({BlockStageChoices{}});
    EXPECT_THROW(canonicalize(Genotype{s.id, {0, 0, 0, 0}}, s), ConfigError);
}

TEST(Canonicalize, OpOnNodeDisconnectedOutputIsDead) {
    const auto s = nb101_like();
    Genotype g{s.id, std::vector<std::uint32_t>(s.cardinalities().size(), 0)};
    EXPECT_TRUE(canonicalize(g, s).dead);
    // Direct input -> output connection is live.
    const auto pairs = s.node_edge_pairs();
    for (std::size_t p = 0; p < pairs.size(); ++p)
        if (pairs[p] == std::make_pair<std::size_t, std::size_t>(0, s.num_nodes - 1)) g.decisions[p] = 1;
    EXPECT_FALSE(canonicalize(g, s).dead);
}

TEST(Costs, ParameterFreeCellsAddNothing) {
    const auto s = nb201_like();
    const auto none = count_params_flops(nb({0, 0, 0, 0, 0, 0}), s);
    const auto skip = count_params_flops(nb({1, 1, 1, 1, 1, 1}), s);
    const auto pool = count_params_flops(nb({kPool, kPool, kSkip, kNone, kPool, kSkip}), s);
    EXPECT_EQ(none.params, skip.params);
    EXPECT_EQ(none.params, pool.params);
    EXPECT_EQ(none.flops, skip.flops);
}

TEST(Costs, SingleConvEdgeClosedForm) {
    auto s = nb201_like({{16, 32, 1}});
    const auto base = count_params_flops(nb({0, 0, 0, 0, 0, 0}), s);
    const auto one = count_params_flops(nb({kNone, kNone, kNone, kC3, kNone, kNone}), s);
    EXPECT_EQ(one.params - base.params, 16u * 16u * 9u + 2u * 16u);
    EXPECT_EQ(one.flops - base.flops, 2u * 16u * 16u * 9u * 32u * 32u);
    s.bn_affine = false;
    const auto base2 = count_params_flops(nb({0, 0, 0, 0, 0, 0}), s);
    const auto one2 = count_params_flops(nb({kNone, kNone, kNone, kC3, kNone, kNone}), s);
    EXPECT_EQ(one2.params - base2.params, 16u * 16u * 9u);
}

TEST(Costs, LinearInRepeatedCellsAndAdditiveOverPositions) {
    const auto one = nb201_like({{16, 32, 1}});
    const auto three = nb201_like({{16, 32, 3}});
    const auto zero = nb({0, 0, 0, 0, 0, 0});
    std::mt19937_64 rng(5);
    for (int t = 0; t < 50; ++t) {
        const auto g = sample_uniform(one, rng);
        const auto d1 = count_params_flops(g, one).params - count_params_flops(zero, one).params;
        const auto d3 = count_params_flops(g, three).params - count_params_flops(zero, three).params;
        EXPECT_EQ(d3, 3 * d1);
        std::uint64_t sum = 0;
        for (std::size_t e = 0; e < 6; ++e) {
            auto single = zero;
            single.decisions[e] = g.decisions[e];
            sum += count_params_flops(single, one).params - count_params_flops(zero, one).params;
        }
        EXPECT_EQ(d1, sum);
    }
}

TEST(Costs, ParamsAndFlopsRankingsAgreeOnNb201Geometry) {
    const auto s = nb201_like();
    ScoreTable t;
    for (const auto& g : enumerate(s)) {
        const auto pf = count_params_flops(g, s);
        t.add(g.str(), static_cast<double>(pf.params), static_cast<double>(pf.flops));
    }
    const auto r = t.gt_ranks(), n = t.est_ranks();
    std::vector<double> rr(r.begin(), r.end()), nn(n.begin(), n.end());
    EXPECT_EQ(kendall_tau(rr, nn), 1.0);
}

TEST(Costs, SimplifiedCostIsClassInvariant) {
    const auto s = nb201_like();
    std::map<std::string, ParamsFlops> seen;
    for (const auto& g : enumerate(s)) {
        const auto c = canonicalize(g, s);
        const auto pf = count_params_flops(g, s, CountMode::simplified);
        auto [it, fresh] = seen.emplace(c.text, pf);
        if (!fresh) {
            ASSERT_EQ(it->second.params, pf.params) << g.str();
            ASSERT_EQ(it->second.flops, pf.flops) << g.str();
        }
    }
}

TEST(Costs, NonTopologicalCountsGrowWithWidthAndDepth) {
    const auto s = resnet_like({BlockStageChoices{{1, 2}, {16, 32}, {0.5, 1.0}, {1, 2}}}, 16, 8);
    const Genotype small{s.id, {0, 0, 0, 0}}, deep{s.id, {1, 0, 0, 0}}, wide{s.id, {0, 1, 0, 0}},
        grouped{s.id, {0, 0, 0, 1}};
    const auto ps = count_params_flops(small, s).params;
    EXPECT_GT(count_params_flops(deep, s).params, ps);
    EXPECT_GT(count_params_flops(wide, s).params, ps);
    EXPECT_LT(count_params_flops(grouped, s).params, ps);
}

TEST(Mutations, Nb201EveryTypeHas18750Pairs) {
    const auto s = nb201_like();
    for (std::size_t a = 0; a < 5; ++a)
        for (std::size_t b = a + 1; b < 5; ++b) EXPECT_EQ(mutation_pairs(s, a, b).size(), 18750u) << a << "->" << b;
}

TEST(Mutations, OneEdgeTwoOps) {
    const auto s = edge_space("two", 2, {OpTemplate::skip(), OpTemplate::conv(3)}, {{8, 8, 1}});
    EXPECT_EQ(mutation_pairs(s, 0, 1).size(), 1u);
    EXPECT_EQ(mutation_pairs(s, 1, 0).size(), 1u);
    EXPECT_THROW(mutation_pairs(s, 1, 1), ConfigError);
}

TEST(Mutations, MatchBruteForceHammingFilter) {
    const auto s = toy27();
    const auto all = enumerate_all(s);
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b) {
            if (a == b) continue;
            std::set<std::pair<Genotype, Genotype>> oracle;
            for (const auto& x : all)
                for (const auto& y : all) {
                    std::size_t diff = 0, at = 0;
                    for (std::size_t p = 0; p < 3; ++p)
                        if (x.decisions[p] != y.decisions[p]) {
                            ++diff;
                            at = p;
                        }
                    if (diff == 1 && x.decisions[at] == a && y.decisions[at] == b) oracle.emplace(x, y);
                }
            const auto got = mutation_pairs(s, a, b);
            const std::set<std::pair<Genotype, Genotype>> got_set(got.begin(), got.end());
            EXPECT_EQ(got_set, oracle);
            EXPECT_EQ(got.size(), oracle.size());
        }
}

TEST(Mutations, OppositeDirectionsAreInverse) {
    const auto s = nb201_like();
    std::set<std::pair<Genotype, Genotype>> fwd, back;
    for (auto& [x, y] : mutation_pairs(s, kC1, kPool)) fwd.emplace(x, y);
    for (auto& [x, y] : mutation_pairs(s, kPool, kC1)) back.emplace(y, x);
    EXPECT_EQ(fwd, back);
}

TEST(Sampling, UniformChiSquareOn27Genotypes) {
    const auto s = toy27();
    std::mt19937_64 rng(11);
    std::map<Genotype, std::size_t> counts;
    const std::size_t n = 1000000;
    for (std::size_t i = 0; i < n; ++i) counts[sample_uniform(s, rng)]++;
    ASSERT_EQ(counts.size(), 27u);
    std::vector<std::size_t> c;
    for (auto& [g, k] : counts) c.push_back(k);
    EXPECT_GT(chi2_p(c, static_cast<double>(n) / 27.0), 0.01);
}

TEST(Sampling, DeisoUniformOverClasses) {
    const auto s = nb201_like();
    DeisoTable table(s);
    table.build_full();
    ASSERT_EQ(table.num_classes(), 6466u);
    std::mt19937_64 rng(12);
    std::vector<std::size_t> counts(table.num_classes(), 0);
    const std::size_t per_class = 40;
    for (std::size_t i = 0; i < per_class * counts.size(); ++i) {
        const auto g = sample(s, rng, SampleMode::deiso, &table);
        counts[table.class_index(g)]++;
    }
    EXPECT_GT(chi2_p(counts, static_cast<double>(per_class)), 0.01);
}

TEST(Sampling, DeisoReturnsFixedRepresentatives) {
    const auto s = nb201_like();
    DeisoTable lazy(s);
    std::mt19937_64 rng(13);
    std::map<std::string, Genotype> rep;
    for (int i = 0; i < 5000; ++i) {
        const auto g = lazy.sample(rng);
        auto [it, fresh] = rep.emplace(canonicalize(g, s).text, g);
        ASSERT_EQ(it->second, g);
        ASSERT_EQ(lazy.representative(g), g);
    }
    EXPECT_THROW(DeisoTable(resnet_like({BlockStageChoices{}})), ConfigError);
}

TEST(Sampling, SingleGenotypeSpace) {
    const auto s = edge_space("one", 2, {OpTemplate::conv(3)}, {{8, 8, 1}});
    DeisoTable t(s);
    std::mt19937_64 rng(1);
    for (int i = 0; i < 20; ++i) {
        EXPECT_EQ(sample_uniform(s, rng).str(), "one/0");
        EXPECT_EQ(t.sample(rng).str(), "one/0");
    }
}

TEST(Pruning, PrunedSpaceClassesAndLifting) {
    const auto full = nb201_like();
    const auto pruned = prune_ops(full, {"avg_pool_3x3", "skip_connect"});
    EXPECT_EQ(pruned.id, "nb201-like-pruned");
    EXPECT_EQ(pruned.ops.size(), 3u);
    std::set<std::string> classes;
    for (const auto& g : enumerate(pruned)) {
        classes.insert(canonicalize(g, pruned).text);
        const auto lifted = lift_genotype(g, pruned, full);
        for (std::size_t p = 0; p < 6; ++p)
            EXPECT_EQ(full.ops[lifted.decisions[p]].name, pruned.ops[g.decisions[p]].name);
        EXPECT_EQ(canonicalize(lifted, full).text, canonicalize(g, pruned).text);
    }
    EXPECT_EQ(enumerate_all(pruned).size(), 729u);
    EXPECT_EQ(classes.size(), 321u);
}

TEST(ReluCount, CountsCellConvolutions) {
    const auto s = nb201_like();
    EXPECT_EQ(cell_relu_count(nb({0, 0, 0, 0, 0, 0}), s), 0u);
    EXPECT_EQ(cell_relu_count(nb({kC1, kC3, kSkip, kPool, kC3, kNone}), s), 3u * 15u);
}
