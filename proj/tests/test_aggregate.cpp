#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace sstc;

namespace {

std::vector<bool> mask_for(const std::vector<std::size_t>& chunk_sizes) {
    std::vector<bool> m;
    for (auto n : chunk_sizes) {
        m.insert(m.end(), n, false);
        m.push_back(true);
    }
    return m;
}

AggregatorWeights<double> zero_weights(std::size_t d, std::size_t k) { return AggregatorWeights<double>::zeros(d, k); }

std::span<const double> sp(const std::vector<double>& v) { return v; }

}  // namespace

TEST(AggregationWeights, ZeroParametersGiveUniform) {
    const auto w = zero_weights(3, 5);
    const auto a = aggregation_weights(sp({1.0, -2.0, 0.5}), w, std::vector<bool>(5, true));
    for (double v : a) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(AggregationWeights, SingleValidIsOneHot) {
    Rng rng(1);
    const auto w = init_aggregator<double>(rng, 3, 5);
    std::vector<bool> valid(5, false);
    valid[3] = true;
    const auto a = aggregation_weights(sp({0.3, 0.1, -0.7}), w, valid);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a[i], i == 3 ? 1.0 : 0.0);
}

TEST(AggregationWeights, ClosedFormTwoWay) {
    auto w = zero_weights(2, 2);
    w.b_alpha = Tensor<double>::vector({0.0, std::log(2.0)});
    const auto a = aggregation_weights(sp({4.0, -1.0}), w, {true, true});
    EXPECT_NEAR(a[0], 1.0 / 3, 1e-15);
    EXPECT_NEAR(a[1], 2.0 / 3, 1e-15);
}

TEST(AggregationWeights, EmptyChunk) {
    const auto w = zero_weights(2, 3);
    EXPECT_THROW(aggregation_weights(sp({0.0, 0.0}), w, std::vector<bool>(3, false)), EmptyChunkError);
}

TEST(GatedMerge, LowerClampFloor) {
    auto w = zero_weights(2, 2);
    w.b_g[0] = -1000;
    const std::vector<double> q{2.0, -1.0}, a{4.0, 3.0};
    const auto r = gated_merge(sp(q), sp(a), w);
    EXPECT_EQ(r.gate, 0.01);
    EXPECT_NEAR(r.q_new[0], 0.99 * 2 + 0.01 * 4, 1e-15);
    EXPECT_NEAR(r.q_new[1], 0.99 * -1 + 0.01 * 3, 1e-15);
}

TEST(GatedMerge, SigmoidZeroIsMidpoint) {
    const auto w = zero_weights(2, 2);
    const std::vector<double> q{2.0, -1.0}, a{4.0, 3.0};
    const auto r = gated_merge(sp(q), sp(a), w);
    EXPECT_EQ(r.gate, 0.5);
    EXPECT_EQ(r.q_new, (std::vector<double>{3.0, 1.0}));
}

TEST(GatedMerge, ForcedQuarterGate) {
    auto w = zero_weights(2, 2);
    w.b_g[0] = std::log(1.0 / 3.0);  // sigmoid = 1/4
    const auto r = gated_merge(sp({1.0, 0.0}), sp({0.0, 1.0}), w);
    EXPECT_NEAR(r.gate, 0.25, 1e-15);
    EXPECT_NEAR(r.q_new[0], 0.75, 1e-15);
    EXPECT_NEAR(r.q_new[1], 0.25, 1e-15);
}

TEST(GatedMerge, UpperClampCeiling) {
    auto w = zero_weights(1, 1);
    w.b_g[0] = 1000;
    EXPECT_EQ(gated_merge(sp({0.0}), sp({1.0}), w).gate, 0.99);
}

TEST(Aggregator, EpsilonDomain) {
    Rng rng(2);
    EXPECT_THROW(init_aggregator<double>(rng, 2, 2, 0.0), ParameterError);
    EXPECT_THROW(init_aggregator<double>(rng, 2, 2, 0.5), ParameterError);
    EXPECT_NO_THROW(init_aggregator<double>(rng, 2, 2, 0.2));
}

TEST(GatedAggregation, UniformHalfGateAveragesQueryWithMean) {
    const auto w = zero_weights(2, 3);
    const auto x = Tensor<double>::matrix(4, 2, {1, 2, 3, 4, 5, 6, 10, 20});
    const auto out = gated_aggregation(x, mask_for({3}), w);
    EXPECT_NEAR(out(3, 0), (10 + 3.0) / 2, 1e-14);
    EXPECT_NEAR(out(3, 1), (20 + 4.0) / 2, 1e-14);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(out(i, j), x(i, j));
}

TEST(GatedAggregation, NearPassthroughWhenGateFloored) {
    Rng rng(3);
    auto w = init_aggregator<double>(rng, 3, 4);
    w.b_g[0] = -1e4;
    const auto mask = mask_for({4, 2, 4});
    const auto x = random_normal<double>(rng, {mask.size(), 3});
    const auto out = gated_aggregation(x, mask, w);
    double bound = 0;  // |q_new - q| = g |a - q| <= 0.01 * 2 max|x|
    for (double v : x.values()) bound = std::max(bound, 0.02 * std::abs(v));
    for (std::size_t i = 0; i < mask.size(); ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            if (!mask[i]) {
                EXPECT_EQ(out(i, j), x(i, j));
            } else {
                EXPECT_NEAR(out(i, j), x(i, j), bound);
            }
        }
    }
}

TEST(GatedAggregation, MatchesPerChunkOracle) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const std::size_t k = 1 + rng.below(5), d = 1 + rng.below(4);
        auto w = init_aggregator<double>(rng, d, k);
        w.b_alpha = random_normal<double>(rng, {k});
        w.b_g[0] = rng.normal();
        std::vector<std::size_t> sizes;
        for (std::size_t c = 0, n = 1 + rng.below(4); c < n; ++c) sizes.push_back(1 + rng.below(k));
        const auto mask = mask_for(sizes);
        const auto x = random_normal<double>(rng, {mask.size(), d}, 2.0);
        const auto out = gated_aggregation(x, mask, w);
        EXPECT_LT(oracle::max_abs_diff(out, oracle::aggregate(oracle::to_mat(x), mask, w)), 1e-12);
    }
}

TEST(GatedAggregation, ApplyOnTokenSequence) {
    Rng rng(4);
    const auto w = init_aggregator<double>(rng, 2, 2);
    const auto frames = random_normal<double>(rng, {2, 3, 2});
    const auto seq = insert_queries(frames, Tensor<double>::vector({0.5, -0.5}), 2);
    const auto out = apply_gated_aggregation(seq, w);
    EXPECT_EQ(out.is_query, seq.is_query);
    EXPECT_EQ(out.frame_of, seq.frame_of);
    EXPECT_EQ(out.tokens, gated_aggregation(seq.tokens, seq.is_query, w));
}

TEST(GatedAggregation, GateContractOverManyQueries) {
    Rng rng(5);
    const std::size_t d = 4, k = 3;
    std::size_t low = 0, high = 0;
    for (int trial = 0; trial < 100000; ++trial) {
        auto w = init_aggregator<double>(rng, d, k);
        const double scale = std::exp(rng.uniform(-2, 3));
        for (auto& v : w.w_g.values()) v *= scale;
        w.b_g[0] = 3 * rng.normal();
        const auto q = rng_standard_normal<double>(rng, d);
        const auto a = rng_standard_normal<double>(rng, d);
        const auto r = gated_merge(sp(q), sp(a), w);
        ASSERT_GE(r.gate, 0.01);
        ASSERT_LE(r.gate, 0.99);
        low += r.gate == 0.01;
        high += r.gate == 0.99;
        for (std::size_t j = 0; j < d; ++j) {
            ASSERT_GE(r.q_new[j], std::min(q[j], a[j]));
            ASSERT_LE(r.q_new[j], std::max(q[j], a[j]));
        }
    }
    EXPECT_GT(low, 0u);
    EXPECT_GT(high, 0u);
}

TEST(GatedAggregation, ChunkLocality) {
    Rng rng(6);
    const auto w = init_aggregator<double>(rng, 3, 3);
    const auto mask = mask_for({3, 2, 3});
    const auto x = random_normal<double>(rng, {mask.size(), 3});
    const auto y = gated_aggregation(x, mask, w);
    auto xp = x;
    for (std::size_t j = 0; j < 3; ++j) xp(4, j) += 1.0;  // second chunk's first patch
    const auto yp = gated_aggregation(xp, mask, w);
    for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_EQ(yp(3, j), y(3, j));
        EXPECT_EQ(yp(10, j), y(10, j));
    }
    bool changed = false;
    for (std::size_t j = 0; j < 3; ++j) changed = changed || yp(6, j) != y(6, j);
    EXPECT_TRUE(changed);
}

TEST(GatedAggregation, MalformedMasks) {
    const auto w = zero_weights(1, 2);
    const Tensor<double> x3({3, 1}), x4({4, 1});
    EXPECT_THROW(gated_aggregation(Tensor<double>({4, 1}), {false, false, false, true}, w), DimensionError);
    EXPECT_THROW(gated_aggregation(x3, {false, true, false}, w), DimensionError);
    EXPECT_THROW(gated_aggregation(x3, {false, true, true}, w), DimensionError);
    EXPECT_THROW(gated_aggregation(x3, {true, true, true}, w, static_cast<AggregationCache<double>*>(nullptr), false), DimensionError);
    auto x = Tensor<double>::matrix(3, 1, {1.0, 7.0, 9.0});
    const auto out = gated_aggregation(x, {false, true, true}, w, static_cast<AggregationCache<double>*>(nullptr), true);
    EXPECT_EQ(out(2, 0), 9.0);
    EXPECT_THROW(gated_aggregation(x4, {false, true, true}, w), DimensionError);
}

TEST(GatedAggregation, GradientsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        Rng rng(300 + seed);
        const std::size_t d = 3, k = 3;
        auto w = init_aggregator<double>(rng, d, k);
        w.b_alpha = random_normal<double>(rng, {k});
        const auto mask = mask_for({3, 1, 2});
        auto x = random_normal<double>(rng, {mask.size(), d});
        const auto dy = random_normal<double>(rng, {mask.size(), d});
        AggregationCache<double> cache;
        gated_aggregation(x, mask, w, &cache);
        auto grads = AggregatorWeights<double>::zeros(d, k);
        const auto dx = gated_aggregation_backward(w, cache, dy, grads);
        std::vector<NamedParam<double>> params{
            {"x", &x}, {"w_alpha", &w.w_alpha}, {"b_alpha", &w.b_alpha}, {"w_g", &w.w_g}, {"b_g", &w.b_g}};
        std::vector<Tensor<double>> analytic{dx, grads.w_alpha, grads.b_alpha, grads.w_g, grads.b_g};
        const auto report = finite_diff_gradcheck(
            [&] { return testutil::dot(gated_aggregation(x, mask, w), dy); }, params, analytic);
        for (const auto& g : report.groups) EXPECT_LT(g.max_rel_error, 1e-4) << g.name << " seed " << seed;
    }
}

TEST(GatedAggregation, ClampedGateHasZeroGradient) {
    Rng rng(7);
    const std::size_t d = 2, k = 2;
    auto w = init_aggregator<double>(rng, d, k);
    w.b_g[0] = 30;  // far inside the upper clamp
    const auto mask = mask_for({2, 2});
    auto x = random_normal<double>(rng, {mask.size(), d});
    const auto dy = random_normal<double>(rng, {mask.size(), d});
    AggregationCache<double> cache;
    gated_aggregation(x, mask, w, &cache);
    auto grads = AggregatorWeights<double>::zeros(d, k);
    gated_aggregation_backward(w, cache, dy, grads);
    for (double v : grads.w_g.values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(grads.b_g[0], 0.0);
    std::vector<NamedParam<double>> params{{"w_g", &w.w_g}, {"b_g", &w.b_g}};
    const auto report = finite_diff_gradcheck([&] { return testutil::dot(gated_aggregation(x, mask, w), dy); },
                                              params, {grads.w_g, grads.b_g});
    for (const auto& g : report.groups) EXPECT_LT(g.max_rel_error, 1e-4) << g.name;
}
