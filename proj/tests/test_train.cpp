#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "schema_check.hpp"
#include "sstc/sstc.hpp"

using namespace sstc;

namespace {

MambaMiaConfig probe_config() {
    MambaMiaConfig cfg;
    cfg.d = 8;
    cfg.d_state = 4;
    cfg.layers = 1;
    cfg.k = 4;
    cfg.s = Rational(1, 2);
    cfg.n_patches = 8;
    return cfg;
}

NeedleTaskSpec spec_for(const MambaMiaConfig& cfg, std::size_t frames = 4, std::size_t classes = 4) {
    NeedleTaskSpec spec;
    spec.frames = frames;
    spec.patches = cfg.n_patches;
    spec.d = cfg.d;
    spec.codebook_size = classes;
    return spec;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersAlone) {
    Tensor<double> p = Tensor<double>::vector({1.0, -2.0, 3.0});
    const Tensor<double> g({3});
    AdamState st;
    st.lr = 0.1;
    for (int i = 0; i < 3; ++i) adam_step<double>({&p}, {&g}, st);
    EXPECT_EQ(p, Tensor<double>::vector({1.0, -2.0, 3.0}));
    EXPECT_EQ(st.t, 3);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    Tensor<double> p = Tensor<double>::vector({0.0, 5.0});
    const Tensor<double> g = Tensor<double>::vector({1.0, -4.0});
    AdamState st;
    st.lr = 0.1;
    adam_step<double>({&p}, {&g}, st);
    // Bias correction makes the first update exactly lr·sign(g) up to eps.
    EXPECT_NEAR(p[0], -0.1, 1e-8);
    EXPECT_NEAR(p[1], 5.1, 1e-8);
}

TEST(Adam, ShapeMismatchThrows) {
    Tensor<double> p({2});
    const Tensor<double> g({3});
    AdamState st;
    EXPECT_THROW(adam_step<double>({&p}, {&g}, st), DimensionError);
}

TEST(Schedule, WarmupThenCosine) {
    // 100 steps: warm-up is ceil(3) = 3 updates.
    EXPECT_NEAR(lr_multiplier(1, 100), 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(lr_multiplier(2, 100), 2.0 / 3.0, 1e-15);
    EXPECT_DOUBLE_EQ(lr_multiplier(3, 100), 1.0);
    EXPECT_NEAR(lr_multiplier(100, 100), 0.0, 1e-15);
    EXPECT_NEAR(lr_multiplier(3 + 97 / 2.0, 100), 0.5, 0.02);
    for (int s = 3; s < 100; ++s) EXPECT_GE(lr_multiplier(s, 100), lr_multiplier(s + 1, 100));
}

TEST(Gradcheck, QuadraticIsExact) {
    Tensor<double> a = Tensor<double>::vector({0.3, -1.2, 2.0});
    Tensor<double> b = Tensor<double>::matrix(2, 2, {1.0, 0.5, -0.25, 4.0});
    auto loss = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (i + 1.0) * a[i] * a[i];
        for (std::size_t i = 0; i < b.size(); ++i) s += 0.5 * b[i] * b[i] + b[i];
        return s;
    };
    Tensor<double> ga(a.shape()), gb(b.shape());
    for (std::size_t i = 0; i < a.size(); ++i) ga[i] = 2.0 * (i + 1.0) * a[i];
    for (std::size_t i = 0; i < b.size(); ++i) gb[i] = b[i] + 1.0;
    const auto r = finite_diff_gradcheck(loss, {{"a", &a}, {"b", &b}}, {ga, gb});
    ASSERT_EQ(r.groups.size(), 2u);
    EXPECT_LT(r.max_error(), 1e-9);
    EXPECT_TRUE(r.failures(1e-9).empty());
    // Parameters are restored after perturbation.
    EXPECT_EQ(a, Tensor<double>::vector({0.3, -1.2, 2.0}));
}

TEST(Gradcheck, WrongGradientIsReported) {
    Tensor<double> a = Tensor<double>::vector({1.0, 2.0});
    Tensor<double> ga = Tensor<double>::vector({2.0, 4.5});
    const auto r = finite_diff_gradcheck([&] { return a[0] * a[0] + a[1] * a[1]; }, {{"a", &a}}, {ga});
    EXPECT_NEAR(r.groups[0].max_rel_error, 0.5 / 4.5, 1e-6);
    EXPECT_EQ(r.failures(1e-4), std::vector<std::string>{"a"});
}

TEST(Gradcheck, StepSizeShowsTruncationAndRoundoffRegimes) {
    Tensor<double> x = Tensor<double>::vector({0.7});
    auto f = [&] { return std::sin(x[0]) * std::exp(x[0]); };
    const Tensor<double> g = Tensor<double>::vector({std::exp(0.7) * (std::cos(0.7) + std::sin(0.7))});
    auto err = [&](double eps) {
        GradcheckOptions opt;
        opt.eps = eps;
        return finite_diff_gradcheck(f, {{"x", &x}}, {g}, opt).max_error();
    };
    const double big = err(1e-2), mid = err(1e-5), tiny = err(1e-12);
    EXPECT_LT(mid, big);
    EXPECT_LT(mid, tiny);
    EXPECT_LT(mid, 1e-9);
}

TEST(Gradcheck, ProbeModeOnLargeBundles) {
    Rng rng(3);
    Tensor<double> w = random_normal<double>(rng, {40, 40});
    auto loss = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) s += std::cos(w[i]) * (1.0 + 0.01 * i);
        return s;
    };
    Tensor<double> g(w.shape());
    for (std::size_t i = 0; i < w.size(); ++i) g[i] = -std::sin(w[i]) * (1.0 + 0.01 * i);
    const auto ok = finite_diff_gradcheck(loss, {{"w", &w}}, {g});
    EXPECT_TRUE(ok.groups[0].probed);
    EXPECT_LT(ok.max_error(), 1e-6);
    g[17] += 0.5;
    const auto bad = finite_diff_gradcheck(loss, {{"w", &w}}, {g});
    EXPECT_GT(bad.max_error(), 1e-4);
}

TEST(Gradcheck, NonFiniteLossThrows) {
    Tensor<double> x = Tensor<double>::vector({0.0});
    const Tensor<double> g = Tensor<double>::vector({1.0});
    try {
        finite_diff_gradcheck([&] { return x[0] > 0 ? std::log(-1.0) : x[0]; }, {{"x", &x}}, {g});
        FAIL() << "expected GradcheckError";
    } catch (const GradcheckError& e) {
        EXPECT_EQ(e.group(), "x");
    }
    EXPECT_EQ(x[0], 0.0);
}

TEST(Needle, NoiselessSampleHasOnePlantedPatch) {
    NeedleTaskSpec spec;
    spec.noise_std = 0.0;
    const auto codebook = needle_codebook<double>(spec);
    for (const auto& s : gen_needle_dataset<double>(spec, 20)) {
        std::size_t nonzero_patches = 0;
        for (std::size_t p = 0; p < spec.frames * spec.patches; ++p) {
            bool any = false;
            for (std::size_t t = 0; t < spec.d; ++t) any = any || s.video[p * spec.d + t] != 0.0;
            nonzero_patches += any;
        }
        EXPECT_EQ(nonzero_patches, 1u);
        for (std::size_t t = 0; t < spec.d; ++t)
            EXPECT_EQ(s.video[(s.frame * spec.patches + s.patch) * spec.d + t], codebook(s.label, t));
    }
}

TEST(Needle, DeterministicAndIndexAddressable) {
    NeedleTaskSpec spec;
    const auto a = gen_needle_dataset<float>(spec, 6);
    const auto b = gen_needle_dataset<float>(spec, 3, 3);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(a[3 + i].video, b[i].video);
        EXPECT_EQ(a[3 + i].label, b[i].label);
    }
    spec.seed = 8;
    EXPECT_NE(gen_needle_dataset<float>(spec, 1)[0].video, a[0].video);
}

TEST(Needle, LabelsAreUniform) {
    NeedleTaskSpec spec;
    spec.frames = 1;
    spec.patches = 1;
    spec.d = 1;
    const std::size_t n = 10000;
    std::vector<std::size_t> hist(spec.codebook_size);
    for (const auto& s : gen_needle_dataset<float>(spec, n)) ++hist[s.label];
    const double p = 1.0 / spec.codebook_size, mean = n * p, sigma = std::sqrt(n * p * (1 - p));
    for (auto c : hist) EXPECT_LT(std::abs(double(c) - mean), 4 * sigma);
}

TEST(Needle, RejectsDegenerateCodebook) {
    NeedleTaskSpec spec;
    spec.codebook_size = 1;
    EXPECT_THROW(needle_codebook<float>(spec), ParameterError);
}

// Every parameter group of compressor + head, 64-bit, several seeds.
TEST(PipelineGradients, AllGroupsMatchFiniteDifferences) {
    const auto cfg = probe_config();
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        auto model = init_mambamia<double>(cfg, seed);
        condition_for_gradcheck(model, seed);
        Rng hr(seed + 100);
        auto head = init_probe_head<double>(hr, cfg.d, 3);
        auto spec = spec_for(cfg, 2, 3);
        spec.seed = seed;
        const auto sample = gen_needle_dataset<double>(spec, 1).front();
        auto mg = zeros_like(model);
        ProbeHead<double> hg{zeros_like(head.w), zeros_like(head.b)};
        probe_forward_backward(model, head, sample.video, sample.label, &mg, &hg);
        auto params = collect_params(model, head);
        std::vector<Tensor<double>> analytic;
        for (const auto& g : collect_params(mg, hg)) analytic.push_back(*g.tensor);
        GradcheckOptions opt;
        opt.seed = seed;
        const auto r = finite_diff_gradcheck(
            [&] { return probe_forward_backward(model, head, sample.video, sample.label).loss; }, params, analytic,
            opt);
        std::set<std::string> names;
        for (const auto& g : r.groups) {
            names.insert(g.name);
            EXPECT_LT(g.max_rel_error, 1e-4) << "seed " << seed << " group " << g.name;
        }
        for (const char* n : {"query", "layer0.fwd.a_log", "layer0.bwd.conv", "layer0.fwd.w_in", "layer0.bwd.w_out",
                              "layer0.merge", "layer0.agg.w_alpha", "layer0.agg.b_alpha",
                              "layer0.agg.w_g", "layer0.agg.b_g", "head.w", "head.b"})
            EXPECT_TRUE(names.count(n)) << n;
    }
}

TEST(Training, ZeroStepsIsNearChance) {
    const auto cfg = probe_config();
    TrainOptions opt;
    opt.steps = 0;
    opt.eval_samples = 400;
    const auto r = train_needle_probe<float>(cfg, spec_for(cfg), opt);
    EXPECT_DOUBLE_EQ(r.chance, 0.25);
    EXPECT_TRUE(r.losses.empty());
    EXPECT_NEAR(r.accuracy, r.chance, 0.12);
}

TEST(Training, LossDecreasesEarly) {
    const auto cfg = probe_config();
    TrainOptions opt;
    opt.steps = 100;
    opt.eval_samples = 16;
    std::vector<double> seen;
    const auto r = train_needle_probe<float>(cfg, spec_for(cfg), opt, [&](std::size_t, double l) { seen.push_back(l); });
    ASSERT_EQ(seen.size(), 100u);
    EXPECT_EQ(seen, r.losses);
    const double head = std::accumulate(seen.begin(), seen.begin() + 20, 0.0) / 20;
    const double tail = std::accumulate(seen.end() - 20, seen.end(), 0.0) / 20;
    EXPECT_LT(tail, head);
}

TEST(Training, DeterministicPerSeed) {
    const auto cfg = probe_config();
    TrainOptions opt;
    opt.steps = 5;
    opt.eval_samples = 32;
    const auto a = train_needle_probe<float>(cfg, spec_for(cfg), opt);
    const auto b = train_needle_probe<float>(cfg, spec_for(cfg), opt);
    EXPECT_EQ(a.losses, b.losses);
    EXPECT_EQ(a.accuracy, b.accuracy);
}

TEST(Training, DivergenceReportsLastGoodStep) {
    const auto cfg = probe_config();
    TrainOptions opt;
    opt.steps = 50;
    opt.lr = 1e30;
    TrainReport partial;
    try {
        train_needle_probe<float>(cfg, spec_for(cfg), opt, {}, &partial);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_GE(e.last_good_step(), 0);
        EXPECT_TRUE(partial.diverged);
        EXPECT_EQ(partial.last_good_step, e.last_good_step());
        ASSERT_EQ(partial.losses.size(), std::size_t(e.last_good_step() + 1));
        for (double l : partial.losses) EXPECT_TRUE(std::isfinite(l));
        EXPECT_EQ(e.last_good_loss(), partial.losses.back());
    }
}

TEST(Training, WidthMismatchIsRejected) {
    const auto cfg = probe_config();
    auto spec = spec_for(cfg);
    spec.d = 9;
    EXPECT_THROW(train_needle_probe<float>(cfg, spec, TrainOptions{}), ConfigError);
}

TEST(Training, ReportMatchesSchema) {
    const auto cfg = probe_config();
    TrainOptions opt;
    opt.steps = 3;
    opt.eval_samples = 8;
    const auto j = train_needle_probe<float>(cfg, spec_for(cfg), opt).to_json();
    EXPECT_EQ(schema::violations("report.schema.json", j), std::vector<std::string>{});
    EXPECT_EQ(j["losses"].size(), 3u);
    auto broken = j;
    broken.erase("accuracy");
    broken["surprise"] = 1;
    EXPECT_EQ(schema::violations("report.schema.json", broken).size(), 2u);
    auto bad_cfg = j;
    bad_cfg["config"]["s"] = 0.5;
    EXPECT_FALSE(schema::violations("report.schema.json", bad_cfg).empty());
}
