#pragma once

// Desk-scale training and gradient verification: Adam with warm-up + cosine decay,
// a central-difference gradient oracle, and the synthetic needle-retrieval task.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "sstc/errors.hpp"
#include "sstc/io.hpp"
#include "sstc/pipeline.hpp"
#include "sstc/rng.hpp"
#include "sstc/tensor.hpp"

namespace sstc {

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T>* tensor;
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::int64_t t = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_adam = 1e-8;
};

/// Linear warm-up over the first `warmup_fraction` of updates, then cosine decay to zero.
/// `step` is the 1-based index of the update being applied.
inline double lr_multiplier(std::int64_t step, std::int64_t total_steps, double warmup_fraction = 0.03) {
    if (total_steps <= 0) return 1.0;
    const auto warmup = std::max<std::int64_t>(1, std::int64_t(std::ceil(warmup_fraction * double(total_steps))));
    if (step < warmup) return double(step) / double(warmup);
    if (total_steps == warmup) return 1.0;
    const double progress = double(step - warmup) / double(total_steps - warmup);
    return 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

/// One bias-corrected Adam update. Moments are created on first use.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads, AdamState& state,
               double lr_scale = 1.0) {
    if (params.size() != grads.size()) throw DimensionError("adam_step: parameter/gradient count mismatch");
    if (state.m.empty()) {
        for (const auto* p : params) {
            state.m.emplace_back(p->size(), 0.0);
            state.v.emplace_back(p->size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw DimensionError("adam_step: optimizer state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i]->shape() != grads[i]->shape() || state.m[i].size() != params[i]->size())
            throw DimensionError("adam_step: gradient shape " + shape_string(grads[i]->shape()) +
                                 " does not match parameter " + shape_string(params[i]->shape()));
    ++state.t;
    const double c1 = 1.0 - std::pow(state.beta1, double(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, double(state.t));
    const double lr = state.lr * lr_scale;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        Tensor<T>& p = *params[i];
        const Tensor<T>& g = *grads[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = double(g[j]);
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            const double mhat = m[j] / c1, vhat = v[j] / c2;
            p[j] = static_cast<T>(double(p[j]) - lr * mhat / (std::sqrt(vhat) + state.eps_adam));
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradcheckOptions {
    double eps = 1e-5;
    std::size_t probe_threshold = 1000;  // bundles larger than this are checked along random directions
    std::size_t probes_per_group = 6;
    std::uint64_t seed = 0;
};

struct GradcheckGroup {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checks = 0;
    bool probed = false;
};

struct GradcheckReport {
    std::vector<GradcheckGroup> groups;

    double max_error() const {
        double m = 0.0;
        for (const auto& g : groups) m = std::max(m, g.max_rel_error);
        return m;
    }
    /// Groups whose error exceeds `tol`.
    std::vector<std::string> failures(double tol) const {
        std::vector<std::string> out;
        for (const auto& g : groups)
            if (!(g.max_rel_error <= tol)) out.push_back(g.name);
        return out;
    }
};

/// Loss became non-finite while perturbing a parameter group.
class GradcheckError : public Error {
public:
    explicit GradcheckError(std::string group)
        : Error("non-finite loss while perturbing parameter group \"" + group + "\""), group_(std::move(group)) {}
    const std::string& group() const { return group_; }

private:
    std::string group_;
};

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares `analytic[i]` against central differences of `loss` with respect to `params[i]`.
/// `loss` must read the current parameter values; they are restored before returning.
inline GradcheckReport finite_diff_gradcheck(const std::function<double()>& loss,
                                             const std::vector<NamedParam<double>>& params,
                                             const std::vector<Tensor<double>>& analytic,
                                             const GradcheckOptions& opt = {}) {
    if (params.size() != analytic.size()) throw DimensionError("gradcheck: parameter/gradient count mismatch");
    std::size_t total = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].tensor->shape() != analytic[i].shape())
            throw DimensionError("gradcheck: gradient for " + params[i].name + " has wrong shape");
        total += params[i].tensor->size();
    }
    const bool probe = total > opt.probe_threshold;
    Rng rng(opt.seed);
    GradcheckReport report;

    auto eval = [&](const std::string& group) {
        const double f = loss();
        if (!std::isfinite(f)) throw GradcheckError(group);
        return f;
    };

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<double>& theta = *params[i].tensor;
        const Tensor<double>& g = analytic[i];
        GradcheckGroup group{params[i].name, 0.0, 0, probe};
        const std::vector<double> original = theta.values();
        try {
            if (!probe) {
                for (std::size_t j = 0; j < theta.size(); ++j) {
                    const double saved = theta[j];
                    theta[j] = saved + opt.eps;
                    const double fp = eval(group.name);
                    theta[j] = saved - opt.eps;
                    const double fm = eval(group.name);
                    theta[j] = saved;
                    group.max_rel_error =
                        std::max(group.max_rel_error, relative_error(g[j], (fp - fm) / (2 * opt.eps)));
                    ++group.checks;
                }
            } else {
                // A single random direction can nearly cancel the gradient, leaving a directional
                // derivative at the roundoff floor, so probes are scored together: worst absolute
                // deviation over the largest directional derivative seen.
                const std::vector<double> saved = theta.values();
                double worst = 0.0, scale = 1e-8;
                for (std::size_t p = 0; p < opt.probes_per_group; ++p) {
                    std::vector<double> dir = rng_standard_normal<double>(rng, theta.size());
                    double an = 0.0;
                    for (std::size_t j = 0; j < dir.size(); ++j) an += g[j] * dir[j];
                    for (std::size_t j = 0; j < dir.size(); ++j) theta[j] = saved[j] + opt.eps * dir[j];
                    const double fp = eval(group.name);
                    for (std::size_t j = 0; j < dir.size(); ++j) theta[j] = saved[j] - opt.eps * dir[j];
                    const double fm = eval(group.name);
                    theta.values() = saved;
                    const double fd = (fp - fm) / (2 * opt.eps);
                    worst = std::max(worst, std::abs(an - fd));
                    scale = std::max({scale, std::abs(an), std::abs(fd)});
                    ++group.checks;
                }
                group.max_rel_error = worst / scale;
            }
        } catch (...) {
            theta.values() = original;  // leave the caller's parameters untouched
            throw;
        }
        report.groups.push_back(std::move(group));
    }
    return report;
}

/// Moves a freshly initialised model to a better-conditioned point for gradient checking.
/// At init the step sizes are tiny, so scan-parameter gradients sit near the finite-difference
/// noise floor; redrawing them in [0.3, 1] keeps every group's gradient well above it.
template <typename T>
void condition_for_gradcheck(MambaMiaModel<T>& model, std::uint64_t seed) {
    Rng rng(seed ^ 0x6763ULL);
    model.visit([&](const std::string& name, Tensor<T>& t) {
        if (name.ends_with("b_delta"))
            for (auto& v : t.values()) v = inverse_softplus(T(rng.uniform(0.3, 1.0)));
    });
}

// ---------------------------------------------------------------------------
// Needle retrieval task
// ---------------------------------------------------------------------------

struct NeedleTaskSpec {
    std::size_t frames = 8;    // M
    std::size_t patches = 16;  // N
    std::size_t d = 32;
    std::size_t codebook_size = 8;
    double noise_std = 0.1;
    std::uint64_t seed = 7;
};

template <typename T>
struct NeedleSample {
    Tensor<T> video;  // [M × N × d]
    std::size_t label = 0;
    std::size_t frame = 0;
    std::size_t patch = 0;
};

/// Class vectors, one row per label, drawn once from the task seed.
template <typename T>
Tensor<T> needle_codebook(const NeedleTaskSpec& spec) {
    if (spec.codebook_size < 2) throw ParameterError("codebook_size must be >= 2");
    Rng rng(spec.seed);
    return random_normal<T>(rng, {spec.codebook_size, spec.d}, 1.0);
}

/// Samples [first, first + count). Each sample has its own stream split from the task seed,
/// so any index range can be generated independently.
template <typename T>
std::vector<NeedleSample<T>> gen_needle_dataset(const NeedleTaskSpec& spec, std::size_t count,
                                                std::uint64_t first = 0) {
    const Tensor<T> codebook = needle_codebook<T>(spec);
    const Rng root(spec.seed ^ 0x6E656564'6C650000ULL);
    std::vector<NeedleSample<T>> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = root.split(first + i);
        NeedleSample<T> s;
        s.label = static_cast<std::size_t>(rng.below(spec.codebook_size));
        s.frame = static_cast<std::size_t>(rng.below(spec.frames));
        s.patch = static_cast<std::size_t>(rng.below(spec.patches));
        s.video = Tensor<T>({spec.frames, spec.patches, spec.d});
        if (spec.noise_std > 0.0)
            for (auto& v : s.video.values()) v = static_cast<T>(spec.noise_std * rng.normal());
        std::copy_n(codebook.data() + s.label * spec.d, spec.d,
                    s.video.data() + (s.frame * spec.patches + s.patch) * spec.d);
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Probe: mean-pooled retained queries → linear head → cross-entropy
// ---------------------------------------------------------------------------

template <typename T>
struct ProbeHead {
    Tensor<T> w;  // [d × classes]
    Tensor<T> b;  // [classes]

    template <typename F>
    void visit(F&& f) {
        f(std::string("head.w"), w);
        f(std::string("head.b"), b);
    }
};

template <typename T>
ProbeHead<T> init_probe_head(Rng& rng, std::size_t d, std::size_t classes) {
    return {random_normal<T>(rng, {d, classes}, 1.0 / std::sqrt(double(d))), Tensor<T>({classes})};
}

template <typename T>
std::vector<NamedParam<T>> collect_params(MambaMiaModel<T>& model, ProbeHead<T>& head) {
    std::vector<NamedParam<T>> out;
    model.visit([&](const std::string& n, Tensor<T>& t) { out.push_back({n, &t}); });
    head.visit([&](const std::string& n, Tensor<T>& t) { out.push_back({n, &t}); });
    return out;
}

template <typename T>
struct ProbeOutput {
    double loss = 0.0;
    std::size_t predicted = 0;
};

/// Loss of one sample. When `model_grads`/`head_grads` are given, gradients scaled by
/// `grad_scale` are accumulated into them.
template <typename T>
ProbeOutput<T> probe_forward_backward(const MambaMiaModel<T>& model, const ProbeHead<T>& head,
                                      const Tensor<T>& video, std::size_t label,
                                      MambaMiaModel<T>* model_grads = nullptr, ProbeHead<T>* head_grads = nullptr,
                                      T grad_scale = T{1}) {
    const bool train = model_grads != nullptr;
    CompressCache<T> cache;
    const Tensor<T> queries = mambamia_compress(video, model, CompressionMode::joint, train ? &cache : nullptr);
    const std::size_t m = queries.dim(0), q = queries.dim(1), d = queries.dim(2), classes = head.b.size();
    const auto kept = secondary_sample_indices(m, model.cfg.s);
    const T inv_count = T{1} / T(kept.size() * q);

    Tensor<T> pooled({1, d});
    for (std::size_t f : kept)
        for (std::size_t j = 0; j < q; ++j)
            for (std::size_t t = 0; t < d; ++t) pooled[t] += queries[(f * q + j) * d + t] * inv_count;

    const Tensor<T> logits = affine(pooled, head.w, head.b);
    const std::vector<T> probs = softmax_masked(logits.row(0), std::vector<bool>(classes, true));
    ProbeOutput<T> out;
    out.loss = -std::log(std::max(double(probs[label]), 1e-300));
    out.predicted = std::size_t(std::max_element(logits.values().begin(), logits.values().end()) -
                                logits.values().begin());
    if (!train) return out;

    Tensor<T> dlogits({1, classes});
    for (std::size_t c = 0; c < classes; ++c) dlogits[c] = grad_scale * (probs[c] - (c == label ? T{1} : T{0}));
    accumulate_at_b(head_grads->w, pooled, dlogits);
    accumulate_col_sums(head_grads->b, dlogits);
    const Tensor<T> dpooled = matmul_bt(dlogits, head.w);

    Tensor<T> dq(queries.shape());
    for (std::size_t f : kept)
        for (std::size_t j = 0; j < q; ++j)
            for (std::size_t t = 0; t < d; ++t) dq[(f * q + j) * d + t] = dpooled[t] * inv_count;
    mambamia_compress_backward(model, cache, dq, *model_grads);
    return out;
}

struct TrainOptions {
    std::size_t steps = 2000;
    std::uint64_t seed = 7;
    std::size_t batch = 4;
    double lr = 3e-3;
    std::size_t eval_samples = 512;
};

struct TrainReport {
    MambaMiaConfig cfg;
    NeedleTaskSpec task;
    TrainOptions options;
    std::vector<double> losses;  // mean minibatch loss per step
    double accuracy = 0.0;
    double chance = 0.0;
    bool diverged = false;
    std::int64_t last_good_step = -1;

    nlohmann::json to_json() const {
        return {{"task", "needle"},
                {"seed", options.seed},
                {"steps", options.steps},
                {"batch", options.batch},
                {"lr", options.lr},
                {"config", config_to_json(cfg)},
                {"task_spec",
                 {{"frames", task.frames},
                  {"patches", task.patches},
                  {"d", task.d},
                  {"codebook_size", task.codebook_size},
                  {"noise_std", task.noise_std},
                  {"seed", task.seed}}},
                {"losses", losses},
                {"final_loss", losses.empty() ? nlohmann::json(nullptr) : nlohmann::json(losses.back())},
                {"accuracy", accuracy},
                {"chance", chance},
                {"diverged", diverged},
                {"last_good_step", last_good_step}};
    }
};

/// Held-out samples live far from the training index range.
inline constexpr std::uint64_t kHeldOutOffset = 1ULL << 40;

template <typename T>
double evaluate_probe(const MambaMiaModel<T>& model, const ProbeHead<T>& head, const NeedleTaskSpec& spec,
                      std::size_t count) {
    const auto samples = gen_needle_dataset<T>(spec, count, kHeldOutOffset);
    std::size_t correct = 0;
    for (const auto& s : samples) correct += probe_forward_backward(model, head, s.video, s.label).predicted == s.label;
    return count ? double(correct) / double(count) : 0.0;
}

/// Trains compressor + head on fresh samples each step and reports held-out accuracy.
/// Throws DivergenceError if the loss becomes non-finite; `report` then holds the history.
template <typename T = float>
TrainReport train_needle_probe(const MambaMiaConfig& cfg, const NeedleTaskSpec& spec, const TrainOptions& opt,
                               const std::function<void(std::size_t, double)>& on_step = {},
                               TrainReport* partial = nullptr) {
    cfg.validate();
    if (spec.d != cfg.d) throw ConfigError("d", "task width does not match model width");
    TrainReport report{cfg, spec, opt, {}, 0.0, 1.0 / double(spec.codebook_size), false, -1};

    MambaMiaModel<T> model = init_mambamia<T>(cfg, opt.seed);
    Rng head_rng(opt.seed ^ 0x68656164ULL);
    ProbeHead<T> head = init_probe_head<T>(head_rng, cfg.d, spec.codebook_size);

    AdamState adam;
    adam.lr = opt.lr;
    const std::size_t batch = std::max<std::size_t>(1, opt.batch);
    for (std::size_t step = 0; step < opt.steps; ++step) {
        MambaMiaModel<T> mg = zeros_like(model);
        ProbeHead<T> hg{zeros_like(head.w), zeros_like(head.b)};
        const auto samples = gen_needle_dataset<T>(spec, batch, std::uint64_t(step) * batch);
        double loss = 0.0;
        for (const auto& s : samples)
            loss += probe_forward_backward(model, head, s.video, s.label, &mg, &hg, T{1} / T(batch)).loss;
        loss /= double(batch);
        if (!std::isfinite(loss)) {
            report.diverged = true;
            if (partial) *partial = report;
            throw DivergenceError(report.last_good_step, report.losses.empty() ? NAN : report.losses.back());
        }
        report.losses.push_back(loss);
        report.last_good_step = std::int64_t(step);
        if (on_step) on_step(step, loss);

        auto params = collect_params(model, head);
        auto grads = collect_params(mg, hg);
        std::vector<Tensor<T>*> p;
        std::vector<const Tensor<T>*> g;
        for (std::size_t i = 0; i < params.size(); ++i) {
            p.push_back(params[i].tensor);
            g.push_back(grads[i].tensor);
        }
        adam_step(p, g, adam, lr_multiplier(std::int64_t(step) + 1, std::int64_t(opt.steps)));
    }
    report.accuracy = evaluate_probe(model, head, spec, opt.eval_samples);
    return report;
}

}  // namespace sstc
