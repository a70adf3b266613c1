#pragma once

// Diagonal selective state-space scan.
//
//   h_k = exp(Δ_k A) ⊙ h_{k-1} + φ(Δ_k A) Δ_k B_k ⊙ x_k,    y_k = Σ_s C_k[s] h_k[:, s]
//
// with φ(z) = (e^z - 1)/z (zero-order hold), A = -exp(a_log) per (channel, state),
// Δ_k = softplus(x_k·w_delta + b_delta) and B_k = x_k·w_b, C_k = x_k·w_c shared by
// all channels. Forward and backward are both Θ(T·d_inner·d_state).

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "sstc/errors.hpp"
#include "sstc/rng.hpp"
#include "sstc/tensor.hpp"

namespace sstc {

template <typename T>
struct SelectiveSsmParams {
    Tensor<T> a_log;    // [d_inner × d_state]
    Tensor<T> w_b;      // [d_inner × d_state]
    Tensor<T> w_c;      // [d_inner × d_state]
    Tensor<T> w_delta;  // [d_inner × 1]
    Tensor<T> b_delta;  // [1]

    std::size_t d_inner() const { return a_log.rows(); }
    std::size_t d_state() const { return a_log.cols(); }

    static SelectiveSsmParams zeros(std::size_t d_inner, std::size_t d_state) {
        return {Tensor<T>({d_inner, d_state}), Tensor<T>({d_inner, d_state}), Tensor<T>({d_inner, d_state}),
                Tensor<T>({d_inner, 1}), Tensor<T>({1})};
    }

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        f(prefix + "a_log", a_log);
        f(prefix + "w_b", w_b);
        f(prefix + "w_c", w_c);
        f(prefix + "w_delta", w_delta);
        f(prefix + "b_delta", b_delta);
    }
};

/// a_log = log(1..d_state) per channel; b_delta puts softplus(b_delta) log-uniformly in [1e-3, 1e-1].
template <typename T>
SelectiveSsmParams<T> init_selective_ssm(Rng& rng, std::size_t d_inner, std::size_t d_state) {
    auto p = SelectiveSsmParams<T>::zeros(d_inner, d_state);
    for (std::size_t c = 0; c < d_inner; ++c)
        for (std::size_t s = 0; s < d_state; ++s) p.a_log(c, s) = static_cast<T>(std::log(double(s + 1)));
    const double proj_scale = 1.0 / std::sqrt(double(d_inner));
    p.w_b = random_normal<T>(rng, {d_inner, d_state}, proj_scale);
    p.w_c = random_normal<T>(rng, {d_inner, d_state}, proj_scale);
    p.w_delta = random_normal<T>(rng, {d_inner, 1}, 0.1 * proj_scale);
    const double delta0 = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    p.b_delta[0] = static_cast<T>(inverse_softplus(delta0));
    return p;
}

// ---------------------------------------------------------------------------
// Zero-order-hold discretization
// ---------------------------------------------------------------------------

inline constexpr double kZohSeriesThreshold = 1e-6;

/// φ(z) = (e^z - 1)/z, with the first-order series below the switch point.
template <typename T>
T zoh_phi(T z) {
    if (std::abs(z) < T(kZohSeriesThreshold)) return T{1} + z / T{2};
    return std::expm1(z) / z;
}

/// φ'(z) = (e^z - φ(z))/z, given e^z and φ(z). Taylor series near zero where that cancels.
template <typename T>
T zoh_phi_grad(T z, T exp_z, T phi) {
    if (std::abs(z) < T(0.1)) {
        // Σ_{n≥1} n z^{n-1} / (n+1)!
        return T(1.0 / 2) +
               z * (T(2.0 / 6) + z * (T(3.0 / 24) + z * (T(4.0 / 120) + z * (T(5.0 / 720) + z * T(6.0 / 5040)))));
    }
    return (exp_z - phi) / z;
}

template <typename T>
T zoh_phi_grad(T z) {
    return zoh_phi_grad(z, std::exp(z), zoh_phi(z));
}

template <typename T>
struct ZohPair {
    T a_bar;
    T b_bar;
};

template <typename T>
ZohPair<T> discretize_zoh(T a, T b, T delta) {
    if (!(delta > T{0})) throw ParameterError("discretize_zoh: step size must be positive");
    if (!(a < T{0})) throw ParameterError("discretize_zoh: state coefficient must be negative");
    const T z = delta * a;
    return {std::exp(z), zoh_phi(z) * delta * b};
}

// ---------------------------------------------------------------------------
// Scan
// ---------------------------------------------------------------------------

/// Per-step intermediates kept by a forward pass for the matching backward pass.
template <typename T>
struct ScanCache {
    const SelectiveSsmParams<T>* params = nullptr;
    Tensor<T> x;                 // [T × d_inner]
    std::vector<T> delta_logit;  // [T]
    std::vector<T> delta;        // [T]
    Tensor<T> b;                 // [T × d_state]
    Tensor<T> c;                 // [T × d_state]
    Tensor<T> a_bar;             // [T × d_inner × d_state]
    Tensor<T> b_bar;             // [T × d_inner × d_state]
    Tensor<T> phi;               // φ(Δ_k A), [T × d_inner × d_state]
    Tensor<T> h;                 // [T × d_inner × d_state]

    std::size_t steps() const { return delta.size(); }
    bool filled() const { return params != nullptr && !delta.empty(); }
};

template <typename T>
struct ScanResult {
    Tensor<T> y;
    ScanCache<T> cache;
};

template <typename T>
struct ScanGradients {
    Tensor<T> dx;
    SelectiveSsmParams<T> dparams;
};

namespace detail {

template <typename T>
Tensor<T> state_matrix(const Tensor<T>& a_log) {
    Tensor<T> a(a_log.shape());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(a_log[i]);
    return a;
}

/// Core recurrence given per-step Δ_k, B_k, C_k. Shared by the selective and the
/// time-invariant entry points.
template <typename T>
Tensor<T> run_scan(const Tensor<T>& x, const Tensor<T>& a, const std::vector<T>& delta, const Tensor<T>& b,
                   const Tensor<T>& c, ScanCache<T>* cache) {
    const std::size_t steps = x.rows(), d_inner = x.cols(), d_state = a.cols();
    Tensor<T> y({steps, d_inner});
    std::vector<T> h(d_inner * d_state, T{0});
    if (cache) {
        cache->a_bar = Tensor<T>({steps, d_inner, d_state});
        cache->b_bar = Tensor<T>({steps, d_inner, d_state});
        cache->phi = Tensor<T>({steps, d_inner, d_state});
        cache->h = Tensor<T>({steps, d_inner, d_state});
    }
    const std::size_t plane = d_inner * d_state;
    for (std::size_t k = 0; k < steps; ++k) {
        const T dk = delta[k];
        const T* bk = b.data() + k * d_state;
        const T* ck = c.data() + k * d_state;
        const T* xk = x.data() + k * d_inner;
        T* yk = y.data() + k * d_inner;
        for (std::size_t ch = 0; ch < d_inner; ++ch) {
            const T* ach = a.data() + ch * d_state;
            T* hch = h.data() + ch * d_state;
            T acc = 0;
            for (std::size_t s = 0; s < d_state; ++s) {
                const T z = dk * ach[s];
                // one transcendental per element: e^z = 1 + expm1(z), φ(z) = expm1(z)/z
                const T em = std::expm1(z);
                const T ab = em + T{1};
                const T phi = std::abs(z) < T(kZohSeriesThreshold) ? T{1} + z / T{2} : em / z;
                const T bb = phi * dk * bk[s];
                hch[s] = ab * hch[s] + bb * xk[ch];
                acc += ck[s] * hch[s];
                if (cache) {
                    const std::size_t idx = k * plane + ch * d_state + s;
                    cache->a_bar[idx] = ab;
                    cache->b_bar[idx] = bb;
                    cache->phi[idx] = phi;
                }
            }
            yk[ch] = acc;
        }
        if (cache) std::copy(h.begin(), h.end(), cache->h.data() + k * plane);
    }
    return y;
}

template <typename T>
void require_scan_shapes(const Tensor<T>& x, const SelectiveSsmParams<T>& p) {
    require_matrix(x, "scan input");
    const std::size_t di = p.d_inner(), ds = p.d_state();
    require(x.rows() >= 1, "scan requires at least one step");
    require(x.cols() == di, "scan input width " + std::to_string(x.cols()) + " != d_inner " + std::to_string(di));
    require(p.w_b.shape() == Shape{di, ds} && p.w_c.shape() == Shape{di, ds},
            "scan projections must be [d_inner x d_state], got " + shape_string(p.w_b.shape()) + " and " +
                shape_string(p.w_c.shape()));
    require(p.w_delta.size() == di && p.b_delta.size() == 1, "scan step-size parameters have wrong shape");
}

template <typename T>
Tensor<T> selective_scan_impl(const Tensor<T>& x, const SelectiveSsmParams<T>& p, ScanCache<T>* cache) {
    require_scan_shapes(x, p);
    const std::size_t steps = x.rows(), di = p.d_inner();
    std::vector<T> logit(steps), delta(steps);
    for (std::size_t k = 0; k < steps; ++k) {
        T r = p.b_delta[0];
        for (std::size_t ch = 0; ch < di; ++ch) r += x(k, ch) * p.w_delta[ch];
        logit[k] = r;
        delta[k] = softplus(r);
    }
    Tensor<T> b = affine(x, p.w_b);
    Tensor<T> c = affine(x, p.w_c);
    Tensor<T> y = run_scan(x, state_matrix(p.a_log), delta, b, c, cache);
    if (cache) {
        cache->params = &p;
        cache->x = x;
        cache->delta_logit = std::move(logit);
        cache->delta = std::move(delta);
        cache->b = std::move(b);
        cache->c = std::move(c);
    }
    return y;
}

}  // namespace detail

/// Forward scan without retaining intermediates. Memory is O(d_inner·d_state) beyond the output.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const SelectiveSsmParams<T>& params) {
    return detail::selective_scan_impl<T>(x, params, nullptr);
}

/// Forward scan that also returns the cache consumed by `selective_scan_backward`.
/// The cache refers to `params`, which must outlive it.
template <typename T>
ScanResult<T> selective_scan_forward(const Tensor<T>& x, const SelectiveSsmParams<T>& params) {
    ScanResult<T> r;
    r.y = detail::selective_scan_impl<T>(x, params, &r.cache);
    return r;
}

/// Time-invariant scan: constant B, C (length d_state) and a fixed step size.
template <typename T>
Tensor<T> classical_scan(const Tensor<T>& x, const Tensor<T>& a_log, const std::vector<T>& b,
                         const std::vector<T>& c, T delta) {
    detail::require_matrix(x, "scan input");
    const std::size_t steps = x.rows(), ds = a_log.cols();
    detail::require(b.size() == ds && c.size() == ds, "classical_scan: B/C length must equal d_state");
    if (!(delta > T{0})) throw ParameterError("classical_scan: step size must be positive");
    Tensor<T> bt({steps, ds}), ct({steps, ds});
    for (std::size_t k = 0; k < steps; ++k)
        for (std::size_t s = 0; s < ds; ++s) {
            bt(k, s) = b[s];
            ct(k, s) = c[s];
        }
    return detail::run_scan(x, detail::state_matrix(a_log), std::vector<T>(steps, delta), bt, ct,
                            static_cast<ScanCache<T>*>(nullptr));
}

/// Reverse-mode pass: gradients of Σ dy ⊙ y with respect to x and every parameter.
template <typename T>
ScanGradients<T> selective_scan_backward(const ScanCache<T>& cache, const Tensor<T>& dy) {
    if (!cache.filled()) throw ContractError("selective_scan_backward: cache was not produced by a forward pass");
    const SelectiveSsmParams<T>& p = *cache.params;
    const std::size_t steps = cache.steps(), di = p.d_inner(), ds = p.d_state();
    if (dy.shape() != Shape{steps, di} || cache.x.shape() != Shape{steps, di} ||
        cache.h.size() != steps * di * ds) {
        throw ContractError("selective_scan_backward: cotangent " + shape_string(dy.shape()) +
                            " does not match cached forward of " + std::to_string(steps) + " steps x " +
                            std::to_string(di) + " channels");
    }

    ScanGradients<T> g{Tensor<T>({steps, di}), SelectiveSsmParams<T>::zeros(di, ds)};
    const Tensor<T> a = detail::state_matrix(p.a_log);
    Tensor<T> da({di, ds});
    std::vector<T> carry(di * ds, T{0});
    std::vector<T> db(ds), dc(ds);
    const std::size_t plane = di * ds;

    for (std::size_t kk = steps; kk-- > 0;) {
        const T dk = cache.delta[kk];
        const T* xk = cache.x.data() + kk * di;
        const T* bk = cache.b.data() + kk * ds;
        const T* ck = cache.c.data() + kk * ds;
        const T* dyk = dy.data() + kk * di;
        const T* hk = cache.h.data() + kk * plane;
        const T* hprev = kk > 0 ? cache.h.data() + (kk - 1) * plane : nullptr;
        const T* abk = cache.a_bar.data() + kk * plane;
        const T* bbk = cache.b_bar.data() + kk * plane;
        const T* phik = cache.phi.data() + kk * plane;
        T* dxk = g.dx.data() + kk * di;
        std::fill(db.begin(), db.end(), T{0});
        std::fill(dc.begin(), dc.end(), T{0});
        T ddelta = 0;

        for (std::size_t ch = 0; ch < di; ++ch) {
            for (std::size_t s = 0; s < ds; ++s) {
                const std::size_t idx = ch * ds + s;
                const T dh = carry[idx] + dyk[ch] * ck[s];
                dc[s] += dyk[ch] * hk[idx];
                const T hp = hprev ? hprev[idx] : T{0};
                const T z = dk * a[idx];
                const T dab = dh * hp;
                const T dbb = dh * xk[ch];
                dxk[ch] += dh * bbk[idx];
                const T phi = phik[idx];
                const T dz = dab * abk[idx] + dbb * dk * bk[s] * zoh_phi_grad(z, abk[idx], phi);
                ddelta += dbb * phi * bk[s] + dz * a[idx];
                db[s] += dbb * phi * dk;
                da[idx] += dz * dk;
                carry[idx] = dh * abk[idx];
            }
        }

        const T dr = ddelta * sigmoid(cache.delta_logit[kk]);
        g.dparams.b_delta[0] += dr;
        for (std::size_t ch = 0; ch < di; ++ch) {
            g.dparams.w_delta[ch] += xk[ch] * dr;
            T acc = p.w_delta[ch] * dr;
            for (std::size_t s = 0; s < ds; ++s) {
                g.dparams.w_b(ch, s) += xk[ch] * db[s];
                g.dparams.w_c(ch, s) += xk[ch] * dc[s];
                acc += p.w_b(ch, s) * db[s] + p.w_c(ch, s) * dc[s];
            }
            dxk[ch] += acc;
        }
    }
    for (std::size_t i = 0; i < plane; ++i) g.dparams.a_log[i] = da[i] * a[i];
    return g;
}

}  // namespace sstc
