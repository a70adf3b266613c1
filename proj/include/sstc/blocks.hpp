#pragma once

// Sequence mixers: the gated Mamba block, its bidirectional variant, and the
// attention and pooling baselines used for comparison.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sstc/errors.hpp"
#include "sstc/rng.hpp"
#include "sstc/ssm.hpp"
#include "sstc/tensor.hpp"

namespace sstc {

// ---------------------------------------------------------------------------
// Mamba block
// ---------------------------------------------------------------------------

template <typename T>
struct MambaBlockWeights {
    Tensor<T> w_in;   // [d × 2·d_inner]; first half feeds the scan, second half is the gate z
    Tensor<T> conv;   // [d_inner × w_conv], depthwise causal
    SelectiveSsmParams<T> ssm;
    Tensor<T> w_out;  // [d_inner × d]

    std::size_t d_model() const { return w_in.rows(); }
    std::size_t d_inner() const { return conv.rows(); }
    std::size_t conv_width() const { return conv.cols(); }

    static MambaBlockWeights zeros(std::size_t d, std::size_t d_inner, std::size_t d_state, std::size_t w_conv) {
        return {Tensor<T>({d, 2 * d_inner}), Tensor<T>({d_inner, w_conv}),
                SelectiveSsmParams<T>::zeros(d_inner, d_state), Tensor<T>({d_inner, d})};
    }

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        f(prefix + "w_in", w_in);
        f(prefix + "conv", conv);
        ssm.visit(f, prefix);
        f(prefix + "w_out", w_out);
    }
};

template <typename T>
MambaBlockWeights<T> init_mamba_block(Rng& rng, std::size_t d, std::size_t expand, std::size_t d_state,
                                      std::size_t w_conv) {
    if (expand < 1) throw ParameterError("expand must be >= 1");
    const std::size_t di = expand * d;
    MambaBlockWeights<T> w;
    w.w_in = random_normal<T>(rng, {d, 2 * di}, 1.0 / std::sqrt(double(d)));
    w.conv = random_normal<T>(rng, {di, w_conv}, 1.0 / std::sqrt(double(w_conv)));
    w.ssm = init_selective_ssm<T>(rng, di, d_state);
    w.w_out = random_normal<T>(rng, {di, d}, 1.0 / std::sqrt(double(di)));
    return w;
}

template <typename T>
struct MambaCoreCache {
    Tensor<T> x;       // block input
    Tensor<T> u;       // x·w_in, [T × 2·d_inner]
    Tensor<T> conv;    // pre-activation conv output
    ScanCache<T> scan; // input to the scan is silu(conv)
    Tensor<T> y_scan;  // scan output
    Tensor<T> gated;   // y_scan ⊙ silu(z)
};

namespace detail {

/// out[t, c] = Σ_j kernel[c, j] · u[t - (w-1) + j, c], reading the first d_inner columns of u.
template <typename T>
Tensor<T> causal_depthwise_conv(const Tensor<T>& u, const Tensor<T>& kernel) {
    const std::size_t steps = u.rows(), stride = u.cols(), di = kernel.rows(), width = kernel.cols();
    Tensor<T> out({steps, di});
    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t j = 0; j < width; ++j) {
            const std::size_t lag = width - 1 - j;
            if (lag > t) continue;
            const T* src = u.data() + (t - lag) * stride;
            T* o = out.data() + t * di;
            for (std::size_t c = 0; c < di; ++c) o[c] += kernel(c, j) * src[c];
        }
    }
    return out;
}

template <typename T>
void require_mamba_shapes(const Tensor<T>& x, const MambaBlockWeights<T>& w) {
    require_matrix(x, "block input");
    require(x.rows() >= 1, "block requires at least one step");
    const std::size_t d = w.d_model(), di = w.d_inner();
    require(x.cols() == d, "block input width " + std::to_string(x.cols()) + " != model width " + std::to_string(d));
    require(w.w_in.cols() == 2 * di, "w_in must be [d x 2*d_inner], got " + shape_string(w.w_in.shape()));
    require(w.w_out.shape() == Shape{di, d}, "w_out must be [d_inner x d], got " + shape_string(w.w_out.shape()));
    require(w.ssm.d_inner() == di, "scan width does not match conv width");
}

}  // namespace detail

/// Residual-free Mamba branch: in-proj → causal conv → SiLU → scan → ⊙ SiLU(z) → out-proj.
template <typename T>
Tensor<T> mamba_core(const Tensor<T>& x, const MambaBlockWeights<T>& w, MambaCoreCache<T>* cache = nullptr) {
    detail::require_mamba_shapes(x, w);
    const std::size_t steps = x.rows(), di = w.d_inner();
    Tensor<T> u = affine(x, w.w_in);
    Tensor<T> v = detail::causal_depthwise_conv(u, w.conv);
    Tensor<T> s(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) s[i] = silu(v[i]);

    Tensor<T> y;
    if (cache) {
        auto r = selective_scan_forward(s, w.ssm);
        y = std::move(r.y);
        cache->scan = std::move(r.cache);
    } else {
        y = selective_scan(s, w.ssm);
    }

    Tensor<T> gated({steps, di});
    for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t c = 0; c < di; ++c) gated(t, c) = y(t, c) * silu(u(t, di + c));
    Tensor<T> out = affine(gated, w.w_out);
    if (cache) {
        cache->x = x;
        cache->u = std::move(u);
        cache->conv = std::move(v);
        cache->y_scan = std::move(y);
        cache->gated = std::move(gated);
    }
    return out;
}

/// Gradient of Σ dout ⊙ mamba_core(x); parameter gradients are accumulated into `grads`.
template <typename T>
Tensor<T> mamba_core_backward(const MambaBlockWeights<T>& w, const MambaCoreCache<T>& cache, const Tensor<T>& dout,
                              MambaBlockWeights<T>& grads) {
    const std::size_t steps = cache.x.rows(), di = w.d_inner(), width = w.conv_width();
    if (dout.shape() != Shape{steps, w.d_model()})
        throw ContractError("mamba_core_backward: cotangent shape " + shape_string(dout.shape()) +
                            " does not match cached forward");

    accumulate_at_b(grads.w_out, cache.gated, dout);
    Tensor<T> dgated = matmul_bt(dout, w.w_out);

    Tensor<T> dy({steps, di});
    Tensor<T> du({steps, 2 * di});
    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t c = 0; c < di; ++c) {
            const T z = cache.u(t, di + c);
            dy(t, c) = dgated(t, c) * silu(z);
            du(t, di + c) = dgated(t, c) * cache.y_scan(t, c) * silu_grad(z);
        }
    }

    auto sg = selective_scan_backward(cache.scan, dy);
    add_inplace(grads.ssm.a_log, sg.dparams.a_log);
    add_inplace(grads.ssm.w_b, sg.dparams.w_b);
    add_inplace(grads.ssm.w_c, sg.dparams.w_c);
    add_inplace(grads.ssm.w_delta, sg.dparams.w_delta);
    add_inplace(grads.ssm.b_delta, sg.dparams.b_delta);

    Tensor<T> dv(sg.dx.shape());
    for (std::size_t i = 0; i < dv.size(); ++i) dv[i] = sg.dx[i] * silu_grad(cache.conv[i]);

    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t j = 0; j < width; ++j) {
            const std::size_t lag = width - 1 - j;
            if (lag > t) continue;
            for (std::size_t c = 0; c < di; ++c) {
                grads.conv(c, j) += dv(t, c) * cache.u(t - lag, c);
                du(t - lag, c) += dv(t, c) * w.conv(c, j);
            }
        }
    }

    accumulate_at_b(grads.w_in, cache.x, du);
    return matmul_bt(du, w.w_in);
}

/// x + mamba_core(x).
template <typename T>
Tensor<T> mamba_block_forward(const Tensor<T>& x, const MambaBlockWeights<T>& w,
                              MambaCoreCache<T>* cache = nullptr) {
    return add(mamba_core(x, w, cache), x);
}

template <typename T>
Tensor<T> mamba_block_backward(const MambaBlockWeights<T>& w, const MambaCoreCache<T>& cache, const Tensor<T>& dout,
                               MambaBlockWeights<T>& grads) {
    return add(mamba_core_backward(w, cache, dout, grads), dout);
}

// ---------------------------------------------------------------------------
// Bidirectional Mamba
// ---------------------------------------------------------------------------

template <typename T>
struct BiMambaBlockWeights {
    MambaBlockWeights<T> fwd;
    MambaBlockWeights<T> bwd;
    Tensor<T> w_merge;  // [2d × d]

    static BiMambaBlockWeights zeros(std::size_t d, std::size_t d_inner, std::size_t d_state, std::size_t w_conv) {
        return {MambaBlockWeights<T>::zeros(d, d_inner, d_state, w_conv),
                MambaBlockWeights<T>::zeros(d, d_inner, d_state, w_conv), Tensor<T>({2 * d, d})};
    }

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        fwd.visit(f, prefix + "fwd.");
        bwd.visit(f, prefix + "bwd.");
        f(prefix + "merge", w_merge);
    }
};

template <typename T>
BiMambaBlockWeights<T> init_bimamba_block(Rng& rng, std::size_t d, std::size_t expand, std::size_t d_state,
                                          std::size_t w_conv) {
    BiMambaBlockWeights<T> w;
    w.fwd = init_mamba_block<T>(rng, d, expand, d_state, w_conv);
    w.bwd = init_mamba_block<T>(rng, d, expand, d_state, w_conv);
    w.w_merge = random_normal<T>(rng, {2 * d, d}, 0.5 / std::sqrt(double(2 * d)));
    return w;
}

/// Swaps the two directions and the matching halves of the merge matrix. Applying the
/// result to a reversed sequence yields the reversed output of the original block.
template <typename T>
BiMambaBlockWeights<T> swap_directions(const BiMambaBlockWeights<T>& w) {
    BiMambaBlockWeights<T> out{w.bwd, w.fwd, Tensor<T>(w.w_merge.shape())};
    const std::size_t d = w.w_merge.cols();
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c) {
            out.w_merge(r, c) = w.w_merge(d + r, c);
            out.w_merge(d + r, c) = w.w_merge(r, c);
        }
    return out;
}

template <typename T>
struct BiMambaCache {
    MambaCoreCache<T> fwd;
    MambaCoreCache<T> bwd;
    Tensor<T> concat;  // [T × 2d]
};

/// x + [core_fwd(x), reverse(core_bwd(reverse(x)))]·w_merge.
template <typename T>
Tensor<T> bimamba_forward(const Tensor<T>& x, const BiMambaBlockWeights<T>& w, BiMambaCache<T>* cache = nullptr) {
    const std::size_t d = w.fwd.d_model();
    detail::require(w.bwd.w_in.shape() == w.fwd.w_in.shape() && w.bwd.conv.shape() == w.fwd.conv.shape() &&
                        w.bwd.ssm.a_log.shape() == w.fwd.ssm.a_log.shape(),
                    "bimamba: forward and backward weights differ in shape");
    detail::require(w.w_merge.shape() == Shape{2 * d, d}, "w_merge must be [2d x d], got " +
                                                              shape_string(w.w_merge.shape()));
    Tensor<T> yf = mamba_core(x, w.fwd, cache ? &cache->fwd : nullptr);
    Tensor<T> yb = reverse_rows(mamba_core(reverse_rows(x), w.bwd, cache ? &cache->bwd : nullptr));
    Tensor<T> cat = concat_cols(yf, yb);
    Tensor<T> out = add(affine(cat, w.w_merge), x);
    if (cache) cache->concat = std::move(cat);
    return out;
}

template <typename T>
Tensor<T> bimamba_backward(const BiMambaBlockWeights<T>& w, const BiMambaCache<T>& cache, const Tensor<T>& dout,
                           BiMambaBlockWeights<T>& grads) {
    const std::size_t d = w.fwd.d_model();
    accumulate_at_b(grads.w_merge, cache.concat, dout);
    Tensor<T> dcat = matmul_bt(dout, w.w_merge);
    Tensor<T> dx = dout;
    add_inplace(dx, mamba_core_backward(w.fwd, cache.fwd, slice_cols(dcat, 0, d), grads.fwd));
    Tensor<T> drev = mamba_core_backward(w.bwd, cache.bwd, reverse_rows(slice_cols(dcat, d, d)), grads.bwd);
    add_inplace(dx, reverse_rows(drev));
    return dx;
}

// ---------------------------------------------------------------------------
// Attention baseline
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionBlockWeights {
    Tensor<T> w_q, w_k, w_v, w_o;  // each [d × d]
    std::size_t head_count = 1;

    static AttentionBlockWeights zeros(std::size_t d, std::size_t heads) {
        return {Tensor<T>({d, d}), Tensor<T>({d, d}), Tensor<T>({d, d}), Tensor<T>({d, d}), heads};
    }

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        f(prefix + "w_q", w_q);
        f(prefix + "w_k", w_k);
        f(prefix + "w_v", w_v);
        f(prefix + "w_o", w_o);
    }
};

template <typename T>
AttentionBlockWeights<T> init_attention_block(Rng& rng, std::size_t d, std::size_t heads) {
    if (heads == 0 || d % heads != 0) throw ParameterError("model width must be divisible by head_count");
    const double scale = 1.0 / std::sqrt(double(d));
    AttentionBlockWeights<T> w;
    w.w_q = random_normal<T>(rng, {d, d}, scale);
    w.w_k = random_normal<T>(rng, {d, d}, scale);
    w.w_v = random_normal<T>(rng, {d, d}, scale);
    w.w_o = random_normal<T>(rng, {d, d}, scale);
    w.head_count = heads;
    return w;
}

template <typename T>
struct AttentionCache {
    Tensor<T> x, q, k, v, context;
    std::vector<Tensor<T>> probs;  // per head, [T × T]
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
RowMatrix<T> head_slice(const Tensor<T>& m, std::size_t head, std::size_t dh) {
    Eigen::Map<const RowMatrix<T>> full(m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols()));
    return full.middleCols(Eigen::Index(head * dh), Eigen::Index(dh));
}

}  // namespace detail

/// Bidirectional multi-head softmax attention with residual. Scores are formed one block
/// of queries at a time, so without a cache memory stays O(T·d).
template <typename T>
Tensor<T> attention_block_forward(const Tensor<T>& x, const AttentionBlockWeights<T>& w,
                                  AttentionCache<T>* cache = nullptr) {
    detail::require_matrix(x, "attention input");
    const std::size_t steps = x.rows(), d = x.cols(), heads = w.head_count;
    detail::require(steps >= 1, "attention requires at least one step");
    detail::require(w.w_q.shape() == Shape{d, d} && w.w_k.shape() == Shape{d, d} && w.w_v.shape() == Shape{d, d} &&
                        w.w_o.shape() == Shape{d, d},
                    "attention weights must be [d x d] for input " + shape_string(x.shape()));
    if (heads == 0 || d % heads != 0) throw ParameterError("model width must be divisible by head_count");
    const std::size_t dh = d / heads;
    const T scale = T{1} / std::sqrt(T(dh));

    Tensor<T> q = affine(x, w.w_q), k = affine(x, w.w_k), v = affine(x, w.w_v);
    Tensor<T> context({steps, d});
    Eigen::Map<detail::RowMatrix<T>> ctx(context.data(), Eigen::Index(steps), Eigen::Index(d));
    if (cache) cache->probs.assign(heads, Tensor<T>());

    constexpr Eigen::Index kBlock = 64;
    const auto n = Eigen::Index(steps);
    for (std::size_t h = 0; h < heads; ++h) {
        const detail::RowMatrix<T> qh = detail::head_slice(q, h, dh);
        const detail::RowMatrix<T> kh = detail::head_slice(k, h, dh);
        const detail::RowMatrix<T> vh = detail::head_slice(v, h, dh);
        detail::RowMatrix<T> probs_all;
        if (cache) probs_all.resize(n, n);
        for (Eigen::Index r0 = 0; r0 < n; r0 += kBlock) {
            const Eigen::Index rows = std::min(kBlock, n - r0);
            detail::RowMatrix<T> s = (qh.middleRows(r0, rows) * kh.transpose()) * scale;
            for (Eigen::Index i = 0; i < rows; ++i) {
                auto row = s.row(i).array();
                row = (row - row.maxCoeff()).exp();
                row /= row.sum();
            }
            ctx.block(r0, Eigen::Index(h * dh), rows, Eigen::Index(dh)).noalias() = s * vh;
            if (cache) probs_all.middleRows(r0, rows) = s;
        }
        if (cache) {
            cache->probs[h] = Tensor<T>({steps, steps}, std::vector<T>(probs_all.data(), probs_all.data() + n * n));
        }
    }

    Tensor<T> out = add(affine(context, w.w_o), x);
    if (cache) {
        cache->x = x;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->context = std::move(context);
    }
    return out;
}

template <typename T>
Tensor<T> attention_block_backward(const AttentionBlockWeights<T>& w, const AttentionCache<T>& cache,
                                   const Tensor<T>& dout, AttentionBlockWeights<T>& grads) {
    const std::size_t steps = cache.x.rows(), d = cache.x.cols(), heads = w.head_count, dh = d / heads;
    if (dout.shape() != cache.x.shape() || cache.probs.size() != heads)
        throw ContractError("attention_block_backward: cotangent does not match cached forward");
    const T scale = T{1} / std::sqrt(T(dh));
    const auto n = Eigen::Index(steps);

    accumulate_at_b(grads.w_o, cache.context, dout);
    Tensor<T> dctx = matmul_bt(dout, w.w_o);
    Tensor<T> dq({steps, d}), dk({steps, d}), dv({steps, d});
    Eigen::Map<detail::RowMatrix<T>> dq_m(dq.data(), n, Eigen::Index(d));
    Eigen::Map<detail::RowMatrix<T>> dk_m(dk.data(), n, Eigen::Index(d));
    Eigen::Map<detail::RowMatrix<T>> dv_m(dv.data(), n, Eigen::Index(d));

    for (std::size_t h = 0; h < heads; ++h) {
        const auto cols = Eigen::Index(h * dh);
        Eigen::Map<const detail::RowMatrix<T>> p(cache.probs[h].data(), n, n);
        const detail::RowMatrix<T> qh = detail::head_slice(cache.q, h, dh);
        const detail::RowMatrix<T> kh = detail::head_slice(cache.k, h, dh);
        const detail::RowMatrix<T> vh = detail::head_slice(cache.v, h, dh);
        const detail::RowMatrix<T> dch = detail::head_slice(dctx, h, dh);
        dv_m.middleCols(cols, Eigen::Index(dh)) = p.transpose() * dch;
        detail::RowMatrix<T> dp = dch * vh.transpose();
        Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = (dp.array() * p.array()).rowwise().sum();
        detail::RowMatrix<T> ds = (p.array() * (dp.array().colwise() - row_dot.array())).matrix() * scale;
        dq_m.middleCols(cols, Eigen::Index(dh)) = ds * kh;
        dk_m.middleCols(cols, Eigen::Index(dh)) = ds.transpose() * qh;
    }

    accumulate_at_b(grads.w_q, cache.x, dq);
    accumulate_at_b(grads.w_k, cache.x, dk);
    accumulate_at_b(grads.w_v, cache.x, dv);
    Tensor<T> dx = dout;
    add_inplace(dx, matmul_bt(dq, w.w_q));
    add_inplace(dx, matmul_bt(dk, w.w_k));
    add_inplace(dx, matmul_bt(dv, w.w_v));
    return dx;
}

// ---------------------------------------------------------------------------
// Pooling baseline
// ---------------------------------------------------------------------------

/// Means of consecutive, non-overlapping groups of `factor` tokens.
template <typename T>
Tensor<T> avg_pool_frame(const Tensor<T>& frame_tokens, std::size_t factor) {
    detail::require_matrix(frame_tokens, "pool input");
    const std::size_t n = frame_tokens.rows(), d = frame_tokens.cols();
    if (factor == 0 || n % factor != 0)
        throw DimensionError("avg_pool_frame: " + std::to_string(n) + " tokens not divisible by factor " +
                             std::to_string(factor));
    Tensor<T> out({n / factor, d});
    const T inv = T{1} / T(factor);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out(i / factor, j) += frame_tokens(i, j) * inv;
    return out;
}

}  // namespace sstc
