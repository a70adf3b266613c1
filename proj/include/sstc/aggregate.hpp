#pragma once

// Gated patch aggregation. Each query token q pools the patches of its chunk,
//
//   α = softmax(q·W_α + b_α),   a = Σ_i α_i x_i,
//   g = clamp(σ(q·w_g + b_g), ε, 1-ε),   q_new = (1-g)·q + g·a,
//
// where x_i is the i-th patch of the chunk. Patches pass through unchanged.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sstc/errors.hpp"
#include "sstc/rng.hpp"
#include "sstc/tensor.hpp"
#include "sstc/tokens.hpp"

namespace sstc {

inline constexpr double kDefaultGateEpsilon = 0.01;

template <typename T>
struct AggregatorWeights {
    Tensor<T> w_alpha;  // [d × k]
    Tensor<T> b_alpha;  // [k]
    Tensor<T> w_g;      // [d × 1]
    Tensor<T> b_g;      // [1]
    T epsilon = T(kDefaultGateEpsilon);

    std::size_t chunk_capacity() const { return w_alpha.cols(); }

    static AggregatorWeights zeros(std::size_t d, std::size_t k, T epsilon = T(kDefaultGateEpsilon)) {
        return {Tensor<T>({d, k}), Tensor<T>({k}), Tensor<T>({d, 1}), Tensor<T>({1}), epsilon};
    }

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        f(prefix + "w_alpha", w_alpha);
        f(prefix + "b_alpha", b_alpha);
        f(prefix + "w_g", w_g);
        f(prefix + "b_g", b_g);
    }
};

template <typename T>
AggregatorWeights<T> init_aggregator(Rng& rng, std::size_t d, std::size_t k, T epsilon = T(kDefaultGateEpsilon)) {
    if (!(epsilon > T{0} && epsilon < T(0.5))) throw ParameterError("gate epsilon must lie in (0, 0.5)");
    auto w = AggregatorWeights<T>::zeros(d, k, epsilon);
    const double scale = 1.0 / std::sqrt(double(d));
    w.w_alpha = random_normal<T>(rng, {d, k}, scale);
    w.w_g = random_normal<T>(rng, {d, 1}, scale);
    return w;
}

/// Softmax of q·W_α + b_α over the valid chunk positions.
template <typename T>
std::vector<T> aggregation_weights(std::span<const T> q, const AggregatorWeights<T>& w,
                                   const std::vector<bool>& valid) {
    const std::size_t d = w.w_alpha.rows(), k = w.chunk_capacity();
    detail::require(q.size() == d, "aggregation_weights: query width " + std::to_string(q.size()) +
                                       " != " + std::to_string(d));
    detail::require(valid.size() == k, "aggregation_weights: mask length must equal chunk capacity");
    std::vector<T> logits(w.b_alpha.values());
    for (std::size_t t = 0; t < d; ++t)
        for (std::size_t i = 0; i < k; ++i) logits[i] += q[t] * w.w_alpha(t, i);
    return softmax_masked(std::span<const T>(logits), valid);
}

template <typename T>
struct GatedMerge {
    std::vector<T> q_new;
    T gate;      // applied (clamped) gate
    T gate_raw;  // σ(q·w_g + b_g) before clamping
};

template <typename T>
GatedMerge<T> gated_merge(std::span<const T> q, std::span<const T> a, const AggregatorWeights<T>& w) {
    detail::require(q.size() == a.size() && q.size() == w.w_g.size(), "gated_merge: width mismatch");
    T r = w.b_g[0];
    for (std::size_t t = 0; t < q.size(); ++t) r += q[t] * w.w_g[t];
    const T raw = sigmoid(r);
    const T g = std::clamp(raw, w.epsilon, T{1} - w.epsilon);
    GatedMerge<T> out{std::vector<T>(q.size()), g, raw};
    for (std::size_t t = 0; t < q.size(); ++t) out.q_new[t] = (T{1} - g) * q[t] + g * a[t];
    return out;
}

/// One query and the token positions of its patches.
struct ChunkLayout {
    std::size_t query;
    std::vector<std::size_t> patches;
};

/// Splits a query mask into chunks. Every query must be preceded by 1..k patches and the
/// sequence must end with a query; zero-patch chunks are accepted only when `allow_empty`.
inline std::vector<ChunkLayout> chunk_layout(const std::vector<bool>& is_query, std::size_t k,
                                             bool allow_empty = false) {
    std::vector<ChunkLayout> chunks;
    std::vector<std::size_t> pending;
    for (std::size_t i = 0; i < is_query.size(); ++i) {
        if (!is_query[i]) {
            pending.push_back(i);
            if (pending.size() > k)
                throw DimensionError("malformed query mask: more than " + std::to_string(k) +
                                     " patches before position " + std::to_string(i));
            continue;
        }
        if (pending.empty() && !allow_empty)
            throw DimensionError("malformed query mask: query at position " + std::to_string(i) +
                                 " has no patches in its chunk");
        chunks.push_back({i, std::move(pending)});
        pending.clear();
    }
    if (!pending.empty()) throw DimensionError("malformed query mask: trailing patches without a query");
    return chunks;
}

template <typename T>
struct AggregationCache {
    struct Chunk {
        ChunkLayout layout;
        std::vector<T> alpha;  // [k]
        std::vector<T> pooled; // a
        T gate = 0;
        T gate_raw = 0;
    };
    Tensor<T> input;
    std::vector<Chunk> chunks;
};

/// Replaces each query row of `tokens` with its gated merge. Chunks are independent.
template <typename T>
Tensor<T> gated_aggregation(const Tensor<T>& tokens, const std::vector<bool>& is_query,
                            const AggregatorWeights<T>& w, AggregationCache<T>* cache = nullptr,
                            bool allow_empty = false) {
    detail::require_matrix(tokens, "aggregation input");
    detail::require(tokens.rows() == is_query.size(), "aggregation: mask length does not match token count");
    const std::size_t d = tokens.cols(), k = w.chunk_capacity();
    detail::require(w.w_alpha.rows() == d, "aggregation: W_alpha rows must equal token width");
    Tensor<T> out = tokens;
    if (cache) {
        cache->input = tokens;
        cache->chunks.clear();
    }
    for (ChunkLayout& layout : chunk_layout(is_query, k, allow_empty)) {
        if (layout.patches.empty()) {
            if (cache) cache->chunks.push_back({std::move(layout), {}, {}, T{0}, T{0}});
            continue;
        }
        std::vector<bool> valid(k, false);
        std::fill_n(valid.begin(), layout.patches.size(), true);
        const auto q = tokens.row(layout.query);
        std::vector<T> alpha = aggregation_weights(q, w, valid);
        std::vector<T> pooled(d, T{0});
        for (std::size_t i = 0; i < layout.patches.size(); ++i) {
            const auto x = tokens.row(layout.patches[i]);
            for (std::size_t t = 0; t < d; ++t) pooled[t] += alpha[i] * x[t];
        }
        auto merged = gated_merge(q, std::span<const T>(pooled), w);
        std::copy(merged.q_new.begin(), merged.q_new.end(), out.row(layout.query).begin());
        if (cache) {
            cache->chunks.push_back(
                {std::move(layout), std::move(alpha), std::move(pooled), merged.gate, merged.gate_raw});
        }
    }
    return out;
}

template <typename T>
TokenSequence<T> apply_gated_aggregation(const TokenSequence<T>& seq, const AggregatorWeights<T>& w,
                                         bool allow_empty = false) {
    return {gated_aggregation(seq.tokens, seq.is_query, w, static_cast<AggregationCache<T>*>(nullptr), allow_empty),
            seq.is_query, seq.frame_of};
}

/// Gradient of Σ dout ⊙ gated_aggregation(...). Gate gradients vanish where the clamp is active.
template <typename T>
Tensor<T> gated_aggregation_backward(const AggregatorWeights<T>& w, const AggregationCache<T>& cache,
                                     const Tensor<T>& dout, AggregatorWeights<T>& grads) {
    if (dout.shape() != cache.input.shape())
        throw ContractError("gated_aggregation_backward: cotangent does not match cached forward");
    const std::size_t d = cache.input.cols(), k = w.chunk_capacity();
    Tensor<T> din = dout;
    std::vector<T> dq(d), da(d), dalpha(k), dlogit(k);
    for (const auto& ch : cache.chunks) {
        if (ch.layout.patches.empty()) continue;
        const auto q = cache.input.row(ch.layout.query);
        const auto dnew = dout.row(ch.layout.query);
        const T g = ch.gate;

        T dg = 0;
        for (std::size_t t = 0; t < d; ++t) {
            dq[t] = (T{1} - g) * dnew[t];
            da[t] = g * dnew[t];
            dg += dnew[t] * (ch.pooled[t] - q[t]);
        }
        const bool clamped = ch.gate_raw <= w.epsilon || ch.gate_raw >= T{1} - w.epsilon;
        if (!clamped) {
            const T dr = dg * ch.gate_raw * (T{1} - ch.gate_raw);
            grads.b_g[0] += dr;
            for (std::size_t t = 0; t < d; ++t) {
                grads.w_g[t] += q[t] * dr;
                dq[t] += w.w_g[t] * dr;
            }
        }

        std::fill(dalpha.begin(), dalpha.end(), T{0});
        for (std::size_t i = 0; i < ch.layout.patches.size(); ++i) {
            const std::size_t pos = ch.layout.patches[i];
            const auto x = cache.input.row(pos);
            auto dx = din.row(pos);
            for (std::size_t t = 0; t < d; ++t) {
                dalpha[i] += da[t] * x[t];
                dx[t] += ch.alpha[i] * da[t];
            }
        }
        T dot = 0;
        for (std::size_t i = 0; i < k; ++i) dot += ch.alpha[i] * dalpha[i];
        for (std::size_t i = 0; i < k; ++i) dlogit[i] = ch.alpha[i] * (dalpha[i] - dot);
        for (std::size_t i = 0; i < k; ++i) grads.b_alpha[i] += dlogit[i];
        for (std::size_t t = 0; t < d; ++t) {
            T acc = 0;
            for (std::size_t i = 0; i < k; ++i) {
                grads.w_alpha(t, i) += q[t] * dlogit[i];
                acc += w.w_alpha(t, i) * dlogit[i];
            }
            dq[t] += acc;
        }
        std::copy(dq.begin(), dq.end(), din.row(ch.layout.query).begin());
    }
    return din;
}

}  // namespace sstc
