#pragma once

// Hierarchical compression: insert a shared query token after every k patches,
// run L MambaMia layers (Bi-Mamba mixing followed by gated aggregation) over the
// interleaved sequence, keep the query tokens, then keep a strided subset of frames.

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sstc/aggregate.hpp"
#include "sstc/blocks.hpp"
#include "sstc/errors.hpp"
#include "sstc/rng.hpp"
#include "sstc/tensor.hpp"
#include "sstc/tokens.hpp"

namespace sstc {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Exact ratio num/den, kept in lowest terms.
struct Rational {
    std::uint64_t num = 1;
    std::uint64_t den = 1;

    constexpr Rational() = default;
    Rational(std::uint64_t n, std::uint64_t d) : num(n), den(d) {
        if (den == 0) throw ParameterError("rational with zero denominator");
        const std::uint64_t g = std::gcd(num, den);
        if (g > 1) {
            num /= g;
            den /= g;
        }
    }

    /// Parses "n/d" or a bare integer "n".
    static Rational parse(const std::string& text) {
        const auto slash = text.find('/');
        auto parse_u = [&](const std::string& part) -> std::uint64_t {
            if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
                throw ParameterError("not a rational: \"" + text + "\"");
            return std::stoull(part);
        };
        if (slash == std::string::npos) return Rational(parse_u(text), 1);
        return Rational(parse_u(text.substr(0, slash)), parse_u(text.substr(slash + 1)));
    }

    double value() const { return double(num) / double(den); }
    std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
    friend bool operator==(const Rational&, const Rational&) = default;
};

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

struct MambaMiaConfig {
    std::size_t d = 0;
    std::size_t d_state = 16;
    std::size_t expand = 2;
    std::size_t w_conv = 4;
    std::size_t layers = 2;
    std::size_t k = 10;
    Rational s{1, 3};
    std::size_t n_patches = 100;
    std::size_t m_max = 128;
    double gate_epsilon = kDefaultGateEpsilon;
    std::size_t heads = 4;  // attention baseline only

    std::size_t d_inner() const { return expand * d; }
    std::size_t queries_per_frame() const { return ceil_div(n_patches, k); }

    void validate() const {
        if (d < 1) throw ConfigError("d", "model width must be >= 1");
        if (d_state < 1) throw ConfigError("d_state", "must be >= 1");
        if (expand < 1) throw ConfigError("expand", "must be >= 1");
        if (w_conv < 1) throw ConfigError("w_conv", "must be >= 1");
        if (layers < 1) throw ConfigError("layers", "must be >= 1");
        if (k < 1) throw ConfigError("k", "query interval must be >= 1");
        if (s.num == 0 || s.num > s.den) throw ConfigError("s", "sampling ratio must lie in (0, 1], got " + s.str());
        if (n_patches < 1) throw ConfigError("n_patches", "must be >= 1");
        if (m_max < 1) throw ConfigError("m_max", "must be >= 1");
        if (!(gate_epsilon > 0.0 && gate_epsilon < 0.5)) throw ConfigError("gate_epsilon", "must lie in (0, 0.5)");
        if (heads < 1) throw ConfigError("heads", "must be >= 1");
    }

    /// Extra requirement of the attention baseline; the Mamba path ignores `heads`.
    void validate_attention() const {
        validate();
        if (d % heads != 0) throw ConfigError("heads", "must divide d");
    }
};

// ---------------------------------------------------------------------------
// Token accounting and sampling
// ---------------------------------------------------------------------------

/// Frames kept by secondary sampling: ⌈M·s⌉ indices round(j/s), anchored at frame 0.
inline std::vector<std::size_t> secondary_sample_indices(std::size_t frames, Rational s) {
    if (s.num == 0 || s.num > s.den) throw ParameterError("sampling ratio must lie in (0, 1]");
    const std::size_t kept = ceil_div(frames * s.num, s.den);
    std::vector<std::size_t> idx(kept);
    for (std::size_t j = 0; j < kept; ++j) {
        const std::size_t r = (2 * j * s.den + s.num) / (2 * s.num);
        idx[j] = std::min(r, frames - 1);
    }
    return idx;
}

/// Tokens delivered downstream: ⌈M·s⌉·⌈N/k⌉.
inline std::size_t token_budget(std::size_t frames, std::size_t patches, std::size_t k, Rational s) {
    if (k == 0) throw ParameterError("query interval must be >= 1");
    return secondary_sample_indices(frames, s).size() * ceil_div(patches, k);
}

/// Keeps frames along the leading axis of a [M × Q × d] tensor.
template <typename T>
Tensor<T> secondary_sample(const Tensor<T>& per_frame, Rational s) {
    detail::require(per_frame.rank() == 3, "secondary_sample expects [M x Q x d], got " + shape_string(per_frame.shape()));
    const std::size_t m = per_frame.dim(0), stride = per_frame.dim(1) * per_frame.dim(2);
    const auto idx = secondary_sample_indices(m, s);
    Tensor<T> out({idx.size(), per_frame.dim(1), per_frame.dim(2)});
    for (std::size_t j = 0; j < idx.size(); ++j)
        std::copy_n(per_frame.data() + idx[j] * stride, stride, out.data() + j * stride);
    return out;
}

/// Uniform frame subsampling down to at most `max_frames` (initial dense sampling cap).
template <typename T>
Tensor<T> dense_frame_sample(const Tensor<T>& frames, std::size_t max_frames) {
    const std::size_t m = frames.dim(0);
    if (m <= max_frames) return frames;
    const std::size_t stride = frames.size() / m;
    Shape shape = frames.shape();
    shape[0] = max_frames;
    Tensor<T> out(shape);
    for (std::size_t j = 0; j < max_frames; ++j) {
        const std::size_t src = (j * m) / max_frames;
        std::copy_n(frames.data() + src * stride, stride, out.data() + j * stride);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Query insertion
// ---------------------------------------------------------------------------

/// Flattens frames [M × N × d] and appends one copy of `query` after every k patches and after
/// any trailing partial group of a frame. Length M·N + M·⌈N/k⌉.
template <typename T>
TokenSequence<T> insert_queries(const Tensor<T>& frames, const Tensor<T>& query, std::size_t k) {
    detail::require(frames.rank() == 3, "insert_queries expects [M x N x d], got " + shape_string(frames.shape()));
    const std::size_t m = frames.dim(0), n = frames.dim(1), d = frames.dim(2);
    detail::require(m >= 1 && n >= 1, "insert_queries requires at least one frame and one patch");
    detail::require(query.size() == d, "query width " + std::to_string(query.size()) + " != " + std::to_string(d));
    if (k == 0) throw ParameterError("query interval must be >= 1");
    const std::size_t per_frame = n + ceil_div(n, k);
    TokenSequence<T> seq{Tensor<T>({m * per_frame, d}), std::vector<bool>(m * per_frame, false),
                         std::vector<std::uint32_t>(m * per_frame, 0)};
    std::size_t pos = 0;
    for (std::size_t f = 0; f < m; ++f) {
        for (std::size_t p = 0; p < n; ++p) {
            std::copy_n(frames.data() + (f * n + p) * d, d, seq.tokens.data() + pos * d);
            seq.frame_of[pos++] = static_cast<std::uint32_t>(f);
            if ((p + 1) % k == 0 || p + 1 == n) {
                std::copy_n(query.data(), d, seq.tokens.data() + pos * d);
                seq.is_query[pos] = true;
                seq.frame_of[pos++] = static_cast<std::uint32_t>(f);
            }
        }
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <typename T>
struct MambaMiaLayer {
    BiMambaBlockWeights<T> mixer;
    AggregatorWeights<T> agg;

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        mixer.visit(f, prefix);
        agg.visit(f, prefix + "agg.");
    }
};

/// Weights of the compressor. Parameter names follow `layer{i}.{fwd|bwd}.{field}`,
/// `layer{i}.merge`, `layer{i}.agg.{field}` and `query`.
template <typename T>
struct MambaMiaModel {
    MambaMiaConfig cfg;
    Tensor<T> query;  // [d], shared by every insertion point
    std::vector<MambaMiaLayer<T>> layers;

    template <typename F>
    void visit(F&& f) {
        f(std::string("query"), query);
        for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(f, "layer" + std::to_string(i) + ".");
    }
    template <typename F>
    void visit(F&& f) const {
        const_cast<MambaMiaModel*>(this)->visit([&](const std::string& name, Tensor<T>& t) {
            f(name, static_cast<const Tensor<T>&>(t));
        });
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        visit([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
        return n;
    }
};

template <typename T>
MambaMiaModel<T> init_mambamia(const MambaMiaConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    MambaMiaModel<T> m;
    m.cfg = cfg;
    m.query = random_normal<T>(rng, {cfg.d}, 1.0);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        MambaMiaLayer<T> layer;
        layer.mixer = init_bimamba_block<T>(rng, cfg.d, cfg.expand, cfg.d_state, cfg.w_conv);
        layer.agg = init_aggregator<T>(rng, cfg.d, cfg.k, T(cfg.gate_epsilon));
        m.layers.push_back(std::move(layer));
    }
    return m;
}

/// Same structure as `model`, every parameter zero. Used as a gradient accumulator.
template <typename T>
MambaMiaModel<T> zeros_like(const MambaMiaModel<T>& model) {
    MambaMiaModel<T> z = model;
    z.visit([](const std::string&, Tensor<T>& t) { t.fill(T{0}); });
    return z;
}

template <typename To, typename From>
MambaMiaModel<To> model_cast(const MambaMiaModel<From>& src) {
    MambaMiaModel<To> dst;
    dst.cfg = src.cfg;
    dst.layers.resize(src.layers.size());
    dst.query = Tensor<To>(src.query.shape());
    for (std::size_t l = 0; l < src.layers.size(); ++l) {
        dst.layers[l].mixer = BiMambaBlockWeights<To>::zeros(src.cfg.d, src.cfg.d_inner(), src.cfg.d_state,
                                                             src.cfg.w_conv);
        dst.layers[l].agg = AggregatorWeights<To>::zeros(src.cfg.d, src.cfg.k, To(src.cfg.gate_epsilon));
    }
    std::vector<const Tensor<From>*> from;
    src.visit([&](const std::string&, const Tensor<From>& t) { from.push_back(&t); });
    std::size_t i = 0;
    dst.visit([&](const std::string&, Tensor<To>& t) { t = tensor_cast<To>(*from[i++]); });
    return dst;
}

enum class CompressionMode { joint, per_frame };

template <typename T>
struct CompressCache {
    struct Layer {
        BiMambaCache<T> mixer;
        AggregationCache<T> agg;
    };
    struct Segment {
        std::size_t first_frame = 0;
        std::size_t frame_count = 0;
        std::vector<bool> is_query;
        std::vector<Layer> layers;
    };
    Shape input_shape;
    std::vector<Segment> segments;
};

namespace detail {

template <typename T>
Tensor<T> frame_range(const Tensor<T>& frames, std::size_t first, std::size_t count) {
    const std::size_t stride = frames.dim(1) * frames.dim(2);
    Tensor<T> out({count, frames.dim(1), frames.dim(2)});
    std::copy_n(frames.data() + first * stride, count * stride, out.data());
    return out;
}

}  // namespace detail

/// Compressed query tokens grouped by frame, [M × ⌈N/k⌉ × d]. In per-frame mode each frame
/// is compressed as its own sequence, so no information crosses frame boundaries.
template <typename T>
Tensor<T> mambamia_compress(const Tensor<T>& frames, const MambaMiaModel<T>& model,
                            CompressionMode mode = CompressionMode::joint, CompressCache<T>* cache = nullptr) {
    const MambaMiaConfig& cfg = model.cfg;
    detail::require(frames.rank() == 3, "compress expects [M x N x d], got " + shape_string(frames.shape()));
    detail::require(frames.dim(2) == cfg.d, "frame token width " + std::to_string(frames.dim(2)) +
                                                " does not match config d=" + std::to_string(cfg.d));
    const std::size_t m = frames.dim(0), n = frames.dim(1), q_per_frame = ceil_div(n, cfg.k);
    Tensor<T> out({m, q_per_frame, cfg.d});
    if (cache) {
        cache->input_shape = frames.shape();
        cache->segments.clear();
    }

    const std::size_t seg_frames = mode == CompressionMode::joint ? m : 1;
    for (std::size_t first = 0; first < m; first += seg_frames) {
        TokenSequence<T> seq = insert_queries(
            mode == CompressionMode::joint ? frames : detail::frame_range(frames, first, 1), model.query, cfg.k);
        typename CompressCache<T>::Segment* seg = nullptr;
        if (cache) {
            cache->segments.push_back({first, seg_frames, seq.is_query, {}});
            seg = &cache->segments.back();
            seg->layers.resize(model.layers.size());
        }
        Tensor<T> x = std::move(seq.tokens);
        for (std::size_t l = 0; l < model.layers.size(); ++l) {
            const auto& layer = model.layers[l];
            x = bimamba_forward(x, layer.mixer, seg ? &seg->layers[l].mixer : nullptr);
            x = gated_aggregation(x, seq.is_query, layer.agg, seg ? &seg->layers[l].agg : nullptr);
        }
        std::size_t row = first * q_per_frame;
        for (std::size_t i = 0; i < seq.is_query.size(); ++i)
            if (seq.is_query[i]) std::copy_n(x.data() + i * cfg.d, cfg.d, out.data() + (row++) * cfg.d);
    }
    detail::debug_check_finite(out, "mambamia_compress");
    return out;
}

/// Backward of `mambamia_compress`: accumulates parameter gradients into `grads` and,
/// if requested, writes the gradient with respect to the input frames.
template <typename T>
void mambamia_compress_backward(const MambaMiaModel<T>& model, const CompressCache<T>& cache,
                                const Tensor<T>& d_queries, MambaMiaModel<T>& grads, Tensor<T>* d_frames = nullptr) {
    if (cache.segments.empty() || cache.input_shape.size() != 3)
        throw ContractError("mambamia_compress_backward: cache was not produced by a forward pass");
    const std::size_t m = cache.input_shape[0], n = cache.input_shape[1], d = cache.input_shape[2];
    const std::size_t q_per_frame = ceil_div(n, model.cfg.k);
    if (d_queries.shape() != Shape{m, q_per_frame, d})
        throw ContractError("mambamia_compress_backward: cotangent " + shape_string(d_queries.shape()) +
                            " does not match cached forward");
    if (d_frames) *d_frames = Tensor<T>(cache.input_shape);

    for (const auto& seg : cache.segments) {
        const std::size_t len = seg.is_query.size();
        Tensor<T> dx({len, d});
        std::size_t row = seg.first_frame * q_per_frame;
        for (std::size_t i = 0; i < len; ++i)
            if (seg.is_query[i]) std::copy_n(d_queries.data() + (row++) * d, d, dx.data() + i * d);
        for (std::size_t l = model.layers.size(); l-- > 0;) {
            dx = gated_aggregation_backward(model.layers[l].agg, seg.layers[l].agg, dx, grads.layers[l].agg);
            dx = bimamba_backward(model.layers[l].mixer, seg.layers[l].mixer, dx, grads.layers[l].mixer);
        }
        std::size_t patch = seg.first_frame * n;
        for (std::size_t i = 0; i < len; ++i) {
            if (seg.is_query[i]) {
                for (std::size_t t = 0; t < d; ++t) grads.query[t] += dx(i, t);
            } else {
                if (d_frames) std::copy_n(dx.data() + i * d, d, d_frames->data() + patch * d);
                ++patch;
            }
        }
    }
}

/// Full two-stage output: compress, then secondary frame sampling. Per-frame mode skips the
/// secondary stage, matching the per-frame baseline's token count.
template <typename T>
Tensor<T> compress_and_sample(const Tensor<T>& frames, const MambaMiaModel<T>& model,
                              CompressionMode mode = CompressionMode::joint) {
    Tensor<T> q = mambamia_compress(frames, model, mode);
    return mode == CompressionMode::joint ? secondary_sample(q, model.cfg.s) : q;
}

// ---------------------------------------------------------------------------
// Attention-based compressor (baseline)
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionCompressor {
    MambaMiaConfig cfg;
    Tensor<T> query;
    std::vector<AttentionBlockWeights<T>> layers;
};

template <typename T>
AttentionCompressor<T> init_attention_compressor(const MambaMiaConfig& cfg, std::uint64_t seed) {
    cfg.validate_attention();
    Rng rng(seed);
    AttentionCompressor<T> m{cfg, random_normal<T>(rng, {cfg.d}, 1.0), {}};
    for (std::size_t l = 0; l < cfg.layers; ++l) m.layers.push_back(init_attention_block<T>(rng, cfg.d, cfg.heads));
    return m;
}

/// Same query insertion and secondary sampling, with attention blocks as the mixer.
template <typename T>
Tensor<T> attention_compress(const Tensor<T>& frames, const AttentionCompressor<T>& model) {
    TokenSequence<T> seq = insert_queries(frames, model.query, model.cfg.k);
    Tensor<T> x = std::move(seq.tokens);
    for (const auto& layer : model.layers) x = attention_block_forward(x, layer);
    const std::size_t m = frames.dim(0), qpf = ceil_div(frames.dim(1), model.cfg.k), d = model.cfg.d;
    Tensor<T> out({m, qpf, d});
    std::size_t row = 0;
    for (std::size_t i = 0; i < seq.is_query.size(); ++i)
        if (seq.is_query[i]) std::copy_n(x.data() + i * d, d, out.data() + (row++) * d);
    return secondary_sample(out, model.cfg.s);
}

}  // namespace sstc
