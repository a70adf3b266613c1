#pragma once

// Brute-force reference implementations used as test oracles. They share no code with the
// library kernels: plain nested loops over std::vector<double>, recomputing everything.

#include <cmath>
#include <vector>

#include "sstc/sstc.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

template <typename T>
Mat to_mat(const sstc::Tensor<T>& t) {
    const std::size_t r = t.rows(), c = t.cols();
    Mat m(r, std::vector<double>(c));
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) m[i][j] = double(t.data()[i * c + j]);
    return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
    Mat out(a.size(), std::vector<double>(b.empty() ? 0 : b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < out[i].size(); ++j)
            for (std::size_t t = 0; t < b.size(); ++t) out[i][j] += a[i][t] * b[t][j];
    return out;
}

inline Mat reversed(const Mat& a) { return Mat(a.rbegin(), a.rend()); }

inline double silu(double v) { return v / (1.0 + std::exp(-v)); }
inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// The recurrence stepped by hand: Δ, B, C from the input, ZOH via the closed form, h carried forward.
template <typename T>
Mat scan(const Mat& x, const sstc::SelectiveSsmParams<T>& p) {
    const std::size_t di = p.a_log.rows(), ds = p.a_log.cols();
    Mat h(di, std::vector<double>(ds, 0.0));
    Mat y;
    for (const auto& xk : x) {
        double logit = double(p.b_delta[0]);
        for (std::size_t c = 0; c < di; ++c) logit += xk[c] * double(p.w_delta[c]);
        const double delta = std::log(1.0 + std::exp(logit));
        std::vector<double> b(ds, 0.0), cc(ds, 0.0);
        for (std::size_t s = 0; s < ds; ++s)
            for (std::size_t c = 0; c < di; ++c) {
                b[s] += xk[c] * double(p.w_b(c, s));
                cc[s] += xk[c] * double(p.w_c(c, s));
            }
        std::vector<double> yk(di, 0.0);
        for (std::size_t c = 0; c < di; ++c)
            for (std::size_t s = 0; s < ds; ++s) {
                const double a = -std::exp(double(p.a_log(c, s)));
                const double a_bar = std::exp(delta * a);
                const double b_bar = (a_bar - 1.0) / (delta * a) * delta * b[s];
                h[c][s] = a_bar * h[c][s] + b_bar * xk[c];
                yk[c] += cc[s] * h[c][s];
            }
        y.push_back(yk);
    }
    return y;
}

/// Mamba branch without residual, one step at a time.
template <typename T>
Mat mamba_core(const Mat& x, const sstc::MambaBlockWeights<T>& w) {
    const std::size_t steps = x.size(), di = w.w_out.rows(), width = w.conv.cols();
    const Mat u = matmul(x, to_mat(w.w_in));
    Mat s(steps, std::vector<double>(di, 0.0));
    for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t c = 0; c < di; ++c) {
            double acc = 0.0;
            for (std::size_t j = 0; j < width; ++j) {
                const long src = long(t) - long(width - 1) + long(j);
                if (src >= 0) acc += double(w.conv(c, j)) * u[std::size_t(src)][c];
            }
            s[t][c] = silu(acc);
        }
    Mat y = scan(s, w.ssm);
    for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t c = 0; c < di; ++c) y[t][c] *= silu(u[t][di + c]);
    return matmul(y, to_mat(w.w_out));
}

template <typename T>
Mat mamba_block(const Mat& x, const sstc::MambaBlockWeights<T>& w) {
    Mat out = mamba_core(x, w);
    for (std::size_t t = 0; t < x.size(); ++t)
        for (std::size_t j = 0; j < x[t].size(); ++j) out[t][j] += x[t][j];
    return out;
}

template <typename T>
Mat bimamba(const Mat& x, const sstc::BiMambaBlockWeights<T>& w) {
    const Mat yf = mamba_core(x, w.fwd);
    const Mat yb = reversed(mamba_core(reversed(x), w.bwd));
    Mat cat(x.size());
    for (std::size_t t = 0; t < x.size(); ++t) {
        cat[t] = yf[t];
        cat[t].insert(cat[t].end(), yb[t].begin(), yb[t].end());
    }
    Mat out = matmul(cat, to_mat(w.w_merge));
    for (std::size_t t = 0; t < x.size(); ++t)
        for (std::size_t j = 0; j < x[t].size(); ++j) out[t][j] += x[t][j];
    return out;
}

/// One chunk: α from the query, pooled patches, clamped gate, convex update.
template <typename T>
std::vector<double> aggregate_chunk(const std::vector<double>& q, const Mat& patches,
                                    const sstc::AggregatorWeights<T>& w) {
    const std::size_t d = q.size();
    std::vector<double> logits(patches.size());
    double mx = -INFINITY;
    for (std::size_t i = 0; i < patches.size(); ++i) {
        logits[i] = double(w.b_alpha[i]);
        for (std::size_t t = 0; t < d; ++t) logits[i] += q[t] * double(w.w_alpha(t, i));
        mx = std::max(mx, logits[i]);
    }
    double z = 0.0;
    for (auto& l : logits) z += (l = std::exp(l - mx));
    std::vector<double> a(d, 0.0);
    for (std::size_t i = 0; i < patches.size(); ++i)
        for (std::size_t t = 0; t < d; ++t) a[t] += logits[i] / z * patches[i][t];
    double r = double(w.b_g[0]);
    for (std::size_t t = 0; t < d; ++t) r += q[t] * double(w.w_g[t]);
    const double eps = double(w.epsilon);
    const double g = std::min(std::max(sigmoid(r), eps), 1.0 - eps);
    std::vector<double> out(d);
    for (std::size_t t = 0; t < d; ++t) out[t] = (1.0 - g) * q[t] + g * a[t];
    return out;
}

/// Walks the mask, collecting each query's preceding patches, and merges chunk by chunk.
template <typename T>
Mat aggregate(const Mat& x, const std::vector<bool>& is_query, const sstc::AggregatorWeights<T>& w) {
    Mat out = x;
    Mat pending;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!is_query[i]) {
            pending.push_back(x[i]);
            continue;
        }
        out[i] = aggregate_chunk(x[i], pending, w);
        pending.clear();
    }
    return out;
}

/// Full joint compression: interleave, L × (Bi-Mamba, aggregation), pick out queries.
template <typename T>
Mat compress(const sstc::Tensor<T>& frames, const sstc::MambaMiaModel<T>& model) {
    const std::size_t m = frames.dim(0), n = frames.dim(1), d = frames.dim(2), k = model.cfg.k;
    std::vector<double> q(d);
    for (std::size_t t = 0; t < d; ++t) q[t] = double(model.query[t]);
    Mat x;
    std::vector<bool> is_query;
    for (std::size_t f = 0; f < m; ++f) {
        std::size_t in_chunk = 0;
        for (std::size_t p = 0; p < n; ++p) {
            std::vector<double> row(d);
            for (std::size_t t = 0; t < d; ++t) row[t] = double(frames.data()[(f * n + p) * d + t]);
            x.push_back(row);
            is_query.push_back(false);
            if (++in_chunk == k || p == n - 1) {
                x.push_back(q);
                is_query.push_back(true);
                in_chunk = 0;
            }
        }
    }
    for (const auto& layer : model.layers) {
        x = bimamba(x, layer.mixer);
        x = aggregate(x, is_query, layer.agg);
    }
    Mat out;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (is_query[i]) out.push_back(x[i]);
    return out;
}

template <typename T>
double max_abs_diff(const sstc::Tensor<T>& got, const Mat& want) {
    double m = 0.0;
    const std::size_t c = want.empty() ? 0 : want[0].size();
    if (got.size() != want.size() * c) return INFINITY;
    for (std::size_t i = 0; i < want.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) m = std::max(m, std::abs(double(got.data()[i * c + j]) - want[i][j]));
    return m;
}

}  // namespace oracle
