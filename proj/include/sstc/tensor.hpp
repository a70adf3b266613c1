#pragma once

// Dense row-major tensor and the small set of numeric kernels the rest of
// the library is built from. Element type is float at runtime and double
// inside gradient checks.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sstc/errors.hpp"

namespace sstc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T{0}) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<T> values) {
        return Tensor({rows, cols}, std::vector<T>(values));
    }
    static Tensor vector(std::initializer_list<T> values) {
        return Tensor({values.size()}, std::vector<T>(values));
    }
    static Tensor scalar(T value) { return Tensor({1}, {value}); }
    static Tensor filled(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return shape_.size() < 2 ? 1 : data_.size() / std::max<std::size_t>(rows(), 1); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::vector<T>& values() noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

    /// Same data viewed with another shape of equal element count.
    Tensor reshaped(Shape shape) const& { return Tensor(std::move(shape), data_); }
    Tensor reshaped(Shape shape) && { return Tensor(std::move(shape), std::move(data_)); }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
    return Tensor<T>(t.shape());
}

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    std::vector<To> out(t.size());
    std::transform(t.values().begin(), t.values().end(), out.begin(), [](From v) { return static_cast<To>(v); });
    return Tensor<To>(t.shape(), std::move(out));
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("cannot compare " + shape_string(a.shape()) + " with " + shape_string(b.shape()));
    }
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

namespace detail {

inline void require(bool ok, const std::string& what) {
    if (!ok) throw DimensionError(what);
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* name) {
    require(t.rank() == 2, std::string(name) + " must be a matrix, got " + shape_string(t.shape()));
}

#ifndef NDEBUG
template <typename T>
void debug_check_finite(const Tensor<T>& t, const char* where) {
    if (!t.all_finite()) throw ParameterError(std::string("non-finite value produced by ") + where);
}
#else
template <typename T>
void debug_check_finite(const Tensor<T>&, const char*) {}
#endif

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// out = x·W + b, with b optional (pass an empty tensor to skip).
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
    detail::require_matrix(x, "affine input");
    detail::require_matrix(w, "affine weight");
    const std::size_t m = x.rows(), n = x.cols(), p = w.cols();
    detail::require(w.rows() == n, "affine: cannot multiply " + shape_string(x.shape()) + " by " +
                                       shape_string(w.shape()));
    detail::require(b.empty() || b.size() == p, "affine: bias " + shape_string(b.shape()) +
                                                    " does not match weight " + shape_string(w.shape()));
    Tensor<T> out({m, p});
    for (std::size_t i = 0; i < m; ++i) {
        T* o = out.data() + i * p;
        if (!b.empty()) std::copy(b.data(), b.data() + p, o);
        const T* xi = x.data() + i * n;
        for (std::size_t t = 0; t < n; ++t) {
            const T xv = xi[t];
            if (xv == T{0}) continue;
            const T* wt = w.data() + t * p;
            for (std::size_t j = 0; j < p; ++j) o[j] += xv * wt[j];
        }
    }
    detail::debug_check_finite(out, "affine");
    return out;
}

/// dst += aᵀ·b for a [m×n], b [m×p], dst [n×p]. Weight-gradient accumulation.
template <typename T>
void accumulate_at_b(Tensor<T>& dst, const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
    detail::require(b.rows() == m && dst.size() == n * p,
                    "accumulate_at_b: " + shape_string(a.shape()) + "ᵀ·" + shape_string(b.shape()) + " into " +
                        shape_string(dst.shape()));
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a.data() + i * n;
        const T* bi = b.data() + i * p;
        for (std::size_t t = 0; t < n; ++t) {
            const T av = ai[t];
            if (av == T{0}) continue;
            T* d = dst.data() + t * p;
            for (std::size_t j = 0; j < p; ++j) d[j] += av * bi[j];
        }
    }
}

/// a·wᵀ for a [m×p], w [n×p] → [m×n]. Input-gradient of affine.
template <typename T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& w) {
    const std::size_t m = a.rows(), p = a.cols(), n = w.rows();
    detail::require(w.cols() == p, "matmul_bt: " + shape_string(a.shape()) + " vs " + shape_string(w.shape()));
    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a.data() + i * p;
        for (std::size_t r = 0; r < n; ++r) {
            const T* wr = w.data() + r * p;
            T acc = 0;
            for (std::size_t j = 0; j < p; ++j) acc += ai[j] * wr[j];
            out(i, r) = acc;
        }
    }
    return out;
}

/// dst += column sums of g. Bias-gradient accumulation.
template <typename T>
void accumulate_col_sums(Tensor<T>& dst, const Tensor<T>& g) {
    const std::size_t p = g.cols();
    detail::require(dst.size() == p, "accumulate_col_sums: width mismatch");
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < p; ++j) dst[j] += g(i, j);
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
    detail::require(dst.shape() == src.shape(),
                    "add: " + shape_string(dst.shape()) + " vs " + shape_string(src.shape()));
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
Tensor<T> add(Tensor<T> a, const Tensor<T>& b) {
    add_inplace(a, b);
    return a;
}

/// Row order reversed (time reversal for the right-to-left scan).
template <typename T>
Tensor<T> reverse_rows(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const std::size_t n = x.rows(), c = x.cols();
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(x.data() + (n - 1 - i) * c, c, out.data() + i * c);
    return out;
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.rows() == b.rows(), "concat_cols: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    const std::size_t n = a.rows(), ca = a.cols(), cb = b.cols();
    Tensor<T> out({n, ca + cb});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.data() + i * ca, ca, out.data() + i * (ca + cb));
        std::copy_n(b.data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
    }
    return out;
}

/// Columns [begin, begin + count) of a matrix.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count) {
    detail::require(begin + count <= x.cols(), "slice_cols out of range");
    const std::size_t n = x.rows(), c = x.cols();
    Tensor<T> out({n, count});
    for (std::size_t i = 0; i < n; ++i) std::copy_n(x.data() + i * c + begin, count, out.data() + i * count);
    return out;
}

// ---------------------------------------------------------------------------
// Scalar nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
T sigmoid(T x) {
    if (x >= 0) return T{1} / (T{1} + std::exp(-x));
    const T e = std::exp(x);
    return e / (T{1} + e);
}

template <typename T>
T softplus(T x) {
    // log(1 + e^x) without overflow for large x
    return x > T{20} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T inverse_softplus(T y) {
    return y > T{20} ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

template <typename T>
T silu(T x) {
    return x * sigmoid(x);
}

template <typename T>
T silu_grad(T x) {
    const T s = sigmoid(x);
    return s * (T{1} + x * (T{1} - s));
}

// ---------------------------------------------------------------------------
// Masked softmax
// ---------------------------------------------------------------------------

/// Softmax over positions where `valid` is set; masked positions are exactly 0.
template <typename T>
std::vector<T> softmax_masked(std::span<const T> logits, const std::vector<bool>& valid) {
    detail::require(valid.size() == logits.size(), "softmax_masked: mask length mismatch");
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (valid[i]) {
            mx = std::max(mx, logits[i]);
            any = true;
        }
    }
    if (!any) throw EmptyChunkError();
    std::vector<T> out(logits.size(), T{0});
    T sum = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (valid[i]) {
            out[i] = std::exp(logits[i] - mx);
            sum += out[i];
        }
    }
    for (T& v : out) v /= sum;
    return out;
}

template <typename T>
std::vector<T> softmax_masked(const std::vector<T>& logits, const std::vector<bool>& valid) {
    return softmax_masked(std::span<const T>(logits), valid);
}

}  // namespace sstc
