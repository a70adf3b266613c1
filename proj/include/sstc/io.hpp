#pragma once

// File formats.
//
// Tensor record (little-endian):
//   "STTC" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim (≤8) | ndim × u64 dims | payload
//
// Weights archive:
//   "STTA" | u32 version=1 | u32 count | count × (u16 name_len | UTF-8 name | tensor record)
//
// Model config is JSON; see docs/config.schema.json.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"

#include "sstc/errors.hpp"
#include "sstc/pipeline.hpp"
#include "sstc/tensor.hpp"

namespace sstc {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

inline constexpr char kTensorMagic[4] = {'S', 'T', 'T', 'C'};
inline constexpr char kArchiveMagic[4] = {'S', 'T', 'T', 'A'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kMaxRank = 8;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

template <typename T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct TensorHeader {
    std::uint32_t version = kFormatVersion;
    DType dtype = DType::f32;
    Shape dims;

    std::size_t header_bytes() const { return 4 + 4 + 1 + 1 + 8 * dims.size(); }
    std::size_t payload_bytes() const { return shape_numel(dims) * dtype_size(dtype); }
};

namespace detail {

class ByteWriter {
public:
    explicit ByteWriter(std::ostream& os) : os_(os) {}

    void raw(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), std::streamsize(n)); }

    template <typename U>
    void uint(U v) {
        char buf[sizeof(U)];
        for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
        raw(buf, sizeof(U));
    }

    template <typename T>
    void floats(const std::vector<T>& values) {
        using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
        std::vector<char> buf(values.size() * sizeof(T));
        for (std::size_t i = 0; i < values.size(); ++i) {
            const Bits bits = std::bit_cast<Bits>(values[i]);
            for (std::size_t b = 0; b < sizeof(T); ++b)
                buf[i * sizeof(T) + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
        }
        raw(buf.data(), buf.size());
    }

private:
    std::ostream& os_;
};

class ByteReader {
public:
    ByteReader(std::istream& is, std::uint64_t offset) : is_(is), offset_(offset) {}

    std::uint64_t offset() const { return offset_; }

    void raw(void* p, std::size_t n, const char* what) {
        is_.read(static_cast<char*>(p), std::streamsize(n));
        const auto got = static_cast<std::size_t>(is_.gcount());
        if (got != n) {
            throw FormatError(FormatError::Kind::truncated, offset_ + got,
                              std::string("truncated ") + what + ": expected " + std::to_string(n) + " bytes, got " +
                                  std::to_string(got));
        }
        offset_ += n;
    }

    template <typename U>
    U uint(const char* what) {
        unsigned char buf[sizeof(U)];
        raw(buf, sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
        return v;
    }

    template <typename T>
    std::vector<T> floats(std::size_t count) {
        using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
        // Chunked so a corrupt header announcing a huge payload fails on truncation, not on allocation.
        constexpr std::size_t kChunk = std::size_t(1) << 18;
        std::vector<T> out;
        std::vector<unsigned char> buf;
        for (std::size_t done = 0; done < count;) {
            const std::size_t n = std::min(kChunk, count - done);
            buf.resize(n * sizeof(T));
            raw(buf.data(), buf.size(), "payload");
            for (std::size_t i = 0; i < n; ++i) {
                Bits bits = 0;
                for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<Bits>(buf[i * sizeof(T) + b]) << (8 * b);
                out.push_back(std::bit_cast<T>(bits));
            }
            done += n;
        }
        return out;
    }

private:
    std::istream& is_;
    std::uint64_t offset_;
};

inline void check_magic(ByteReader& r, const char (&expected)[4]) {
    const std::uint64_t at = r.offset();
    char magic[4];
    r.raw(magic, 4, "magic");
    if (std::memcmp(magic, expected, 4) != 0)
        throw FormatError(FormatError::Kind::bad_magic, at,
                          "bad magic: expected \"" + std::string(expected, 4) + "\"");
}

inline void check_version(ByteReader& r) {
    const std::uint64_t at = r.offset();
    const auto version = r.uint<std::uint32_t>("version");
    if (version != kFormatVersion)
        throw FormatError(FormatError::Kind::bad_version, at,
                          "unsupported format version " + std::to_string(version));
}

inline TensorHeader read_header(ByteReader& r) {
    TensorHeader h;
    check_magic(r, kTensorMagic);
    check_version(r);
    const std::uint64_t dtype_at = r.offset();
    const auto dtype = r.uint<std::uint8_t>("dtype");
    if (dtype > 1) throw FormatError(FormatError::Kind::bad_dtype, dtype_at, "unknown dtype code " + std::to_string(dtype));
    h.dtype = static_cast<DType>(dtype);
    const std::uint64_t ndim_at = r.offset();
    const auto ndim = r.uint<std::uint8_t>("ndim");
    if (ndim > kMaxRank) throw FormatError(FormatError::Kind::bad_header, ndim_at, "rank " + std::to_string(ndim) + " exceeds 8");
    const std::uint64_t dims_at = r.offset();
    std::uint64_t bytes = dtype_size(h.dtype);
    for (std::size_t i = 0; i < ndim; ++i) {
        const auto dim = r.uint<std::uint64_t>("dims");
        if (dim != 0 && bytes > std::numeric_limits<std::uint64_t>::max() / dim)
            throw FormatError(FormatError::Kind::bad_header, dims_at, "dims overflow the addressable payload size");
        bytes *= dim;
        h.dims.push_back(dim);
    }
    return h;
}

template <typename T>
void write_record(ByteWriter& w, const Tensor<T>& t) {
    if (t.rank() > kMaxRank) throw DimensionError("tensor rank exceeds 8");
    w.raw(kTensorMagic, 4);
    w.uint<std::uint32_t>(kFormatVersion);
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<T>()));
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto dim : t.shape()) w.uint<std::uint64_t>(dim);
    w.floats(t.values());
}

inline AnyTensor read_record(ByteReader& r) {
    const TensorHeader h = read_header(r);
    const std::size_t n = shape_numel(h.dims);
    if (h.dtype == DType::f32) return Tensor<float>(h.dims, r.floats<float>(n));
    return Tensor<double>(h.dims, r.floats<double>(n));
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError(FormatError::Kind::io, 0, "cannot open " + path + " for writing");
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(FormatError::Kind::io, 0, "cannot open " + path);
    return is;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensors
// ---------------------------------------------------------------------------

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    detail::ByteWriter w(os);
    detail::write_record(w, t);
}

template <typename T>
void write_tensor(const std::string& path, const Tensor<T>& t) {
    auto os = detail::open_out(path);
    write_tensor(os, t);
    if (!os) throw FormatError(FormatError::Kind::io, 0, "write failed for " + path);
}

inline AnyTensor read_tensor(std::istream& is) {
    detail::ByteReader r(is, 0);
    return detail::read_record(r);
}

inline AnyTensor read_tensor(const std::string& path) {
    auto is = detail::open_in(path);
    return read_tensor(is);
}

/// Reads only the header; the payload is not touched.
inline TensorHeader read_tensor_header(const std::string& path) {
    auto is = detail::open_in(path);
    detail::ByteReader r(is, 0);
    return detail::read_header(r);
}

template <typename T>
Tensor<T> as_tensor(const AnyTensor& any) {
    return std::visit([](const auto& t) { return tensor_cast<T>(t); }, any);
}

// ---------------------------------------------------------------------------
// Weights archive
// ---------------------------------------------------------------------------

using NamedTensors = std::vector<std::pair<std::string, AnyTensor>>;

inline void write_weights_archive(std::ostream& os, const NamedTensors& entries) {
    std::set<std::string> seen;
    for (const auto& [name, _] : entries) {
        if (!seen.insert(name).second)
            throw FormatError(FormatError::Kind::duplicate_name, 0, "duplicate weight name \"" + name + "\"");
        if (name.size() > 0xFFFF) throw FormatError(FormatError::Kind::bad_header, 0, "weight name too long");
    }
    detail::ByteWriter w(os);
    w.raw(kArchiveMagic, 4);
    w.uint<std::uint32_t>(kFormatVersion);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, tensor] : entries) {
        w.uint<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
        w.raw(name.data(), name.size());
        std::visit([&](const auto& t) { detail::write_record(w, t); }, tensor);
    }
}

inline void write_weights_archive(const std::string& path, const NamedTensors& entries) {
    auto os = detail::open_out(path);
    write_weights_archive(os, entries);
    if (!os) throw FormatError(FormatError::Kind::io, 0, "write failed for " + path);
}

inline NamedTensors read_weights_archive(std::istream& is) {
    detail::ByteReader r(is, 0);
    detail::check_magic(r, kArchiveMagic);
    detail::check_version(r);
    const auto count = r.uint<std::uint32_t>("entry count");
    NamedTensors out;
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint64_t at = r.offset();
        const auto len = r.uint<std::uint16_t>("name length");
        std::string name(len, '\0');
        r.raw(name.data(), len, "name");
        if (!seen.insert(name).second)
            throw FormatError(FormatError::Kind::duplicate_name, at, "duplicate weight name \"" + name + "\"");
        out.emplace_back(std::move(name), detail::read_record(r));
    }
    return out;
}

inline NamedTensors read_weights_archive(const std::string& path) {
    auto is = detail::open_in(path);
    return read_weights_archive(is);
}

/// Archive entries do not match the parameters a model expects.
class WeightsMismatchError : public Error {
public:
    WeightsMismatchError(std::vector<std::string> missing, std::vector<std::string> extra)
        : Error(describe(missing, extra)), missing_(std::move(missing)), extra_(std::move(extra)) {}
    const std::vector<std::string>& missing() const { return missing_; }
    const std::vector<std::string>& extra() const { return extra_; }

private:
    static std::string describe(const std::vector<std::string>& missing, const std::vector<std::string>& extra) {
        std::string s = "weights archive does not match model;";
        auto join = [](const std::vector<std::string>& v) {
            std::string out;
            for (const auto& n : v) out += (out.empty() ? "" : ", ") + n;
            return out;
        };
        if (!missing.empty()) s += " missing: " + join(missing) + ";";
        if (!extra.empty()) s += " unexpected: " + join(extra) + ";";
        return s;
    }
    std::vector<std::string> missing_, extra_;
};

template <typename T>
NamedTensors model_to_named(const MambaMiaModel<T>& model) {
    NamedTensors out;
    model.visit([&](const std::string& name, const Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
}

/// Builds a model for `cfg` from archive entries. Names must match exactly; shapes must agree.
template <typename T>
MambaMiaModel<T> model_from_named(const NamedTensors& entries, const MambaMiaConfig& cfg) {
    MambaMiaModel<T> model = zeros_like(init_mambamia<T>(cfg, 0));
    std::map<std::string, const AnyTensor*> by_name;
    for (const auto& [name, t] : entries) by_name[name] = &t;
    std::vector<std::string> missing, extra;
    std::set<std::string> expected;
    model.visit([&](const std::string& name, Tensor<T>& t) {
        expected.insert(name);
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            missing.push_back(name);
            return;
        }
        Tensor<T> loaded = as_tensor<T>(*it->second);
        if (loaded.shape() != t.shape())
            throw DimensionError("weight \"" + name + "\" has shape " + shape_string(loaded.shape()) + ", expected " +
                                 shape_string(t.shape()));
        t = std::move(loaded);
    });
    for (const auto& [name, _] : entries)
        if (!expected.count(name)) extra.push_back(name);
    if (!missing.empty() || !extra.empty()) throw WeightsMismatchError(std::move(missing), std::move(extra));
    return model;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

inline nlohmann::json config_to_json(const MambaMiaConfig& c) {
    return {{"d", c.d},         {"d_state", c.d_state},     {"expand", c.expand},
            {"w_conv", c.w_conv}, {"layers", c.layers},     {"k", c.k},
            {"s", c.s.str()},   {"n_patches", c.n_patches}, {"m_max", c.m_max},
            {"gate_epsilon", c.gate_epsilon}, {"heads", c.heads}};
}

/// Strict parse: unknown keys are rejected, missing keys take their defaults, `d` is required.
inline MambaMiaConfig parse_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("<json>", std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("<json>", "config must be a JSON object");

    MambaMiaConfig cfg;
    const std::map<std::string, std::size_t*> counts = {
        {"d", &cfg.d},           {"d_state", &cfg.d_state},     {"expand", &cfg.expand},
        {"w_conv", &cfg.w_conv}, {"layers", &cfg.layers},       {"k", &cfg.k},
        {"n_patches", &cfg.n_patches}, {"m_max", &cfg.m_max}, {"heads", &cfg.heads}};
    for (const auto& [key, value] : j.items()) {
        if (auto it = counts.find(key); it != counts.end()) {
            if (!value.is_number_integer()) throw ConfigError(key, "expected an integer");
            if (value.get<std::int64_t>() < 0) throw ConfigError(key, "must be non-negative");
            *it->second = value.get<std::size_t>();
        } else if (key == "s") {
            if (!value.is_string()) throw ConfigError("s", "expected a rational string such as \"1/3\"");
            try {
                cfg.s = Rational::parse(value.get<std::string>());
            } catch (const ParameterError& e) {
                throw ConfigError("s", e.what());
            }
        } else if (key == "gate_epsilon") {
            if (!value.is_number()) throw ConfigError(key, "expected a number");
            cfg.gate_epsilon = value.get<double>();
        } else {
            throw ConfigError(key, "unknown config key");
        }
    }
    if (!j.contains("d")) throw ConfigError("d", "required key missing");
    cfg.validate();
    return cfg;
}

inline MambaMiaConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError(FormatError::Kind::io, 0, "cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

}  // namespace sstc
