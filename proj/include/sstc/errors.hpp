#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sstc {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A numeric parameter is outside its domain (e.g. a non-positive step size).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Masked reduction over a set with no valid entries.
class EmptyChunkError : public ParameterError {
public:
    EmptyChunkError() : ParameterError("empty chunk") {}
};

/// Caller broke a usage contract, e.g. backward with a cache from another call.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Config value rejected; `field()` names the offending key.
class ConfigError : public Error {
public:
    ConfigError(std::string field, const std::string& what)
        : Error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Binary file could not be decoded.
class FormatError : public Error {
public:
    enum class Kind { bad_magic, bad_version, bad_dtype, bad_header, truncated, duplicate_name, io };

    FormatError(Kind kind, std::uint64_t offset, const std::string& what)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), kind_(kind), offset_(offset) {}

    Kind kind() const noexcept { return kind_; }
    std::uint64_t offset() const noexcept { return offset_; }

private:
    Kind kind_;
    std::uint64_t offset_;
};

/// Training loss became non-finite.
class DivergenceError : public Error {
public:
    DivergenceError(std::int64_t last_good_step, double last_good_loss)
        : Error("loss diverged after step " + std::to_string(last_good_step)),
          last_good_step_(last_good_step), last_good_loss_(last_good_loss) {}
    std::int64_t last_good_step() const noexcept { return last_good_step_; }
    double last_good_loss() const noexcept { return last_good_loss_; }

private:
    std::int64_t last_good_step_;
    double last_good_loss_;
};

}  // namespace sstc
