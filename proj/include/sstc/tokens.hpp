#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "sstc/tensor.hpp"

namespace sstc {

/// Interleaved patch/query tokens. Each query closes the chunk of patches that precede it.
template <typename T>
struct TokenSequence {
    Tensor<T> tokens;                 // [T × d]
    std::vector<bool> is_query;       // [T]
    std::vector<std::uint32_t> frame_of;  // [T], non-decreasing

    std::size_t length() const { return is_query.size(); }

    std::size_t query_count() const {
        std::size_t n = 0;
        for (bool q : is_query) n += q;
        return n;
    }

    std::vector<std::size_t> query_positions() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < is_query.size(); ++i)
            if (is_query[i]) out.push_back(i);
        return out;
    }
};

}  // namespace sstc
