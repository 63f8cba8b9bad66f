#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "srlb/errors.hpp"

namespace srlb {

// Row-major rows x cols grid of token ids.
struct TokenMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint32_t> ids;

  TokenMatrix() = default;
  TokenMatrix(std::size_t r, std::size_t c, std::vector<std::uint32_t> data) : rows(r), cols(c), ids(std::move(data)) {
    if (ids.size() != rows * cols) throw DimensionError("token matrix: id count does not match rows*cols");
  }

  std::span<const std::uint32_t> row(std::size_t r) const { return {ids.data() + r * cols, cols}; }

  // Rows picked in the given order.
  TokenMatrix gather(std::span<const std::size_t> which) const {
    TokenMatrix out;
    out.rows = which.size();
    out.cols = cols;
    out.ids.reserve(which.size() * cols);
    for (std::size_t r : which) {
      auto src = row(r);
      out.ids.insert(out.ids.end(), src.begin(), src.end());
    }
    return out;
  }

  bool operator==(const TokenMatrix&) const = default;
};

}  // namespace srlb
