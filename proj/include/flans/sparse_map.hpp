// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace flans {

// A fixed linear map out[r] = sum_k weight[k] * in[src[k]] over the entries
// of row r. Index permutations (weight 1, one entry per row) reproduce their
// inputs bit-exactly; bilinear resampling uses up to four entries per row.
struct SparseMap {
  std::size_t in_size = 0;
  std::vector<std::uint32_t> row_begin{0};
  std::vector<std::uint32_t> src;
  std::vector<double> weight;

  std::size_t out_size() const noexcept { return row_begin.size() - 1; }

  void push(std::uint32_t from, double w) {
    src.push_back(from);
    weight.push_back(w);
  }
  void end_row() { row_begin.push_back(static_cast<std::uint32_t>(src.size())); }

  // Applies the map to `in`, which may hold several consecutive blocks of
  // in_size values; each block is mapped independently.
  template <typename T>
  void apply(std::span<const T> in, std::span<T> out) const {
    const std::size_t blocks = in.size() / in_size;
    const std::size_t rows = out_size();
    for (std::size_t b = 0; b < blocks; ++b) {
      const T* x = in.data() + b * in_size;
      T* y = out.data() + b * rows;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::uint32_t lo = row_begin[r];
        const std::uint32_t hi = row_begin[r + 1];
        if (lo == hi) {
          y[r] = T(0);
          continue;
        }
        T acc = weight[lo] == 1.0 ? x[src[lo]] : static_cast<T>(weight[lo]) * x[src[lo]];
        for (std::uint32_t k = lo + 1; k < hi; ++k) {
          acc += static_cast<T>(weight[k]) * x[src[k]];
        }
        y[r] = acc;
      }
    }
  }

  // in_grad += M^T out_grad, blockwise.
  template <typename T>
  void apply_transpose_add(std::span<const T> out_grad, std::span<T> in_grad) const {
    const std::size_t blocks = in_grad.size() / in_size;
    const std::size_t rows = out_size();
    for (std::size_t b = 0; b < blocks; ++b) {
      const T* gy = out_grad.data() + b * rows;
      T* gx = in_grad.data() + b * in_size;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::uint32_t k = row_begin[r]; k < row_begin[r + 1]; ++k) {
          gx[src[k]] += static_cast<T>(weight[k]) * gy[r];
        }
      }
    }
  }
};

}  // namespace flans
