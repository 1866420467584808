#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "eqan/errors.hpp"

namespace eqan {

// C x n1 x n2 association-node features, channel-major.
template <typename T>
struct FeatureTensor {
  std::size_t channels = 0;
  std::size_t n1 = 0;
  std::size_t n2 = 0;
  std::vector<T> data;

  FeatureTensor() = default;
  FeatureTensor(std::size_t c, std::size_t rows, std::size_t cols, T fill = T{})
      : channels(c), n1(rows), n2(cols), data(c * rows * cols, fill) {}
  FeatureTensor(std::size_t c, std::size_t rows, std::size_t cols, std::vector<T> values)
      : channels(c), n1(rows), n2(cols), data(std::move(values)) {
    if (data.size() != c * rows * cols) throw InputError("feature tensor: data size does not match shape");
  }

  std::size_t plane() const noexcept { return n1 * n2; }
  T& operator()(std::size_t c, std::size_t i, std::size_t j) { return data[(c * n1 + i) * n2 + j]; }
  const T& operator()(std::size_t c, std::size_t i, std::size_t j) const {
    return data[(c * n1 + i) * n2 + j];
  }
  std::span<T> channel(std::size_t c) { return {data.data() + c * plane(), plane()}; }
  std::span<const T> channel(std::size_t c) const { return {data.data() + c * plane(), plane()}; }
};

}  // namespace eqan
