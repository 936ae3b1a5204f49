#pragma once

#include <cmath>
#include <random>

#include "lmunet/tensor.hpp"

namespace lmunet {

/// Uniform in [-bound, bound] with bound = sqrt(3 / fan_in): unit-gain
/// Kaiming-uniform, so outputs keep the input variance at initialization.
template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(3.0 / static_cast<double>(fan_in ? fan_in : 1));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> constant_tensor(Shape shape, T value) {
  return Tensor<T>(std::move(shape), value);
}

}  // namespace lmunet
