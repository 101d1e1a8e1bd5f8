#pragma once

#include "plm/tensor.hpp"

#include <random>

namespace plm {

using Rng = std::mt19937_64;

/// Values are drawn in double precision so float and double builds share a stream.
template <typename Scalar>
Tensor<Scalar> normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<Scalar> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
Tensor<Scalar> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<Scalar> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

}  // namespace plm
