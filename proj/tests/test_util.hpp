#pragma once

#include <cstdint>
#include <random>

#include "xraysep/pipeline.hpp"
#include "xraysep/tensor.hpp"

namespace xraysep::test {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::uint64_t seed, T lo = T(-1),
                        T hi = T(1)) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

inline ImagePlane random_image(std::size_t c, std::size_t h, std::size_t w,
                               std::uint64_t seed) {
  return ImagePlane(random_tensor<float>({c, h, w}, seed, 0.0f, 1.0f));
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  }
  return m;
}

}  // namespace xraysep::test
