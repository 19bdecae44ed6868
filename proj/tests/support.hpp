// Shared helpers for the unit suites.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mult/tensor.hpp"

namespace testing {

inline mult::Tensor random_tensor(mult::Shape shape, mult::Rng& rng, double scale = 1.0) {
  mult::Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

inline double max_abs_diff(const mult::Tensor& a, const mult::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

/// Plain triple-loop product.
inline mult::Tensor naive_matmul(const mult::Tensor& a, const mult::Tensor& b) {
  mult::Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

inline mult::Tensor naive_softmax_rows(const mult::Tensor& a) {
  mult::Tensor out(a.shape());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) z += std::exp(a.at(i, j));
    for (std::size_t j = 0; j < a.cols(); ++j) out.at(i, j) = std::exp(a.at(i, j)) / z;
  }
  return out;
}

}  // namespace testing
