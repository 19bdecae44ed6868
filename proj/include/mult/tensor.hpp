// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors, trainable parameters and the project-wide RNG.

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mult {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Row-major dense f64 array. `grad` is empty until a gradient is attached;
/// when present it always has the same element count as `data`.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  // 2-D accessors; a rank-1 tensor is treated as a single row.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on);
  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<double> grad() noexcept { return grad_; }
  std::span<const double> grad() const noexcept { return grad_; }
  void zero_grad();

  /// Copy of rows [begin, begin + count).
  Tensor slice_rows(std::size_t begin, std::size_t count) const;

  bool all_finite() const;
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::vector<double> grad_;
};

/// A named trainable tensor. Names are dotted paths unique within a model,
/// e.g. "crossmodal.V_to_L.layer2.attn.head0.W_Q".
struct Parameter {
  Parameter() = default;
  Parameter(std::string n, Tensor t) : name(std::move(n)), tensor(std::move(t)) {
    tensor.set_requires_grad(true);
  }
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<Parameter*>;

void zero_grad(const ParameterList& params);
double global_grad_norm(const ParameterList& params);

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the applied factor min(1, max_norm / norm); 1 when all grads are zero.
double clip_gradient_norm(const ParameterList& params, double max_norm);

std::size_t parameter_count(const ParameterList& params);

/// SplitMix64 (Steele, Lea & Flood 2014): 64-bit state, increment by the golden
/// gamma 0x9E3779B97F4A7C15 then a two-round xor-shift-multiply finalizer.
/// Normal variates come from the Box-Muller transform, so every draw is
/// reproducible bit-for-bit independent of the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }

  /// Independent stream derived from (seed, index); used to partition the seed
  /// space per sample so generation order does not matter.
  static Rng derive(std::uint64_t seed, std::uint64_t index);

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Fisher-Yates shuffle driven by `rng`.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = rng.below(i);
    std::swap(v[i - 1], v[j]);
  }
}

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

}  // namespace mult
