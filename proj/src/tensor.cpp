// SPDX-License-Identifier: Apache-2.0

#include "mult/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "mult/error.hpp"

namespace mult {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto s : shape_) {
    if (s == 0) throw DimensionError("tensor shape " + shape_string(shape_) + " has a zero extent");
  }
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto s : shape_) {
    if (s == 0) throw DimensionError("tensor shape " + shape_string(shape_) + " has a zero extent");
  }
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.empty()) return 0;
  if (shape_.size() == 1) return 1;
  return data_.size() / shape_.back();
}

std::size_t Tensor::cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on && grad_.empty()) grad_.assign(data_.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), 0.0);
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t count) const {
  if (begin + count > rows() || count == 0) {
    throw DimensionError("row slice [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_string(shape_));
  }
  const std::size_t c = cols();
  std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                          data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  return Tensor({count, c}, std::move(out));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void zero_grad(const ParameterList& params) {
  for (auto* p : params) p->tensor.zero_grad();
}

double global_grad_norm(const ParameterList& params) {
  double sq = 0.0;
  for (const auto* p : params) {
    for (double g : p->tensor.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_gradient_norm(const ParameterList& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_gradient_norm: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return 1.0;
  const double scale = max_norm / norm;
  for (auto* p : params) {
    for (double& g : p->tensor.grad()) g *= scale;
  }
  return scale;
}

std::size_t parameter_count(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->tensor.size();
  return n;
}

std::uint64_t Rng::next_u64() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw ContractError("Rng::below(0)");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return static_cast<std::size_t>(x % n);
}

Rng Rng::derive(std::uint64_t seed, std::uint64_t index) {
  Rng mixer(seed ^ (index * 0xD1B54A32D192ED03ULL));
  mixer.next_u64();
  return Rng(mixer.next_u64() ^ index);
}

Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace mult
