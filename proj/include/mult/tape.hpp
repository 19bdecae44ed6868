// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over a linear tape.
//
// Every differentiable operation appends one entry to a Tape holding its
// output value, the ids of its inputs and a closure that maps the output
// gradient onto input gradients. Entries are appended in evaluation order, so
// the tape is topologically sorted by construction and backward() is a single
// reverse sweep that visits each node once.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mult/tensor.hpp"

namespace mult {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Receives the gradient of the entry's output and scatters it into the
  /// inputs through Tape::accum.
  using BackwardFn = std::function<void(std::span<const double> out_grad, Tape& tape)>;

  /// With grad disabled no backward closures are stored (pure evaluation).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf whose gradient is retrievable with grad() after backward().
  Var variable(Tensor value);
  /// Leaf bound to a parameter; backward() accumulates into p.tensor.grad().
  Var parameter(Parameter& p);

  /// Appends an operation output. `fn` is dropped when no input needs a gradient.
  Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);

  const Tensor& value(std::size_t id) const;
  const Tensor& value(Var v) const { return value(v.id()); }
  bool needs_grad(std::size_t id) const { return entries_[id].needs_grad; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  /// Gradient buffer of node `id` to add into; empty when the node does not
  /// take part in differentiation.
  std::span<double> accum(std::size_t id);

  /// Gradient of a leaf or intermediate after the last backward().
  std::span<const double> grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. The loss must
  /// hold exactly one element. Node gradients are reset at the start of every
  /// call; parameter gradients accumulate across calls until zero_grad().
  void backward(Var loss);

  std::size_t size() const noexcept { return entries_.size(); }
  const char* op_name(std::size_t id) const { return entries_[id].op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return entries_[id].inputs; }

 private:
  struct Entry {
    const char* op = "";
    Tensor value;
    const Tensor* external = nullptr;
    Parameter* param = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::vector<double> grad;
    bool needs_grad = false;
  };

  Var push(Entry entry);

  // deque: references to earlier values stay valid while new entries are appended.
  std::deque<Entry> entries_;
  bool grad_enabled_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Matrices are rank-2 [rows x cols]; a rank-1
// tensor of length n is accepted wherever a single row is expected.

Var matmul(Var a, Var b);
/// a * b^T without materialising the transpose.
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
/// Same data, new shape with equal element count.
Var reshape(Var a, Shape shape);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// Adds a length-n vector to every row of a [m x n] matrix.
Var add_row_vector(Var a, Var bias);
/// Adds a constant tensor of the same shape (no gradient to the constant).
Var add_constant(Var a, const Tensor& c);

Var relu(Var a);
Var tanh(Var a);

Var sum(Var a);
Var mean(Var a);

/// Row-wise softmax with max subtraction. `key_valid`, when non-empty, has one
/// flag per column; masked columns receive probability exactly zero.
Var softmax_rows(Var a, const std::vector<bool>& key_valid = {});
Var log_softmax_rows(Var a);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
/// Elementwise product with a fixed mask (dropout and similar gating).
Var mul_constant(Var a, const Tensor& c);

/// mean |pred - target|
Var l1_loss(Var pred, const Tensor& target);
/// mean (pred - target)^2
Var l2_loss(Var pred, const Tensor& target);
/// Mean over rows of -log softmax(logits)[row, label[row]].
Var softmax_cross_entropy(Var logits, const std::vector<std::size_t>& labels);

// ---------------------------------------------------------------------------
// Finite-difference oracle.

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<name>[<flat index>]" of the worst coordinate
  std::size_t coordinates = 0;
};

/// Compares the tape gradient of scalar f at x with central differences.
/// Error per coordinate is |analytic - numeric| / max(1, |numeric|).
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps);

/// Same check over model parameters. `max_coords_per_param` = 0 checks every
/// coordinate; otherwise a seeded random subset of each parameter is checked.
GradCheckResult grad_check_parameters(const std::function<Var(Tape&)>& loss,
                                      const ParameterList& params, double eps,
                                      std::size_t max_coords_per_param = 0,
                                      std::uint64_t seed = 0);

}  // namespace mult
