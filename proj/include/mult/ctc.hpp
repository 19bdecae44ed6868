// SPDX-License-Identifier: Apache-2.0
//
// Connectionist temporal classification: loss, brute-force alignment
// enumeration, an alignment predictor, pseudo-alignment and the CTC early
// fusion baseline.

#pragma once

#include <cstddef>
#include <limits>
#include <memory>
#include <vector>

#include "mult/model.hpp"
#include "mult/tape.hpp"

namespace mult {

/// Label ids over a vocabulary of `vocab` symbols including the blank.
struct CtcTarget {
  std::vector<std::size_t> tokens;
  std::size_t blank = 0;

  /// Throws ContractError unless tokens is nonempty and every id is in range and not blank.
  void validate(std::size_t vocab) const;
  /// Shortest input length that can emit the target: one step per token plus
  /// one blank between each pair of equal neighbours.
  std::size_t min_length() const;
};

struct CtcResult {
  double loss = std::numeric_limits<double>::infinity();
  bool feasible = false;
};

/// -log of the summed probability over every alignment of `target` against
/// `log_probs` [T x vocab]. Log-space forward recursion. An input that is too
/// short gives loss = +inf and feasible = false.
CtcResult ctc_loss_value(const Tensor& log_probs, const CtcTarget& target);

/// d loss / d log_probs. Zero when the target is infeasible.
Tensor ctc_loss_gradient(const Tensor& log_probs, const CtcTarget& target);

/// Differentiable version. `feasible` (optional) reports whether the loss is finite.
Var ctc_loss(Var log_probs, const CtcTarget& target, bool* feasible = nullptr);

/// Remove repeats, then blanks.
std::vector<std::size_t> ctc_collapse(const std::vector<std::size_t>& path, std::size_t blank);

/// Every length-T path over `vocab` symbols that collapses to the target.
/// Refuses (ContractError) when T > 8 or more than 4 non-blank symbols.
std::vector<std::vector<std::size_t>> enumerate_alignments(std::size_t T, const CtcTarget& target,
                                                           std::size_t vocab);

/// Product over t of probs[t, path[t]].
double path_probability(const Tensor& probs, const std::vector<std::size_t>& path);

/// output[u] = sum_t probs[t, u + 1] * source[t]; column 0 (blank) is dropped.
Tensor pseudo_align(const Tensor& source, const Tensor& probs);
Var pseudo_align(Var source, Var probs);

/// Single-layer tanh recurrent cell emitting per-step logits over `slots + 1` columns.
struct AlignmentPredictor {
  AlignmentPredictor() = default;
  AlignmentPredictor(const std::string& name, std::size_t in, std::size_t hidden, std::size_t slots, Rng& rng);

  /// Logits [T x (slots + 1)].
  Var logits(Tape& tape, Var x);
  void collect(ParameterList& out);

  Linear input;
  Linear output;
  Parameter recurrent;
  std::size_t slots = 0;
};

/// Alignment predictors on V and A project both streams to the language
/// length; an early-fusion transformer then consumes the aligned triple.
/// ForwardResult::auxiliary_loss holds the sum of the feasible CTC terms.
class CtcBaselineModel final : public SequenceModel {
 public:
  CtcBaselineModel(const MulTConfig& cfg, std::uint64_t seed);

  const MulTConfig& config() const override { return cfg_; }
  ParameterList parameters() override;
  ForwardResult forward(Tape& tape, const ModalityTriple& x, const ForwardOptions& opts) override;

  AlignmentPredictor& predictor(Modality m);
  MulTModel& downstream() { return *downstream_; }

 private:
  MulTConfig cfg_;
  AlignmentPredictor align_v_;
  AlignmentPredictor align_a_;
  std::unique_ptr<MulTModel> downstream_;
};

/// Any variant, the CTC baseline included. The CTC baseline needs
/// cfg.ctc_max_slots > 0.
std::unique_ptr<SequenceModel> make_model(const MulTConfig& cfg, std::uint64_t seed);

}  // namespace mult
