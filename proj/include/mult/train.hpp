// SPDX-License-Identifier: Apache-2.0
//
// Adam, plateau learning-rate decay, and the training / evaluation loops.

#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mult/data.hpp"
#include "mult/metrics.hpp"
#include "mult/model.hpp"

namespace mult {

enum class LossKind { L1, L2 };

struct AdamState {
  AdamState() = default;
  AdamState(const ParameterList& params, double lr);

  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update from the accumulated gradients.
void adam_step(const ParameterList& params, AdamState& state);

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without a new best validation loss.
struct PlateauSchedule {
  double factor = 0.1;
  std::size_t patience = 3;
  double min_lr = 0.0;
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;

  /// Returns true when the rate was decayed.
  bool observe(double val_loss, double& lr);
};

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 20;
  double learning_rate = 1e-3;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  LossKind loss = LossKind::L1;
  double val_fraction = 0.1;
  double ctc_weight = 0.1;
  std::size_t lr_patience = 3;
  double lr_factor = 0.1;
  double min_lr = 0.0;
  ZeroLabelPolicy zero_labels = ZeroLabelPolicy::Exclude;

  void validate() const;
};

struct StepInfo {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // 1-based, across epochs
  double loss = 0.0;
  double grad_norm = 0.0;       // before clipping
  double clipped_norm = 0.0;    // after clipping
  double lr = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // rate used during the epoch
  MetricReport val_metrics;
};

struct TrainHooks {
  std::function<void(const StepInfo&)> on_step;
  /// Called after every epoch; returning true ends training early.
  std::function<bool(const EpochRecord&)> stop_after;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;  // 0 when no epoch ran
  std::size_t steps = 0;
};

/// Per-sample task loss: L1/L2 on the score, or the mean two-way cross-entropy
/// over the emotions.
Var task_loss(Tape& tape, Var prediction, const Label& label, TaskKind kind, LossKind loss);

/// Runs `cfg.epochs` epochs over `train_set`: shuffled mini-batches, Adam on
/// the batch-mean loss, global gradient clipping, plateau decay on the
/// validation loss. The parameters of the best validation epoch are restored
/// at the end.
TrainResult train(SequenceModel& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                  const TrainHooks* hooks = nullptr);

/// Splits `data` by cfg.val_fraction (seeded by cfg.seed), then trains.
TrainResult train(SequenceModel& model, const Dataset& data, const TrainConfig& cfg,
                  const TrainHooks* hooks = nullptr);

/// Eval-mode prediction, [1 x output_dim].
Tensor predict(SequenceModel& model, const ModalityTriple& x);

MetricReport evaluate(SequenceModel& model, const Dataset& ds,
                      ZeroLabelPolicy zero = ZeroLabelPolicy::Exclude);

/// Mean eval-mode task loss (auxiliary terms excluded).
double evaluate_loss(SequenceModel& model, const Dataset& ds, LossKind loss);

/// Columns: epoch, train_loss, val_loss, lr, then one column per metric.
void write_history_csv(const std::vector<EpochRecord>& history, TaskKind kind, const std::string& path);

}  // namespace mult
