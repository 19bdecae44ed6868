// SPDX-License-Identifier: Apache-2.0

#include "mult/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "mult/error.hpp"

namespace mult {

AdamState::AdamState(const ParameterList& params, double rate) : lr(rate) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const Parameter* p : params) {
    m.emplace_back(p->tensor.size(), 0.0);
    v.emplace_back(p->tensor.size(), 0.0);
  }
}

void adam_step(const ParameterList& params, AdamState& s) {
  if (s.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = params[i]->tensor;
    if (!t.has_grad()) continue;
    auto g = t.grad();
    auto& m = s.m[i];
    auto& v = s.v[i];
    for (std::size_t k = 0; k < t.size(); ++k) {
      m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * g[k];
      v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * g[k] * g[k];
      const double mh = m[k] / c1, vh = v[k] / c2;
      t[k] -= s.lr * mh / (std::sqrt(vh) + s.eps);
    }
  }
}

bool PlateauSchedule::observe(double val_loss, double& lr) {
  if (val_loss < best) {
    best = val_loss;
    bad_epochs = 0;
    return false;
  }
  if (++bad_epochs < patience) return false;
  bad_epochs = 0;
  const double next = std::max(min_lr, lr * factor);
  const bool changed = next < lr;
  lr = next;
  return changed;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
  if (!(clip_norm > 0.0)) throw ConfigError("grad_clip must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
  if (!(ctc_weight >= 0.0)) throw ConfigError("ctc_weight must be non-negative");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("lr_factor must be in (0, 1)");
  if (lr_patience == 0) throw ConfigError("lr_patience must be positive");
  if (!(min_lr >= 0.0)) throw ConfigError("min_lr must be non-negative");
}

Var task_loss(Tape& tape, Var prediction, const Label& label, TaskKind kind, LossKind loss) {
  (void)tape;
  if (kind == TaskKind::Sentiment) {
    const Tensor target = Tensor::scalar(label.score);
    if (prediction.value().size() != 1) throw DimensionError("sentiment prediction must be a single value");
    return loss == LossKind::L1 ? l1_loss(prediction, target) : l2_loss(prediction, target);
  }
  std::vector<std::size_t> labels(kEmotionCount);
  for (std::size_t k = 0; k < kEmotionCount; ++k) labels[k] = label.emotions[k] ? 1 : 0;
  return softmax_cross_entropy(reshape(prediction, {kEmotionCount, 2}), labels);
}

namespace {

struct EvalPass {
  Tensor outputs;  // [n x output_dim]
  double mean_loss = 0.0;
};

EvalPass eval_pass(SequenceModel& model, const Dataset& ds, LossKind loss) {
  const MulTConfig& cfg = model.config();
  const std::size_t out_dim = cfg.output_dim();
  if (ds.samples.empty()) throw ContractError("cannot evaluate on an empty dataset");
  EvalPass pass;
  pass.outputs = Tensor({ds.size(), out_dim}, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tape tape(false);
    ForwardOptions opts;
    ForwardResult r = model.forward(tape, ds.samples[i].x, opts);
    const auto p = r.prediction.value().data();
    for (std::size_t c = 0; c < out_dim; ++c) pass.outputs.at(i, c) = p[c];
    total += task_loss(tape, r.prediction, ds.samples[i].label, cfg.task, loss).value()[0];
  }
  pass.mean_loss = total / static_cast<double>(ds.size());
  return pass;
}

MetricReport metrics_from(const Tensor& outputs, const Dataset& ds, TaskKind kind, ZeroLabelPolicy zero) {
  MetricReport report;
  report.kind = kind;
  if (kind == TaskKind::Sentiment) {
    std::vector<double> preds(ds.size()), labels(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      preds[i] = outputs.at(i, 0);
      labels[i] = ds.samples[i].label.score;
    }
    report.sentiment = compute_sentiment_metrics(preds, labels, zero);
  } else {
    std::vector<std::array<bool, kEmotionCount>> labels;
    for (const auto& s : ds.samples) labels.push_back(s.label.emotions);
    report.emotion = compute_emotion_metrics(outputs, labels);
  }
  return report;
}

std::vector<std::vector<double>> snapshot(const ParameterList& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back(p->tensor.values());
  return out;
}

void restore(const ParameterList& params, const std::vector<std::vector<double>>& saved) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->tensor.values() = saved[i];
}

const Parameter* first_non_finite_grad(const ParameterList& params) {
  for (const Parameter* p : params) {
    for (double g : p->tensor.grad())
      if (!std::isfinite(g)) return p;
  }
  return nullptr;
}

}  // namespace

TrainResult train(SequenceModel& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                  const TrainHooks* hooks) {
  cfg.validate();
  if (train_set.samples.empty()) throw ContractError("training set is empty");
  const Dataset& val = val_set.samples.empty() ? train_set : val_set;
  if (model.config().task == TaskKind::Sentiment && val.size() < 2)
    throw ConfigError("validation set has " + std::to_string(val.size()) +
                      " sample; sentiment metrics need at least 2 (raise val_fraction or the sample count)");
  const MulTConfig& mcfg = model.config();
  ParameterList params = model.parameters();
  for (Parameter* p : params)
    if (!p->tensor.has_grad()) p->tensor.set_requires_grad(true);

  TrainResult result;
  if (cfg.epochs == 0) return result;

  AdamState adam(params, cfg.learning_rate);
  PlateauSchedule schedule{cfg.lr_factor, cfg.lr_patience, cfg.min_lr};
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<std::vector<double>> best;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order, rng);
    const double epoch_lr = adam.lr;
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      zero_grad(params);
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const Sample& s = train_set.samples[order[k]];
        Tape tape;
        ForwardOptions opts;
        opts.mode = Mode::Train;
        opts.rng = &rng;
        ForwardResult r = model.forward(tape, s.x, opts);
        Var loss = task_loss(tape, r.prediction, s.label, mcfg.task, cfg.loss);
        if (r.auxiliary_loss.valid() && cfg.ctc_weight > 0.0) loss = add(loss, scale(r.auxiliary_loss, cfg.ctc_weight));
        tape.backward(scale(loss, inv));
        const double value = loss.value()[0];
        if (!std::isfinite(value)) {
          const Parameter* bad = first_non_finite_grad(params);
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                              std::to_string(result.steps + 1) + "; first non-finite parameter gradient: " +
                              (bad ? bad->name : std::string("none")));
        }
        batch_loss += value * inv;
      }
      if (const Parameter* bad = first_non_finite_grad(params)) {
        throw TrainingError("non-finite gradient at epoch " + std::to_string(epoch) + " step " +
                            std::to_string(result.steps + 1) + " in parameter " + bad->name);
      }
      StepInfo info;
      info.epoch = epoch;
      info.step = ++result.steps;
      info.loss = batch_loss;
      info.grad_norm = global_grad_norm(params);
      clip_gradient_norm(params, cfg.clip_norm);
      info.clipped_norm = global_grad_norm(params);
      info.lr = adam.lr;
      adam_step(params, adam);
      epoch_loss += batch_loss * static_cast<double>(end - start);
      if (hooks && hooks->on_step) hooks->on_step(info);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(train_set.size());
    rec.lr = epoch_lr;
    const EvalPass pass = eval_pass(model, val, cfg.loss);
    rec.val_loss = pass.mean_loss;
    rec.val_metrics = metrics_from(pass.outputs, val, mcfg.task, cfg.zero_labels);
    if (rec.val_loss < result.best_val_loss || best.empty()) {
      result.best_val_loss = rec.val_loss;
      result.best_epoch = epoch;
      best = snapshot(params);
    }
    schedule.observe(rec.val_loss, adam.lr);
    result.history.push_back(rec);
    if (hooks && hooks->stop_after && hooks->stop_after(rec)) break;
  }
  restore(params, best);
  zero_grad(params);
  return result;
}

TrainResult train(SequenceModel& model, const Dataset& data, const TrainConfig& cfg, const TrainHooks* hooks) {
  cfg.validate();
  auto [tr, val] = split_dataset(data, 1.0 - cfg.val_fraction, cfg.seed);
  return train(model, tr, val, cfg, hooks);
}

Tensor predict(SequenceModel& model, const ModalityTriple& x) {
  Tape tape(false);
  return model.forward(tape, x, ForwardOptions{}).prediction.value();
}

MetricReport evaluate(SequenceModel& model, const Dataset& ds, ZeroLabelPolicy zero) {
  const EvalPass pass = eval_pass(model, ds, LossKind::L1);
  return metrics_from(pass.outputs, ds, model.config().task, zero);
}

double evaluate_loss(SequenceModel& model, const Dataset& ds, LossKind loss) {
  return eval_pass(model, ds, loss).mean_loss;
}

void write_history_csv(const std::vector<EpochRecord>& history, TaskKind kind, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw InputError("cannot open '" + path + "' for writing");
  MetricReport blank;
  blank.kind = kind;
  f << "epoch,train_loss,val_loss,lr";
  for (const auto& [name, value] : blank.entries()) f << ",val_" << name;
  f << "\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : history) {
    f << r.epoch << "," << num(r.train_loss) << "," << num(r.val_loss) << "," << num(r.lr);
    for (const auto& [name, value] : r.val_metrics.entries()) f << "," << num(value);
    f << "\n";
  }
}

}  // namespace mult
