// SPDX-License-Identifier: Apache-2.0

#include "mult/gradcheck.hpp"

#include <algorithm>
#include <functional>

#include "mult/attention.hpp"
#include "mult/ctc.hpp"
#include "mult/error.hpp"
#include "mult/layers.hpp"
#include "mult/model.hpp"

namespace mult {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

/// Identity forward whose backward doubles the gradient.
Var corrupted_identity(Var x) {
  const std::size_t ix = x.id();
  return x.tape().record("corrupted_identity", x.value(), {ix}, [ix](std::span<const double> g, Tape& t) {
    auto d = t.accum(ix);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += 2.0 * g[i];
  });
}

Var maybe_corrupt(Var v, bool fault) { return fault ? corrupted_identity(v) : v; }

/// Generic scalar readout: sum(out * weights).
Var readout(Var out, const Tensor& weights) { return sum(mul_constant(out, weights)); }

struct Case {
  std::string name;
  // Builds the loss given the tape, the input variable and whether to corrupt.
  std::function<Var(Tape&, Var, bool)> loss;
  Tensor input;
  ParameterList params;
};

GradCheckEntry run_case(const Case& c, const GradCheckOptions& opts) {
  const bool fault = opts.inject_fault == c.name;
  GradCheckEntry e;
  e.component = c.name;
  if (c.input.size() > 0) {
    const double err = grad_check([&](Tape& t, Var x) { return c.loss(t, x, fault); }, c.input, opts.eps);
    e.max_rel_error = err;
    e.worst = "input";
    e.coordinates += c.input.size();
  }
  if (!c.params.empty()) {
    const Tensor& in = c.input;
    GradCheckResult r = grad_check_parameters(
        [&](Tape& t) { return c.loss(t, in.size() ? t.constant(in) : Var{}, fault); }, c.params, opts.eps);
    if (r.max_rel_error > e.max_rel_error || e.worst.empty()) {
      e.max_rel_error = r.max_rel_error;
      e.worst = r.worst;
    }
    e.coordinates += r.coordinates;
  }
  e.pass = e.max_rel_error < opts.threshold;
  return e;
}

}  // namespace

bool GradCheckReport::all_pass() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.pass; });
}

std::vector<std::string> GradCheckReport::failures() const {
  std::vector<std::string> out;
  for (const auto& e : entries)
    if (!e.pass) out.push_back(e.component);
  return out;
}

std::vector<std::string> gradcheck_components() {
  return {"linear",           "temporal_conv",         "layer_norm",          "feed_forward",
          "single_head_attention", "multi_head_attention", "crossmodal_block", "self_attention_block",
          "prediction_head",  "alignment_predictor",   "ctc_loss",            "tiny_full_mult"};
}

GradCheckReport run_gradcheck_suite(const GradCheckOptions& opts) {
  const auto names = gradcheck_components();
  if (!opts.inject_fault.empty() && std::find(names.begin(), names.end(), opts.inject_fault) == names.end()) {
    throw ConfigError("inject_fault: unknown component '" + opts.inject_fault + "'");
  }
  Rng rng(opts.seed);
  GradCheckReport report;
  report.threshold = opts.threshold;

  {
    Linear layer("linear", 5, 4, rng);
    const Tensor w = random_tensor({3, 4}, rng);
    Case c{"linear", [&](Tape& t, Var x, bool f) { return readout(maybe_corrupt(layer.forward(t, x), f), w); },
           random_tensor({3, 5}, rng), {}};
    layer.collect(c.params);
    report.entries.push_back(run_case(c, opts));
  }
  {
    TemporalConvLayer conv("conv", 3, 4, 5, rng);
    const Tensor w = random_tensor({6, 5}, rng);
    Case c{"temporal_conv",
           [&](Tape& t, Var x, bool f) { return readout(maybe_corrupt(temporal_conv(t, x, conv), f), w); },
           random_tensor({6, 4}, rng), {}};
    conv.collect(c.params);
    report.entries.push_back(run_case(c, opts));
  }
  {
    LayerNormParams ln("ln", 6);
    for (double& v : ln.gain.tensor.values()) v = 1.0 + 0.3 * rng.normal();
    for (double& v : ln.shift.tensor.values()) v = 0.3 * rng.normal();
    const Tensor w = random_tensor({4, 6}, rng);
    Case c{"layer_norm", [&](Tape& t, Var x, bool f) { return readout(maybe_corrupt(layer_norm(t, x, ln), f), w); },
           random_tensor({4, 6}, rng), {}};
    ln.collect(c.params);
    report.entries.push_back(run_case(c, opts));
  }
  {
    FeedForwardSublayer ffn("ffn", 4, 8, rng);
    for (double& v : ffn.inner.bias.tensor.values()) v = 0.1 * rng.normal();
    const Tensor w = random_tensor({5, 4}, rng);
    Case c{"feed_forward", [&](Tape& t, Var x, bool f) { return readout(maybe_corrupt(feed_forward(t, x, ffn), f), w); },
           random_tensor({5, 4}, rng), {}};
    ffn.collect(c.params);
    report.entries.push_back(run_case(c, opts));
  }
  {
    CrossmodalAttentionWeights head("attn", 4, 4, 3, 3, rng);
    const Tensor src = random_tensor({6, 4}, rng);
    const Tensor w = random_tensor({5, 3}, rng);
    Case c{"single_head_attention",
           [&](Tape& t, Var x, bool f) {
             return readout(maybe_corrupt(crossmodal_attention(t, x, t.constant(src), head).output, f), w);
           },
           random_tensor({5, 4}, rng), {}};
    head.collect(c.params);
    report.entries.push_back(run_case(c, opts));
    // The source side gets its own input check.
    const Tensor tgt = random_tensor({5, 4}, rng);
    const double err = grad_check(
        [&](Tape& t, Var s) { return readout(crossmodal_attention(t, t.constant(tgt), s, head).output, w); }, src,
        opts.eps);
    auto& e = report.entries.back();
    if (err > e.max_rel_error) {
      e.max_rel_error = err;
      e.worst = "source input";
    }
    e.coordinates += src.size();
    e.pass = e.max_rel_error < opts.threshold;
  }
  {
    MultiHeadAttention mha("mha", 6, 6, MultiHeadConfig{2, 6}, rng);
    const Tensor src = random_tensor({7, 6}, rng);
    const Tensor w = random_tensor({4, 6}, rng);
    Case c{"multi_head_attention",
           [&](Tape& t, Var x, bool f) {
             return readout(maybe_corrupt(multi_head_crossmodal(t, x, t.constant(src), mha).output, f), w);
           },
           random_tensor({4, 6}, rng), {}};
    mha.collect(c.params);
    report.entries.push_back(run_case(c, opts));
  }
  {
    CrossmodalBlock block("block", 4, 2, 8, 0.0, false, 1e-5, rng);
    const Tensor src = random_tensor({5, 4}, rng);
    const Tensor w = random_tensor({3, 4}, rng);
    Case c{"crossmodal_block",
           [&](Tape& t, Var x, bool f) {
             return readout(maybe_corrupt(crossmodal_block_forward(t, x, t.constant(src), block, {}).output, f), w);
           },
           random_tensor({3, 4}, rng), {}};
    block.collect(c.params);
    report.entries.push_back(run_case(c, opts));
  }
  {
    CrossmodalBlock block("self_block", 4, 2, 8, 0.0, true, 1e-5, rng);
    const Tensor w = random_tensor({4, 4}, rng);
    Case c{"self_attention_block",
           [&](Tape& t, Var x, bool f) {
             return readout(maybe_corrupt(self_attention_block_forward(t, x, block, {}).output, f), w);
           },
           random_tensor({4, 4}, rng), {}};
    block.collect(c.params);
    report.entries.push_back(run_case(c, opts));
  }
  {
    PredictionHead head("head", 6, 4, 2, rng);
    for (double& v : head.fc1.bias.tensor.values()) v = 0.1 * rng.normal();
    const Tensor w = random_tensor({1, 2}, rng);
    Case c{"prediction_head",
           [&](Tape& t, Var x, bool f) {
             return readout(maybe_corrupt(head.forward(t, x, 0.0, Mode::Eval, nullptr), f), w);
           },
           random_tensor({1, 6}, rng), {}};
    head.collect(c.params);
    report.entries.push_back(run_case(c, opts));
  }
  {
    AlignmentPredictor pred("align", 3, 4, 3, rng);
    const Tensor w = random_tensor({5, 4}, rng);
    Case c{"alignment_predictor",
           [&](Tape& t, Var x, bool f) { return readout(maybe_corrupt(pred.logits(t, x), f), w); },
           random_tensor({5, 3}, rng), {}};
    pred.collect(c.params);
    report.entries.push_back(run_case(c, opts));
  }
  {
    CtcTarget target{{1, 2, 2}, 0};
    Case c{"ctc_loss",
           [target](Tape&, Var x, bool f) { return ctc_loss(maybe_corrupt(log_softmax_rows(x), f), target); },
           random_tensor({6, 3}, rng), {}};
    report.entries.push_back(run_case(c, opts));
  }
  {
    MulTConfig cfg;
    cfg.d = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.input_dims = {4, 3, 3};
    cfg.kernels = {3, 3, 3};
    MulTModel model(cfg, opts.seed);
    for (Parameter* p : model.parameters()) {
      // Non-trivial gains, shifts and biases so no coordinate is structurally zero.
      if (p->name.ends_with(".gain")) {
        for (double& v : p->tensor.values()) v = 1.0 + 0.2 * rng.normal();
      } else if (p->name.ends_with(".shift") || p->name.ends_with(".b") || p->name.ends_with(".bias")) {
        for (double& v : p->tensor.values()) v = 0.1 * rng.normal();
      }
    }
    ModalityTriple x;
    x[Modality::L] = random_tensor({5, 4}, rng);
    x[Modality::V] = random_tensor({6, 3}, rng);
    x[Modality::A] = random_tensor({4, 3}, rng);
    Case c{"tiny_full_mult",
           [&](Tape& t, Var, bool f) {
             return sum(maybe_corrupt(model.forward(t, x, ForwardOptions{}).prediction, f));
           },
           Tensor{}, model.parameters()};
    report.entries.push_back(run_case(c, opts));
  }
  return report;
}

}  // namespace mult
