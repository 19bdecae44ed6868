// SPDX-License-Identifier: Apache-2.0

#include "mult/ctc.hpp"

#include <algorithm>
#include <cmath>

#include "mult/error.hpp"

namespace mult {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

std::vector<std::size_t> extended_labels(const CtcTarget& target) {
  std::vector<std::size_t> ext(2 * target.tokens.size() + 1, target.blank);
  for (std::size_t i = 0; i < target.tokens.size(); ++i) ext[2 * i + 1] = target.tokens[i];
  return ext;
}

bool can_skip(const std::vector<std::size_t>& ext, std::size_t s, std::size_t blank) {
  return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
}

struct Lattice {
  std::vector<std::size_t> ext;
  std::vector<double> alpha;  // [T x S], includes the emission at t
  std::vector<double> beta;   // [T x S], excludes the emission at t
  double log_total = kNegInf;
};

Lattice run_lattice(const Tensor& lp, const CtcTarget& target, bool with_beta) {
  if (lp.rank() != 2) throw DimensionError("ctc_loss: log_probs must be [T x vocab], got " + shape_string(lp.shape()));
  target.validate(lp.cols());
  const std::size_t T = lp.rows(), V = lp.cols();
  Lattice L;
  L.ext = extended_labels(target);
  const std::size_t S = L.ext.size();
  const auto& ext = L.ext;
  L.alpha.assign(T * S, kNegInf);
  auto A = [&](std::size_t t, std::size_t s) -> double& { return L.alpha[t * S + s]; };
  A(0, 0) = lp[ext[0]];
  if (S > 1) A(0, 1) = lp[ext[1]];
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double acc = A(t - 1, s);
      if (s >= 1) acc = log_add(acc, A(t - 1, s - 1));
      if (can_skip(ext, s, target.blank)) acc = log_add(acc, A(t - 1, s - 2));
      A(t, s) = acc == kNegInf ? kNegInf : acc + lp[t * V + ext[s]];
    }
  }
  L.log_total = log_add(A(T - 1, S - 1), S > 1 ? A(T - 1, S - 2) : kNegInf);
  if (!with_beta) return L;

  L.beta.assign(T * S, kNegInf);
  auto B = [&](std::size_t t, std::size_t s) -> double& { return L.beta[t * S + s]; };
  B(T - 1, S - 1) = 0.0;
  if (S > 1) B(T - 1, S - 2) = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double acc = B(t + 1, s) + lp[(t + 1) * V + ext[s]];
      if (s + 1 < S) acc = log_add(acc, B(t + 1, s + 1) + lp[(t + 1) * V + ext[s + 1]]);
      if (s + 2 < S && can_skip(ext, s + 2, target.blank)) {
        acc = log_add(acc, B(t + 1, s + 2) + lp[(t + 1) * V + ext[s + 2]]);
      }
      B(t, s) = std::isnan(acc) ? kNegInf : acc;
    }
  }
  return L;
}

}  // namespace

void CtcTarget::validate(std::size_t vocab) const {
  if (tokens.empty()) throw ContractError("CTC target must contain at least one token");
  if (blank >= vocab) throw ContractError("CTC blank id " + std::to_string(blank) + " outside vocabulary");
  for (std::size_t tok : tokens) {
    if (tok >= vocab) throw ContractError("CTC token id " + std::to_string(tok) + " outside vocabulary of " +
                                          std::to_string(vocab));
    if (tok == blank) throw ContractError("CTC target contains the blank id");
  }
}

std::size_t CtcTarget::min_length() const {
  std::size_t n = tokens.size();
  for (std::size_t i = 1; i < tokens.size(); ++i)
    if (tokens[i] == tokens[i - 1]) ++n;
  return n;
}

CtcResult ctc_loss_value(const Tensor& log_probs, const CtcTarget& target) {
  const Lattice L = run_lattice(log_probs, target, false);
  CtcResult r;
  if (L.log_total > kNegInf) {
    r.loss = -L.log_total;
    r.feasible = true;
  }
  return r;
}

Tensor ctc_loss_gradient(const Tensor& log_probs, const CtcTarget& target) {
  const Lattice L = run_lattice(log_probs, target, true);
  Tensor g(log_probs.shape(), 0.0);
  if (!(L.log_total > kNegInf)) return g;
  const std::size_t T = log_probs.rows(), V = log_probs.cols(), S = L.ext.size();
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      const double a = L.alpha[t * S + s], b = L.beta[t * S + s];
      if (a == kNegInf || b == kNegInf) continue;
      g[t * V + L.ext[s]] -= std::exp(a + b - L.log_total);
    }
  }
  return g;
}

Var ctc_loss(Var log_probs, const CtcTarget& target, bool* feasible) {
  const CtcResult r = ctc_loss_value(log_probs.value(), target);
  if (feasible) *feasible = r.feasible;
  const std::size_t ip = log_probs.id();
  return log_probs.tape().record("ctc_loss", Tensor::scalar(r.loss), {ip},
                                 [ip, target](std::span<const double> g, Tape& t) {
                                   const Tensor grad = ctc_loss_gradient(t.value(ip), target);
                                   auto d = t.accum(ip);
                                   for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[0] * grad[i];
                                 });
}

std::vector<std::size_t> ctc_collapse(const std::vector<std::size_t>& path, std::size_t blank) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (i > 0 && path[i] == path[i - 1]) continue;
    if (path[i] != blank) out.push_back(path[i]);
  }
  return out;
}

std::vector<std::vector<std::size_t>> enumerate_alignments(std::size_t T, const CtcTarget& target,
                                                           std::size_t vocab) {
  if (T == 0 || T > 8) throw ContractError("enumerate_alignments: T must be in [1, 8], got " + std::to_string(T));
  if (vocab < 2 || vocab - 1 > 4) {
    throw ContractError("enumerate_alignments: at most 4 non-blank symbols, got " + std::to_string(vocab - 1));
  }
  target.validate(vocab);
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> path(T, 0);
  while (true) {
    if (ctc_collapse(path, target.blank) == target.tokens) out.push_back(path);
    std::size_t i = 0;
    while (i < T && ++path[i] == vocab) path[i++] = 0;
    if (i == T) break;
  }
  return out;
}

double path_probability(const Tensor& probs, const std::vector<std::size_t>& path) {
  if (path.size() != probs.rows()) throw DimensionError("path_probability: path length vs probs rows");
  double p = 1.0;
  for (std::size_t t = 0; t < path.size(); ++t) p *= probs.at(t, path[t]);
  return p;
}

Tensor pseudo_align(const Tensor& source, const Tensor& probs) {
  if (source.rows() != probs.rows() || probs.cols() < 2) {
    throw DimensionError("pseudo_align: source " + shape_string(source.shape()) + " vs probs " +
                         shape_string(probs.shape()));
  }
  const std::size_t T = source.rows(), d = source.cols(), U = probs.cols() - 1;
  Tensor out({U, d}, 0.0);
  for (std::size_t u = 0; u < U; ++u)
    for (std::size_t t = 0; t < T; ++t) {
      const double w = probs.at(t, u + 1);
      for (std::size_t c = 0; c < d; ++c) out.at(u, c) += w * source.at(t, c);
    }
  return out;
}

Var pseudo_align(Var source, Var probs) {
  if (source.rows() != probs.rows() || probs.cols() < 2) {
    throw DimensionError("pseudo_align: source " + shape_string(source.shape()) + " vs probs " +
                         shape_string(probs.shape()));
  }
  return matmul(transpose(slice_cols(probs, 1, probs.cols() - 1)), source);
}

AlignmentPredictor::AlignmentPredictor(const std::string& name, std::size_t in, std::size_t hidden,
                                       std::size_t n_slots, Rng& rng)
    : input(name + ".input", in, hidden, rng),
      output(name + ".output", hidden, n_slots + 1, rng),
      recurrent(name + ".recurrent", xavier_uniform({hidden, hidden}, hidden, hidden, rng)),
      slots(n_slots) {}

Var AlignmentPredictor::logits(Tape& tape, Var x) {
  Var xw = input.forward(tape, x);
  Var w = tape.parameter(recurrent);
  std::vector<Var> states;
  states.reserve(x.rows());
  Var h = tanh(slice_rows(xw, 0, 1));
  states.push_back(h);
  for (std::size_t t = 1; t < x.rows(); ++t) {
    h = tanh(add(slice_rows(xw, t, 1), matmul(h, w)));
    states.push_back(h);
  }
  Var hs = states.size() == 1 ? states.front() : concat_rows(states);
  return output.forward(tape, hs);
}

void AlignmentPredictor::collect(ParameterList& out) {
  input.collect(out);
  out.push_back(&recurrent);
  output.collect(out);
}

namespace {

MulTConfig downstream_config(const MulTConfig& cfg) {
  MulTConfig inner = cfg;
  inner.variant = Variant::EarlyFusion;
  return inner;
}

}  // namespace

CtcBaselineModel::CtcBaselineModel(const MulTConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  if (cfg_.ctc_max_slots == 0) throw ConfigError("ctc_ef_transformer needs ctc_max_slots > 0");
  Rng rng(seed);
  align_v_ = AlignmentPredictor("align.V", cfg_.input_dim(Modality::V), cfg_.ctc_hidden, cfg_.ctc_max_slots, rng);
  align_a_ = AlignmentPredictor("align.A", cfg_.input_dim(Modality::A), cfg_.ctc_hidden, cfg_.ctc_max_slots, rng);
  downstream_ = std::make_unique<MulTModel>(downstream_config(cfg_), rng.next_u64());
}

ParameterList CtcBaselineModel::parameters() {
  ParameterList out;
  align_v_.collect(out);
  align_a_.collect(out);
  for (Parameter* p : downstream_->parameters()) out.push_back(p);
  return out;
}

AlignmentPredictor& CtcBaselineModel::predictor(Modality m) {
  if (m == Modality::V) return align_v_;
  if (m == Modality::A) return align_a_;
  throw ContractError("the language stream has no alignment predictor");
}

ForwardResult CtcBaselineModel::forward(Tape& tape, const ModalityTriple& x, const ForwardOptions& opts) {
  validate_sample(cfg_, x);
  ModalityTriple real;
  for (Modality m : kModalities) {
    const std::size_t len = opts.lengths ? (*opts.lengths)[index_of(m)] : x.length(m);
    if (len == 0 || len > x.length(m)) throw InputError("modality " + modality_name(m) + ": invalid length");
    real[m] = len == x.length(m) ? x[m] : x[m].slice_rows(0, len);
  }
  const std::size_t T_L = real.length(Modality::L);
  if (T_L > cfg_.ctc_max_slots) {
    throw InputError("language length " + std::to_string(T_L) + " exceeds ctc_max_slots " +
                     std::to_string(cfg_.ctc_max_slots));
  }
  CtcTarget target;
  target.blank = 0;
  for (std::size_t u = 1; u <= T_L; ++u) target.tokens.push_back(u);

  std::array<Var, 3> aligned;
  aligned[index_of(Modality::L)] = tape.constant(real[Modality::L]);
  Var aux;
  for (Modality m : {Modality::V, Modality::A}) {
    Var src = tape.constant(real[m]);
    Var logits = slice_cols(predictor(m).logits(tape, src), 0, T_L + 1);
    bool feasible = false;
    Var loss = ctc_loss(log_softmax_rows(logits), target, &feasible);
    if (feasible) aux = aux.valid() ? add(aux, loss) : loss;
    aligned[index_of(m)] = pseudo_align(src, softmax_rows(logits));
  }
  ForwardOptions inner = opts;
  inner.lengths.reset();
  ForwardResult out = downstream_->forward_inputs(tape, aligned, inner);
  out.auxiliary_loss = aux;
  return out;
}

std::unique_ptr<SequenceModel> make_model(const MulTConfig& cfg, std::uint64_t seed) {
  if (cfg.variant == Variant::CtcEarlyFusion) return std::make_unique<CtcBaselineModel>(cfg, seed);
  return build_variant(cfg, seed);
}

}  // namespace mult
