#include <doctest.h>

#include <cmath>
#include <set>

#include "mult/ctc.hpp"
#include "mult/error.hpp"
#include "mult/train.hpp"
#include "support.hpp"

using namespace mult;
using testing::max_abs_diff;
using testing::random_tensor;

namespace {

Tensor random_probs(std::size_t T, std::size_t vocab, Rng& rng) {
  Tensor p({T, vocab});
  for (std::size_t t = 0; t < T; ++t) {
    double z = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) z += (p.at(t, v) = 0.05 + rng.uniform());
    for (std::size_t v = 0; v < vocab; ++v) p.at(t, v) /= z;
  }
  return p;
}

Tensor log_of(const Tensor& p) {
  Tensor l(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) l[i] = std::log(p[i]);
  return l;
}

/// Brute force over all vocab^T paths: sum of the probabilities of those that collapse to the target.
double brute_force_total(const Tensor& probs, const CtcTarget& target) {
  const std::size_t T = probs.rows(), V = probs.cols();
  std::vector<std::size_t> path(T, 0);
  double total = 0.0;
  while (true) {
    if (ctc_collapse(path, target.blank) == target.tokens) total += path_probability(probs, path);
    std::size_t i = 0;
    while (i < T && ++path[i] == V) path[i++] = 0;
    if (i == T) break;
  }
  return total;
}

void all_targets(std::size_t symbols, std::size_t max_len, std::vector<std::size_t>& cur,
                 std::vector<std::vector<std::size_t>>& out) {
  if (!cur.empty()) out.push_back(cur);
  if (cur.size() == max_len) return;
  for (std::size_t s = 1; s <= symbols; ++s) {
    cur.push_back(s);
    all_targets(symbols, max_len, cur, out);
    cur.pop_back();
  }
}

}  // namespace

TEST_CASE("collapse removes repeats then blanks") {
  CHECK(ctc_collapse({1, 1, 0, 1, 2, 2, 0}, 0) == std::vector<std::size_t>{1, 1, 2});
  CHECK(ctc_collapse({0, 0, 0}, 0) == std::vector<std::size_t>{});
  CHECK(ctc_collapse({3, 3, 3}, 0) == std::vector<std::size_t>{3});
  CHECK(ctc_collapse({2, 0, 2}, 0) == std::vector<std::size_t>{2, 2});
}

TEST_CASE("target validation and minimum length") {
  CHECK_THROWS_AS(CtcTarget({}, 0).validate(3), ContractError);
  CHECK_THROWS_AS(CtcTarget({1, 0}, 0).validate(3), ContractError);
  CHECK_THROWS_AS(CtcTarget({1, 3}, 0).validate(3), ContractError);
  CHECK(CtcTarget({1, 2, 3}, 0).min_length() == 3);
  CHECK(CtcTarget({1, 1, 2, 2}, 0).min_length() == 6);
}

TEST_CASE("single step, single token") {
  const Tensor probs = Tensor::matrix(1, 3, {0.2, 0.7, 0.1});
  const CtcResult r = ctc_loss_value(log_of(probs), CtcTarget{{1}, 0});
  CHECK(r.feasible);
  CHECK(r.loss == doctest::Approx(-std::log(0.7)).epsilon(1e-14));
}

TEST_CASE("hand-enumerated alignments") {
  const auto one = enumerate_alignments(2, CtcTarget{{1}, 0}, 3);
  const std::set<std::vector<std::size_t>> expect{{1, 1}, {1, 0}, {0, 1}};
  CHECK(std::set<std::vector<std::size_t>>(one.begin(), one.end()) == expect);
  const auto rep = enumerate_alignments(3, CtcTarget{{1, 1}, 0}, 3);
  REQUIRE(rep.size() == 1);
  CHECK(rep[0] == std::vector<std::size_t>{1, 0, 1});
  // Without repeats the blank-free direct alignment is always present.
  const auto direct = enumerate_alignments(3, CtcTarget{{2, 1, 2}, 0}, 3);
  CHECK(std::find(direct.begin(), direct.end(), std::vector<std::size_t>{2, 1, 2}) != direct.end());
  CHECK_THROWS_AS(enumerate_alignments(9, CtcTarget{{1}, 0}, 3), ContractError);
}

TEST_CASE("forward recursion equals the path sum on every small case") {
  Rng rng(1);
  std::vector<std::vector<std::size_t>> targets;
  std::vector<std::size_t> cur;
  all_targets(2, 3, cur, targets);
  for (std::size_t T = 1; T <= 6; ++T) {
    for (const auto& tokens : targets) {
      const CtcTarget target{tokens, 0};
      const Tensor probs = random_probs(T, 3, rng);
      const CtcResult r = ctc_loss_value(log_of(probs), target);
      double enumerated = 0.0;
      for (const auto& path : enumerate_alignments(T, target, 3)) enumerated += path_probability(probs, path);
      CHECK(enumerated == doctest::Approx(brute_force_total(probs, target)).epsilon(1e-13));
      if (T < target.min_length()) {
        CHECK_FALSE(r.feasible);
        CHECK(std::isinf(r.loss));
        CHECK(enumerated == 0.0);
      } else {
        CHECK(r.feasible);
        CHECK(std::abs(std::exp(-r.loss) - enumerated) < 1e-9);
      }
    }
  }
}

TEST_CASE("uniform distributions count valid paths") {
  for (std::size_t T = 2; T <= 6; ++T) {
    const CtcTarget target{{1, 2, 1}, 0};
    if (T < target.min_length()) continue;
    const Tensor logp({T, 3}, -std::log(3.0));
    const double count = static_cast<double>(enumerate_alignments(T, target, 3).size());
    CHECK(std::exp(-ctc_loss_value(logp, target).loss) ==
          doctest::Approx(count / std::pow(3.0, static_cast<double>(T))).epsilon(1e-12));
  }
}

TEST_CASE("five-token target with a repeated word over six steps") {
  // I am really really happy -> 1 2 3 3 4; the repeated word needs a blank between copies.
  Rng rng(2);
  const CtcTarget target{{1, 2, 3, 3, 4}, 0};
  const Tensor probs = random_probs(6, 5, rng);
  const auto paths = enumerate_alignments(6, target, 5);
  double total = 0.0;
  for (const auto& p : paths) {
    total += path_probability(probs, p);
    bool separated = false;
    for (std::size_t t = 0; t + 1 < p.size(); ++t) separated = separated || (p[t] == 3 && p[t + 1] == 0);
    CHECK(separated);
  }
  CHECK(paths.size() == 1);
  CHECK(std::abs(std::exp(-ctc_loss_value(log_of(probs), target).loss) - total) < 1e-12);
  // An alignment that repeats "really" three times collapses to a single copy.
  CHECK(ctc_collapse({1, 2, 3, 3, 3, 4}, 0) == std::vector<std::size_t>{1, 2, 3, 4});
}

TEST_CASE("lowering a path label's probability never lowers the loss") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const CtcTarget target{{1 + rng.below(2), 1 + rng.below(2)}, 0};
    const std::size_t T = 4 + rng.below(3);
    Tensor logp = log_of(random_probs(T, 3, rng));
    const double before = ctc_loss_value(logp, target).loss;
    const auto paths = enumerate_alignments(T, target, 3);
    const auto& path = paths[rng.below(paths.size())];
    const std::size_t t = rng.below(T);
    logp.at(t, path[t]) -= 0.5 + rng.uniform();
    CHECK(ctc_loss_value(logp, target).loss >= before);
  }
}

TEST_CASE("loss gradient") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const CtcTarget target{{1, 2, 2}, 0};
    const Tensor logits = random_tensor({6, 3}, rng);
    CHECK(grad_check([&](Tape&, Var x) { return ctc_loss(log_softmax_rows(x), target); }, logits, 1e-5) < 1e-5);
  }
  // Direct gradient against log-probabilities.
  const Tensor logp = log_of(random_probs(5, 3, rng));
  const CtcTarget target{{2, 1}, 0};
  const Tensor g = ctc_loss_gradient(logp, target);
  const double eps = 1e-6;
  for (std::size_t i = 0; i < logp.size(); ++i) {
    Tensor up = logp, down = logp;
    up[i] += eps;
    down[i] -= eps;
    const double fd = (ctc_loss_value(up, target).loss - ctc_loss_value(down, target).loss) / (2 * eps);
    CHECK(g[i] == doctest::Approx(fd).epsilon(1e-6));
  }
  // Infeasible targets give no gradient.
  const Tensor zero = ctc_loss_gradient(Tensor({2, 3}, -std::log(3.0)), CtcTarget{{1, 1}, 0});
  for (double v : zero.values()) CHECK(v == 0.0);
}

TEST_CASE("pseudo-alignment") {
  Rng rng(5);
  const Tensor src = random_tensor({4, 3}, rng);
  // One-hot selection.
  Tensor onehot({4, 3});
  onehot.at(2, 1) = 1.0;
  onehot.at(0, 2) = 1.0;
  const Tensor sel = pseudo_align(src, onehot);
  CHECK(sel.rows() == 2);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(sel.at(0, c) == src.at(2, c));
    CHECK(sel.at(1, c) == src.at(0, c));
  }
  // Uniform non-blank columns: every row is the scaled column sum.
  const Tensor uni({4, 3}, 0.25);
  const Tensor avg = pseudo_align(src, uni);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t t = 0; t < 4; ++t) s += 0.25 * src.at(t, c);
    CHECK(avg.at(0, c) == doctest::Approx(s));
    CHECK(avg.at(1, c) == doctest::Approx(s));
  }
  // Random: matrix reference and convex combination after renormalising.
  const Tensor probs = random_probs(4, 4, rng);
  const Tensor out = pseudo_align(src, probs);
  for (std::size_t u = 0; u < 3; ++u) {
    double mass = 0.0;
    for (std::size_t t = 0; t < 4; ++t) mass += probs.at(t, u + 1);
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0, lo = INFINITY, hi = -INFINITY;
      for (std::size_t t = 0; t < 4; ++t) {
        s += probs.at(t, u + 1) * src.at(t, c);
        lo = std::min(lo, src.at(t, c));
        hi = std::max(hi, src.at(t, c));
      }
      CHECK(out.at(u, c) == doctest::Approx(s).epsilon(1e-14));
      CHECK(out.at(u, c) / mass >= lo - 1e-12);
      CHECK(out.at(u, c) / mass <= hi + 1e-12);
    }
  }
  Tape tape(false);
  CHECK(pseudo_align(tape.constant(src), tape.constant(probs)).value() == out);
}

namespace {

MulTConfig baseline_config() {
  MulTConfig cfg;
  cfg.d = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.input_dims = {4, 3, 3};
  cfg.variant = Variant::CtcEarlyFusion;
  cfg.ctc_hidden = 6;
  cfg.ctc_max_slots = 6;
  return cfg;
}

ModalityTriple sample(Rng& rng, std::size_t tl, std::size_t tv, std::size_t ta) {
  ModalityTriple x;
  x[Modality::L] = random_tensor({tl, 4}, rng);
  x[Modality::V] = random_tensor({tv, 3}, rng);
  x[Modality::A] = random_tensor({ta, 3}, rng);
  return x;
}

}  // namespace

TEST_CASE("alignment baseline maps both streams to the language length") {
  CtcBaselineModel model(baseline_config(), 3);
  Rng rng(6);
  const ModalityTriple x = sample(rng, 4, 9, 7);
  Tape tape;
  const ForwardResult r = model.forward(tape, x, {});
  CHECK(r.auxiliary_loss.valid());
  for (Modality m : kModalities) {
    CHECK(tape.value(r.embedding_nodes[index_of(m)]).rows() == 4);
    CHECK(tape.value(r.embedding_nodes[index_of(m)]).cols() == 8);
  }
  CHECK(model.predictor(Modality::V).slots == 6);
  MulTConfig small = baseline_config();
  small.ctc_max_slots = 0;
  CHECK_THROWS(CtcBaselineModel(small, 1));
  Tape t2;
  CHECK_THROWS_AS(model.forward(t2, sample(rng, 7, 9, 9), {}), InputError);
}

TEST_CASE("alignment loss reaches only the predictors") {
  CtcBaselineModel model(baseline_config(), 4);
  Rng rng(7);
  const ModalityTriple x = sample(rng, 3, 8, 6);
  ParameterList predictors, downstream = model.downstream().parameters();
  model.predictor(Modality::V).collect(predictors);
  model.predictor(Modality::A).collect(predictors);
  auto norm = [](const ParameterList& ps) {
    double s = 0.0;
    for (const Parameter* p : ps)
      for (double g : p->tensor.grad()) s += g * g;
    return std::sqrt(s);
  };
  {
    zero_grad(model.parameters());
    Tape tape;
    tape.backward(model.forward(tape, x, {}).auxiliary_loss);
    CHECK(norm(downstream) == 0.0);
    CHECK(norm(predictors) > 0.0);
  }
  {
    // With a zero weight the predictors still learn through the aligned features.
    zero_grad(model.parameters());
    Tape tape;
    tape.backward(sum(model.forward(tape, x, {}).prediction));
    CHECK(norm(predictors) > 0.0);
  }
}

TEST_CASE("alignment baseline trains") {
  Rng rng(8);
  Dataset ds;
  ds.dims = {4, 3, 3};
  for (int i = 0; i < 20; ++i) {
    Sample s;
    s.x = sample(rng, 2 + rng.below(3), 4 + rng.below(4), 3 + rng.below(4));
    s.label.score = i % 2 ? 2.0 : -2.0;
    ds.samples.push_back(s);
  }
  CtcBaselineModel model(baseline_config(), 5);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 10;
  cfg.learning_rate = 3e-3;
  const TrainResult r = train(model, ds, ds, cfg);
  CHECK(r.steps == 50);
  CHECK(r.history.back().train_loss < r.history.front().train_loss);
}
