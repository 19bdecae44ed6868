#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mult/attention.hpp"
#include "mult/error.hpp"
#include "mult/layers.hpp"
#include "support.hpp"

using namespace mult;
using testing::max_abs_diff;
using testing::naive_matmul;
using testing::random_tensor;

namespace {

/// softmax(Xt WQ (Xs WK)^T / sqrt(dk)) Xs WV, written out directly.
Tensor oracle_attention(const Tensor& xt, const Tensor& xs, const CrossmodalAttentionWeights& w, Tensor* probs) {
  const Tensor q = naive_matmul(xt, w.W_Q.tensor), k = naive_matmul(xs, w.W_K.tensor), v = naive_matmul(xs, w.W_V.tensor);
  Tensor s({xt.rows(), xs.rows()});
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = 0; j < s.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) acc += q.at(i, c) * k.at(j, c);
      s.at(i, j) = acc * scale;
    }
  const Tensor p = testing::naive_softmax_rows(s);
  if (probs) *probs = p;
  return naive_matmul(p, v);
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t c = 0; c < x.cols(); ++c) out.at(i, c) = x.at(perm[i], c);
  return out;
}

}  // namespace

TEST_CASE("single-head crossmodal attention matches the direct formula") {
  Rng rng(1);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t ta = 1 + rng.below(7), tb = 1 + rng.below(9), da = 1 + rng.below(5), db = 1 + rng.below(5);
    const std::size_t dk = 1 + rng.below(4), dv = 1 + rng.below(4);
    CrossmodalAttentionWeights w("w", da, db, dk, dv, rng);
    const Tensor xt = random_tensor({ta, da}, rng), xs = random_tensor({tb, db}, rng);
    Tape tape(false);
    const AttentionResult r = crossmodal_attention(tape, tape.constant(xt), tape.constant(xs), w);
    Tensor p;
    const Tensor y = oracle_attention(xt, xs, w, &p);
    CHECK(r.output.rows() == ta);
    CHECK(r.output.cols() == dv);
    CHECK(r.probs.rows() == ta);
    CHECK(r.probs.cols() == tb);
    CHECK(max_abs_diff(r.output.value(), y) < 1e-12);
    CHECK(max_abs_diff(r.probs.value(), p) < 1e-13);
  }
}

TEST_CASE("self-attention is crossmodal attention with the same stream") {
  Rng rng(2);
  CrossmodalAttentionWeights w("w", 4, 4, 3, 3, rng);
  const Tensor x = random_tensor({6, 4}, rng);
  Tape tape(false);
  const Var xv = tape.constant(x);
  CHECK(self_attention(tape, xv, w).output.value() == crossmodal_attention(tape, xv, xv, w).output.value());
}

TEST_CASE("key masking removes padded source steps") {
  Rng rng(3);
  CrossmodalAttentionWeights w("w", 3, 2, 4, 2, rng);
  const Tensor xt = random_tensor({4, 3}, rng), xs = random_tensor({5, 2}, rng);
  Tape tape(false);
  const std::vector<bool> valid{true, true, true, false, false};
  const AttentionResult masked = crossmodal_attention(tape, tape.constant(xt), tape.constant(xs), w, valid);
  const AttentionResult trimmed = crossmodal_attention(tape, tape.constant(xt), tape.constant(xs.slice_rows(0, 3)), w);
  CHECK(max_abs_diff(masked.output.value(), trimmed.output.value()) < 1e-14);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(masked.probs.value().at(i, 3) == 0.0);
    CHECK(masked.probs.value().at(i, 4) == 0.0);
  }
  CHECK_THROWS(crossmodal_attention(tape, tape.constant(xt), tape.constant(xs), w, {true, true}));
}

TEST_CASE("attention rows are probability distributions") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t ta = 1 + rng.below(12), tb = 1 + rng.below(12), d = 1 + rng.below(8);
    CrossmodalAttentionWeights w("w", d, d, d, d, rng);
    Tape tape(false);
    const Tensor p = crossmodal_attention(tape, tape.constant(random_tensor({ta, d}, rng, 5.0)),
                                          tape.constant(random_tensor({tb, d}, rng, 5.0)), w)
                         .probs.value();
    CHECK_NOTHROW(check_row_stochastic(p, 1e-12, "probs"));
  }
  CHECK_THROWS_AS(check_row_stochastic(Tensor::matrix(1, 2, {0.7, 0.7}), 1e-6, "bad"), ContractError);
  CHECK_THROWS_AS(check_row_stochastic(Tensor::matrix(1, 2, {1.5, -0.5}), 1e-6, "bad"), ContractError);
}

TEST_CASE("a length-one source gives a column of ones") {
  Rng rng(5);
  CrossmodalAttentionWeights w("w", 3, 3, 2, 2, rng);
  Tape tape(false);
  const Tensor p =
      crossmodal_attention(tape, tape.constant(random_tensor({4, 3}, rng)), tape.constant(random_tensor({1, 3}, rng)), w)
          .probs.value();
  for (std::size_t i = 0; i < 4; ++i) CHECK(p.at(i, 0) == 1.0);
}

TEST_CASE("reordering the source leaves the output unchanged without positions") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t ta = 2 + rng.below(5), tb = 2 + rng.below(6), d = 4;
    CrossmodalAttentionWeights w("w", d, d, d, d, rng);
    const Tensor xt = random_tensor({ta, d}, rng), xs = random_tensor({tb, d}, rng);
    std::vector<std::size_t> perm(tb);
    std::iota(perm.begin(), perm.end(), 0);
    shuffle(perm, rng);
    Tape tape(false);
    const Tensor y0 = crossmodal_attention(tape, tape.constant(xt), tape.constant(xs), w).output.value();
    const Tensor y1 =
        crossmodal_attention(tape, tape.constant(xt), tape.constant(permute_rows(xs, perm)), w).output.value();
    CHECK(max_abs_diff(y0, y1) < 1e-12);
  }
}

TEST_CASE("multi-head attention concatenates heads and projects") {
  Rng rng(7);
  MultiHeadAttention mha("mha", 6, 4, MultiHeadConfig{3, 6}, rng);
  CHECK(mha.heads.size() == 3);
  CHECK(mha.heads[0].d_k() == 2);
  const Tensor xt = random_tensor({5, 6}, rng), xs = random_tensor({7, 4}, rng);
  Tape tape(false);
  const MultiHeadResult r = multi_head_crossmodal(tape, tape.constant(xt), tape.constant(xs), mha, {}, true);
  Tensor cat({5, 6});
  for (std::size_t h = 0; h < 3; ++h) {
    const Tensor yh = oracle_attention(xt, xs, mha.heads[h], nullptr);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 2; ++c) cat.at(i, 2 * h + c) = yh.at(i, c);
  }
  CHECK(max_abs_diff(r.output.value(), naive_matmul(cat, mha.W_O.tensor)) < 1e-12);
  CHECK(r.head_scores.size() == 3);
  CHECK(multi_head_crossmodal(tape, tape.constant(xt), tape.constant(xs), mha).head_scores.empty());
}

TEST_CASE("one head with identity projection is single-head attention") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 1 + rng.below(8);
    MultiHeadAttention mha("mha", d, d, MultiHeadConfig{1, d}, rng);
    mha.W_O.tensor = Tensor::identity(d);
    const Tensor xt = random_tensor({1 + rng.below(6), d}, rng), xs = random_tensor({1 + rng.below(6), d}, rng);
    Tape tape(false);
    const Tensor a = multi_head_crossmodal(tape, tape.constant(xt), tape.constant(xs), mha).output.value();
    const Tensor b = crossmodal_attention(tape, tape.constant(xt), tape.constant(xs), mha.heads[0]).output.value();
    CHECK(max_abs_diff(a, b) < 1e-12);
  }
}

TEST_CASE("head count must divide the model width") {
  Rng rng(9);
  CHECK_THROWS_AS(MultiHeadAttention("mha", 6, 6, MultiHeadConfig{4, 6}, rng), ConfigError);
  CHECK_THROWS_AS(MultiHeadAttention("mha", 6, 6, MultiHeadConfig{0, 6}, rng), ConfigError);
}

TEST_CASE("fixed step-diagonal attention averages word intervals") {
  Rng rng(10);
  CrossmodalAttentionWeights w("w", 3, 3, 3, 3, rng);
  w.W_V.tensor = Tensor::identity(3);
  const Tensor xs = random_tensor({7, 3}, rng);
  const std::vector<std::pair<std::size_t, std::size_t>> words{{0, 2}, {2, 3}, {3, 7}};
  Tensor a({3, 7});
  for (std::size_t u = 0; u < 3; ++u)
    for (std::size_t t = words[u].first; t < words[u].second; ++t)
      a.at(u, t) = 1.0 / static_cast<double>(words[u].second - words[u].first);
  Tape tape(false);
  const Tensor y = apply_fixed_attention(tape, a, tape.constant(xs), w).value();
  for (std::size_t u = 0; u < 3; ++u)
    for (std::size_t c = 0; c < 3; ++c) {
      double mean = 0.0;
      for (std::size_t t = words[u].first; t < words[u].second; ++t) mean += xs.at(t, c);
      mean /= static_cast<double>(words[u].second - words[u].first);
      CHECK(y.at(u, c) == doctest::Approx(mean).epsilon(1e-14));
    }
  CHECK_THROWS_AS(apply_fixed_attention(tape, Tensor({3, 7}, 0.5), tape.constant(xs), w), ContractError);
  CHECK_THROWS_AS(apply_fixed_attention(tape, Tensor({3, 6}, 1.0 / 6.0), tape.constant(xs), w), DimensionError);
}

TEST_CASE("attention gradients") {
  Rng rng(11);
  MultiHeadAttention mha("mha", 4, 3, MultiHeadConfig{2, 4}, rng);
  const Tensor xt = random_tensor({3, 4}, rng), xs = random_tensor({5, 3}, rng), w = random_tensor({3, 4}, rng);
  const std::vector<bool> valid{true, true, false, true, false};
  ParameterList params;
  mha.collect(params);
  const auto r = grad_check_parameters(
      [&](Tape& t) {
        return sum(mul_constant(multi_head_crossmodal(t, t.constant(xt), t.constant(xs), mha, valid).output, w));
      },
      params, 1e-5);
  CHECK(r.max_rel_error < 1e-8);
  CHECK(grad_check(
            [&](Tape& t, Var s) {
              return sum(mul_constant(multi_head_crossmodal(t, t.constant(xt), s, mha, valid).output, w));
            },
            xs, 1e-5) < 1e-8);
}
