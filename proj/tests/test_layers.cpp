#include <doctest.h>

#include <cmath>

#include "mult/error.hpp"
#include "mult/layers.hpp"
#include "support.hpp"

using namespace mult;
using testing::max_abs_diff;
using testing::random_tensor;

namespace {

/// Direct same-length convolution with zero padding.
Tensor naive_conv(const Tensor& x, const TemporalConvLayer& layer) {
  const std::size_t T = x.rows(), k = layer.kernel, half = k / 2;
  Tensor y({T, layer.out_dim});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t o = 0; o < layer.out_dim; ++o) {
      double s = layer.bias.tensor[o];
      for (std::size_t r = 0; r < k; ++r) {
        const long src = static_cast<long>(t + r) - static_cast<long>(half);
        if (src < 0 || src >= static_cast<long>(T)) continue;
        for (std::size_t c = 0; c < layer.in_dim; ++c)
          s += x.at(static_cast<std::size_t>(src), c) * layer.weight.tensor[(r * layer.in_dim + c) * layer.out_dim + o];
      }
      y.at(t, o) = s;
    }
  return y;
}

}  // namespace

TEST_CASE("linear layer computes xW + b") {
  Rng rng(1);
  Linear lin("lin", 3, 2, rng);
  lin.weight.tensor = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
  lin.bias.tensor = Tensor::vector({0.5, -0.5});
  Tape tape(false);
  const Tensor y = lin.forward(tape, tape.constant(Tensor::matrix(1, 3, {1, 0, -1}))).value();
  CHECK(y.at(0, 0) == -3.5);
  CHECK(y.at(0, 1) == -4.5);
  CHECK_THROWS_AS(lin.forward(tape, tape.constant(Tensor({1, 4}))), DimensionError);
}

TEST_CASE("temporal conv matches direct convolution and keeps the length") {
  Rng rng(2);
  for (std::size_t k : {1, 3, 5}) {
    TemporalConvLayer conv("conv", k, 4, 3, rng);
    for (double& v : conv.bias.tensor.values()) v = rng.normal();
    for (std::size_t T : {1, 2, 7}) {
      const Tensor x = random_tensor({T, 4}, rng);
      Tape tape(false);
      const Tensor y = temporal_conv(tape, tape.constant(x), conv).value();
      CHECK(y.rows() == T);
      CHECK(max_abs_diff(y, naive_conv(x, conv)) < 1e-12);
    }
  }
  CHECK_THROWS(TemporalConvLayer("even", 2, 4, 3, rng));
}

TEST_CASE("kernel-1 conv is a per-step linear map") {
  Rng rng(3);
  TemporalConvLayer conv("conv", 1, 3, 2, rng);
  const Tensor x = random_tensor({5, 3}, rng);
  Tape tape(false);
  const Tensor y = temporal_conv(tape, tape.constant(x), conv).value();
  const Tensor w = Tensor({3, 2}, conv.weight.tensor.values());
  const Tensor xw = testing::naive_matmul(x, w);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t o = 0; o < 2; ++o) CHECK(y.at(t, o) == doctest::Approx(xw.at(t, o) + conv.bias.tensor[o]));
}

TEST_CASE("positional embedding table") {
  const Tensor pe = positional_embedding(6, 8);
  for (std::size_t c = 0; c < 8; ++c) CHECK(pe.at(0, c) == (c % 2 == 0 ? 0.0 : 1.0));
  CHECK(pe.at(1, 0) == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
  CHECK(pe.at(1, 1) == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
  CHECK(pe.at(3, 2) == doctest::Approx(std::sin(3.0 / std::pow(10000.0, 2.0 / 8.0))).epsilon(1e-15));
  CHECK(pe.at(5, 7) == doctest::Approx(std::cos(5.0 / std::pow(10000.0, 6.0 / 8.0))).epsilon(1e-15));
  for (double v : pe.values()) CHECK(std::abs(v) <= 1.0);
  // Odd width: the last column is a sine.
  const Tensor odd = positional_embedding(3, 5);
  CHECK(odd.at(2, 4) == doctest::Approx(std::sin(2.0 / std::pow(10000.0, 4.0 / 5.0))));
}

TEST_CASE("layer norm standardises every row") {
  Rng rng(4);
  LayerNormParams ln("ln", 6);
  const Tensor x = random_tensor({5, 6}, rng, 4.0);
  Tape tape(false);
  const Tensor y = layer_norm(tape, tape.constant(x), ln).value();
  for (std::size_t i = 0; i < 5; ++i) {
    double mu = 0.0, var = 0.0, xmu = 0.0, xvar = 0.0;
    for (std::size_t c = 0; c < 6; ++c) xmu += x.at(i, c) / 6.0;
    for (std::size_t c = 0; c < 6; ++c) xvar += (x.at(i, c) - xmu) * (x.at(i, c) - xmu) / 6.0;
    for (std::size_t c = 0; c < 6; ++c) mu += y.at(i, c) / 6.0;
    for (std::size_t c = 0; c < 6; ++c) var += (y.at(i, c) - mu) * (y.at(i, c) - mu) / 6.0;
    CHECK(std::abs(mu) < 1e-12);
    CHECK(var == doctest::Approx(xvar / (xvar + 1e-5)).epsilon(1e-10));
  }
  // Gain and shift act per column.
  ln.gain.tensor = Tensor::vector({2, 2, 2, 2, 2, 2});
  ln.shift.tensor = Tensor::vector({1, 1, 1, 1, 1, 1});
  const Tensor z = layer_norm(tape, tape.constant(x), ln).value();
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == doctest::Approx(2.0 * y[i] + 1.0));
}

TEST_CASE("feed-forward sublayer is relu(xW1 + b1)W2 + b2") {
  Rng rng(5);
  FeedForwardSublayer ffn("ffn", 3, 5, rng);
  for (double& v : ffn.inner.bias.tensor.values()) v = rng.normal();
  for (double& v : ffn.outer.bias.tensor.values()) v = rng.normal();
  const Tensor x = random_tensor({4, 3}, rng);
  Tape tape(false);
  const Tensor y = feed_forward(tape, tape.constant(x), ffn).value();
  Tensor h = testing::naive_matmul(x, ffn.inner.weight.tensor);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) h.at(i, j) = std::max(0.0, h.at(i, j) + ffn.inner.bias.tensor[j]);
  Tensor expect = testing::naive_matmul(h, ffn.outer.weight.tensor);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) expect.at(i, j) += ffn.outer.bias.tensor[j];
  CHECK(max_abs_diff(y, expect) < 1e-12);
}

TEST_CASE("dropout") {
  Rng data(6);
  const Tensor x = random_tensor({20, 10}, data);
  Tape tape(false);
  const Var xv = tape.constant(x);
  CHECK(dropout(xv, {0.5, Mode::Eval}, nullptr).value() == x);
  Rng rng(7);
  CHECK(dropout(xv, {0.0, Mode::Train}, &rng).value() == x);
  CHECK(rng.state() == Rng(7).state());
  const Tensor y = dropout(xv, {0.25, Mode::Train}, &rng).value();
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (y[i] == 0.0) ++zeros;
    else CHECK(y[i] == doctest::Approx(x[i] / 0.75).epsilon(1e-15));
  }
  CHECK(zeros > 20);
  CHECK(zeros < 80);
  CHECK_THROWS_AS(validate_dropout_rate(1.0, "rate"), ConfigError);
  CHECK_THROWS_AS(validate_dropout_rate(-0.1, "rate"), ConfigError);
}

TEST_CASE("layer gradients") {
  Rng rng(8);
  TemporalConvLayer conv("conv", 3, 2, 3, rng);
  const Tensor w = random_tensor({4, 3}, rng);
  ParameterList params;
  conv.collect(params);
  const Tensor x = random_tensor({4, 2}, rng);
  const auto r = grad_check_parameters(
      [&](Tape& t) { return sum(mul_constant(temporal_conv(t, t.constant(x), conv), w)); }, params, 1e-5);
  CHECK(r.max_rel_error < 1e-8);
  CHECK(r.coordinates == 3 * 2 * 3 + 3);
}
