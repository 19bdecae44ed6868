// SPDX-License-Identifier: Apache-2.0

#include "mult/layers.hpp"

#include <cmath>

#include "mult/error.hpp"

namespace mult {

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
    : weight(name + ".W", xavier_uniform({in, out}, in, out, rng)), bias(name + ".b", Tensor({out})) {}

Var Linear::forward(Tape& tape, Var x) {
  if (x.cols() != in_dim()) {
    throw DimensionError(weight.name + ": input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(weight.tensor.shape()));
  }
  return add_row_vector(matmul(x, tape.parameter(weight)), tape.parameter(bias));
}

void Linear::collect(ParameterList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

TemporalConvLayer::TemporalConvLayer(const std::string& name, std::size_t k, std::size_t in, std::size_t out, Rng& rng)
    : kernel(k),
      in_dim(in),
      out_dim(out),
      weight(name + ".kernel", xavier_uniform({k, in, out}, k * in, out, rng)),
      bias(name + ".bias", Tensor({out})) {
  if (k == 0 || k % 2 == 0) throw ConfigError(name + ": kernel size must be odd, got " + std::to_string(k));
}

void TemporalConvLayer::collect(ParameterList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

Var temporal_conv(Tape& tape, Var x, TemporalConvLayer& layer) {
  const Tensor& X = x.value();
  const std::size_t T = X.rows(), in = layer.in_dim, out = layer.out_dim, k = layer.kernel;
  if (X.cols() != in) {
    throw DimensionError(layer.weight.name + ": input feature dim " + std::to_string(X.cols()) + " != " +
                         std::to_string(in));
  }
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  Var w = tape.parameter(layer.weight);
  Var b = tape.parameter(layer.bias);
  const double* W = w.value().data().data();
  const double* B = b.value().data().data();
  Tensor Y({T, out});
  for (std::size_t t = 0; t < T; ++t) {
    double* y = Y.data().data() + t * out;
    for (std::size_t o = 0; o < out; ++o) y[o] = B[o];
    for (std::size_t r = 0; r < k; ++r) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(r) - half;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
      const double* xr = X.data().data() + static_cast<std::size_t>(src) * in;
      for (std::size_t c = 0; c < in; ++c) {
        const double xv = xr[c];
        const double* wrow = W + (r * in + c) * out;
        for (std::size_t o = 0; o < out; ++o) y[o] += xv * wrow[o];
      }
    }
  }
  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  return tape.record("temporal_conv", std::move(Y), {ix, iw, ib},
                     [ix, iw, ib, T, in, out, k, half](std::span<const double> g, Tape& t) {
                       const double* X = t.value(ix).data().data();
                       const double* W = t.value(iw).data().data();
                       auto dx = t.accum(ix);
                       auto dw = t.accum(iw);
                       for (std::size_t tt = 0; tt < T; ++tt) {
                         const double* gy = g.data() + tt * out;
                         for (std::size_t r = 0; r < k; ++r) {
                           const std::ptrdiff_t src =
                               static_cast<std::ptrdiff_t>(tt) + static_cast<std::ptrdiff_t>(r) - half;
                           if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
                           const auto s = static_cast<std::size_t>(src);
                           for (std::size_t c = 0; c < in; ++c) {
                             const double* wrow = W + (r * in + c) * out;
                             if (!dx.empty()) {
                               double acc = 0.0;
                               for (std::size_t o = 0; o < out; ++o) acc += gy[o] * wrow[o];
                               dx[s * in + c] += acc;
                             }
                             if (!dw.empty()) {
                               const double xv = X[s * in + c];
                               double* dwrow = dw.data() + (r * in + c) * out;
                               for (std::size_t o = 0; o < out; ++o) dwrow[o] += xv * gy[o];
                             }
                           }
                         }
                       }
                       if (auto db = t.accum(ib); !db.empty()) {
                         for (std::size_t tt = 0; tt < T; ++tt)
                           for (std::size_t o = 0; o < out; ++o) db[o] += g[tt * out + o];
                       }
                     });
}

Tensor positional_embedding(std::size_t length, std::size_t dim) {
  Tensor pe({length, dim});
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t c = 0; c < dim; ++c) {
      const std::size_t two_j = c - c % 2;
      const double angle =
          static_cast<double>(i) / std::pow(10000.0, static_cast<double>(two_j) / static_cast<double>(dim));
      pe.at(i, c) = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

LayerNormParams::LayerNormParams(const std::string& name, std::size_t dim, double eps)
    : gain(name + ".gain", Tensor({dim}, 1.0)), shift(name + ".shift", Tensor({dim})), epsilon(eps) {
  if (!(eps > 0.0)) throw ConfigError(name + ": layer norm epsilon must be positive");
}

void LayerNormParams::collect(ParameterList& out) {
  out.push_back(&gain);
  out.push_back(&shift);
}

Var layer_norm(Tape& tape, Var x, LayerNormParams& params) {
  const Tensor& X = x.value();
  const std::size_t m = X.rows(), n = X.cols();
  if (params.gain.tensor.size() != n) {
    throw DimensionError(params.gain.name + ": layer norm over " + std::to_string(params.gain.tensor.size()) +
                         " features applied to " + shape_string(X.shape()));
  }
  Var gv = tape.parameter(params.gain);
  Var sv = tape.parameter(params.shift);
  const auto gain = gv.value().data();
  const auto shift = sv.value().data();
  Tensor Y({m, n});
  Tensor xhat({m, n});
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = X.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + params.epsilon);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * inv_std[i];
      xhat.at(i, j) = h;
      Y.at(i, j) = h * gain[j] + shift[j];
    }
  }
  const std::size_t ix = x.id(), ig = gv.id(), is = sv.id();
  return tape.record("layer_norm", std::move(Y), {ix, ig, is},
                     [ix, ig, is, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         std::span<const double> g, Tape& t) {
                       const auto gain = t.value(ig).data();
                       if (auto dx = t.accum(ix); !dx.empty()) {
                         for (std::size_t i = 0; i < m; ++i) {
                           double mean_d = 0.0, mean_dh = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                             const double dh = g[i * n + j] * gain[j];
                             mean_d += dh;
                             mean_dh += dh * xhat[i * n + j];
                           }
                           mean_d /= static_cast<double>(n);
                           mean_dh /= static_cast<double>(n);
                           for (std::size_t j = 0; j < n; ++j) {
                             const double dh = g[i * n + j] * gain[j];
                             dx[i * n + j] += inv_std[i] * (dh - mean_d - xhat[i * n + j] * mean_dh);
                           }
                         }
                       }
                       if (auto dg = t.accum(ig); !dg.empty())
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) dg[j] += g[i * n + j] * xhat[i * n + j];
                       if (auto ds = t.accum(is); !ds.empty())
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) ds[j] += g[i * n + j];
                     });
}

FeedForwardSublayer::FeedForwardSublayer(const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng)
    : inner(name + ".fc1", dim, hidden, rng), outer(name + ".fc2", hidden, dim, rng) {}

void FeedForwardSublayer::collect(ParameterList& out) {
  inner.collect(out);
  outer.collect(out);
}

Var feed_forward(Tape& tape, Var x, FeedForwardSublayer& ffn) {
  return ffn.outer.forward(tape, relu(ffn.inner.forward(tape, x)));
}

void validate_dropout_rate(double rate, const char* what) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError(std::string(what) + ": dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
}

Var dropout(Var x, const DropoutSpec& spec, Rng* rng) {
  validate_dropout_rate(spec.rate, "dropout");
  if (spec.mode == Mode::Eval || spec.rate == 0.0) return x;
  if (!rng) throw ContractError("dropout: training mode requires an rng");
  Tensor mask(x.shape());
  const double keep_scale = 1.0 / (1.0 - spec.rate);
  for (double& v : mask.values()) v = rng->bernoulli(spec.rate) ? 0.0 : keep_scale;
  return mul_constant(x, mask);
}

}  // namespace mult
