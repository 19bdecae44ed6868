// SPDX-License-Identifier: Apache-2.0
//
// Building blocks below the attention level.

#pragma once

#include <cstddef>
#include <string>

#include "mult/tape.hpp"
#include "mult/tensor.hpp"

namespace mult {

enum class Mode { Train, Eval };

/// y = x W + b with W [in x out], b [out].
struct Linear {
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng);

  Var forward(Tape& tape, Var x);
  void collect(ParameterList& out);
  std::size_t in_dim() const { return weight.tensor.shape()[0]; }
  std::size_t out_dim() const { return weight.tensor.shape()[1]; }

  Parameter weight;
  Parameter bias;
};

/// Same-length 1-D convolution over time with zero padding on both ends.
/// Weights are laid out [kernel x in_dim x out_dim].
struct TemporalConvLayer {
  TemporalConvLayer() = default;
  TemporalConvLayer(const std::string& name, std::size_t kernel, std::size_t in_dim, std::size_t out_dim, Rng& rng);

  void collect(ParameterList& out);

  std::size_t kernel = 1;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Parameter weight;
  Parameter bias;
};

Var temporal_conv(Tape& tape, Var x, TemporalConvLayer& layer);

/// Fixed sinusoidal table, row index i starting at 0:
///   PE[i, 2j]   = sin(i / 10000^(2j/d))
///   PE[i, 2j+1] = cos(i / 10000^(2j/d))
Tensor positional_embedding(std::size_t length, std::size_t dim);

struct LayerNormParams {
  LayerNormParams() = default;
  LayerNormParams(const std::string& name, std::size_t dim, double epsilon = 1e-5);

  void collect(ParameterList& out);

  Parameter gain;
  Parameter shift;
  double epsilon = 1e-5;
};

/// Normalises every row over its last axis, then applies gain and shift.
Var layer_norm(Tape& tape, Var x, LayerNormParams& params);

/// Positionwise two-layer ReLU network, d -> d_ff -> d.
struct FeedForwardSublayer {
  FeedForwardSublayer() = default;
  FeedForwardSublayer(const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng);

  void collect(ParameterList& out);

  Linear inner;
  Linear outer;
};

Var feed_forward(Tape& tape, Var x, FeedForwardSublayer& ffn);

struct DropoutSpec {
  double rate = 0.0;
  Mode mode = Mode::Eval;
};

/// Inverted dropout: in training, zero each entry with probability `rate` and
/// scale survivors by 1/(1-rate). Identity in eval mode or when rate is 0.
/// `rng` is only consumed in training mode with a positive rate.
Var dropout(Var x, const DropoutSpec& spec, Rng* rng);

void validate_dropout_rate(double rate, const char* what);

}  // namespace mult
