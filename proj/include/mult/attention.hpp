// SPDX-License-Identifier: Apache-2.0
//
// Directional crossmodal attention. The target sequence supplies queries,
// the source sequence supplies keys and values:
//
//   Y = softmax(Q K^T / sqrt(d_k)) V,   Q = X_t W_Q,  K = X_s W_K,  V = X_s W_V
//
// Self-attention is the special case X_s == X_t.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mult/layers.hpp"
#include "mult/tape.hpp"

namespace mult {

/// Row-stochastic [T_target x T_source] attention scores with provenance.
struct AttentionMatrix {
  Tensor scores;
  std::string source;
  std::string target;
  int layer = 0;  // 1-based block index inside its transformer; 0 when standalone
  int head = 0;
};

/// Throws ContractError unless every row is nonnegative and sums to 1 within `tol`.
void check_row_stochastic(const Tensor& m, double tol, const char* what);

struct CrossmodalAttentionWeights {
  CrossmodalAttentionWeights() = default;
  CrossmodalAttentionWeights(const std::string& name, std::size_t d_target, std::size_t d_source, std::size_t d_k,
                             std::size_t d_v, Rng& rng);

  void collect(ParameterList& out);
  std::size_t d_k() const { return W_Q.tensor.shape()[1]; }
  std::size_t d_v() const { return W_V.tensor.shape()[1]; }

  Parameter W_Q;  // [d_target x d_k]
  Parameter W_K;  // [d_source x d_k]
  Parameter W_V;  // [d_source x d_v]
};

struct AttentionResult {
  Var output;  // [T_target x d_v]
  Var probs;   // [T_target x T_source]
};

/// Single-head crossmodal attention. `key_valid` masks padded source steps.
AttentionResult crossmodal_attention(Tape& tape, Var x_target, Var x_source, CrossmodalAttentionWeights& w,
                                     const std::vector<bool>& key_valid = {});

/// Single-head self-attention; identical to crossmodal_attention(x, x, w).
AttentionResult self_attention(Tape& tape, Var x, CrossmodalAttentionWeights& w,
                               const std::vector<bool>& key_valid = {});

/// Y = A (X_s W_V) for an externally supplied row-stochastic A. Used to express
/// classical monotonic alignment as a fixed attention pattern.
Var apply_fixed_attention(Tape& tape, const Tensor& attention, Var x_source, CrossmodalAttentionWeights& w,
                          double tol = 1e-6);

struct MultiHeadConfig {
  std::size_t num_heads = 1;
  std::size_t model_dim = 0;

  /// Throws ConfigError when model_dim is not divisible by num_heads.
  void validate() const;
  std::size_t head_dim() const { return model_dim / num_heads; }
};

/// h heads with d_k = d_v = d/h, concatenated and projected by W_O [d x d].
struct MultiHeadAttention {
  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, std::size_t d_target, std::size_t d_source, MultiHeadConfig cfg,
                     Rng& rng);

  void collect(ParameterList& out);

  MultiHeadConfig config;
  std::vector<CrossmodalAttentionWeights> heads;
  Parameter W_O;
};

struct MultiHeadResult {
  Var output;
  std::vector<Tensor> head_scores;  // filled only when capture was requested
};

MultiHeadResult multi_head_crossmodal(Tape& tape, Var x_target, Var x_source, MultiHeadAttention& mha,
                                      const std::vector<bool>& key_valid = {}, bool capture = false);

MultiHeadResult multi_head_self_attention(Tape& tape, Var x, MultiHeadAttention& mha,
                                          const std::vector<bool>& key_valid = {}, bool capture = false);

}  // namespace mult
