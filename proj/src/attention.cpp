// SPDX-License-Identifier: Apache-2.0

#include "mult/attention.hpp"

#include <cmath>

#include "mult/error.hpp"

namespace mult {

void check_row_stochastic(const Tensor& m, double tol, const char* what) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const double v = m.at(i, j);
      if (!(v >= 0.0)) throw ContractError(std::string(what) + ": negative or NaN entry in row " + std::to_string(i));
      s += v;
    }
    if (std::abs(s - 1.0) > tol) {
      throw ContractError(std::string(what) + ": row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
}

CrossmodalAttentionWeights::CrossmodalAttentionWeights(const std::string& name, std::size_t d_target,
                                                       std::size_t d_source, std::size_t d_k, std::size_t d_v,
                                                       Rng& rng)
    : W_Q(name + ".W_Q", xavier_uniform({d_target, d_k}, d_target, d_k, rng)),
      W_K(name + ".W_K", xavier_uniform({d_source, d_k}, d_source, d_k, rng)),
      W_V(name + ".W_V", xavier_uniform({d_source, d_v}, d_source, d_v, rng)) {}

void CrossmodalAttentionWeights::collect(ParameterList& out) {
  out.push_back(&W_Q);
  out.push_back(&W_K);
  out.push_back(&W_V);
}

AttentionResult crossmodal_attention(Tape& tape, Var x_target, Var x_source, CrossmodalAttentionWeights& w,
                                     const std::vector<bool>& key_valid) {
  if (x_target.cols() != w.W_Q.tensor.shape()[0] || x_source.cols() != w.W_K.tensor.shape()[0]) {
    throw DimensionError("crossmodal_attention: target " + shape_string(x_target.shape()) + " / source " +
                         shape_string(x_source.shape()) + " do not match W_Q " + shape_string(w.W_Q.tensor.shape()) +
                         " / W_K " + shape_string(w.W_K.tensor.shape()));
  }
  Var q = matmul(x_target, tape.parameter(w.W_Q));
  Var k = matmul(x_source, tape.parameter(w.W_K));
  Var v = matmul(x_source, tape.parameter(w.W_V));
  Var scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(w.d_k())));
  Var probs = softmax_rows(scores, key_valid);
  return {matmul(probs, v), probs};
}

AttentionResult self_attention(Tape& tape, Var x, CrossmodalAttentionWeights& w, const std::vector<bool>& key_valid) {
  return crossmodal_attention(tape, x, x, w, key_valid);
}

Var apply_fixed_attention(Tape& tape, const Tensor& attention, Var x_source, CrossmodalAttentionWeights& w,
                          double tol) {
  if (attention.cols() != x_source.rows()) {
    throw DimensionError("apply_fixed_attention: attention " + shape_string(attention.shape()) + " vs source " +
                         shape_string(x_source.shape()));
  }
  check_row_stochastic(attention, tol, "apply_fixed_attention");
  Var v = matmul(x_source, tape.parameter(w.W_V));
  return matmul(tape.constant(attention), v);
}

void MultiHeadConfig::validate() const {
  if (num_heads == 0) throw ConfigError("multi-head attention needs at least one head");
  if (model_dim == 0 || model_dim % num_heads != 0) {
    throw ConfigError("model dim " + std::to_string(model_dim) + " is not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
}

MultiHeadAttention::MultiHeadAttention(const std::string& name, std::size_t d_target, std::size_t d_source,
                                       MultiHeadConfig cfg, Rng& rng)
    : config(cfg) {
  config.validate();
  const std::size_t hd = config.head_dim();
  heads.reserve(config.num_heads);
  for (std::size_t h = 0; h < config.num_heads; ++h) {
    heads.emplace_back(name + ".head" + std::to_string(h), d_target, d_source, hd, hd, rng);
  }
  W_O = Parameter(name + ".W_O", xavier_uniform({config.model_dim, config.model_dim}, config.model_dim,
                                                config.model_dim, rng));
}

void MultiHeadAttention::collect(ParameterList& out) {
  for (auto& h : heads) h.collect(out);
  out.push_back(&W_O);
}

MultiHeadResult multi_head_crossmodal(Tape& tape, Var x_target, Var x_source, MultiHeadAttention& mha,
                                      const std::vector<bool>& key_valid, bool capture) {
  mha.config.validate();
  MultiHeadResult result;
  std::vector<Var> outs;
  outs.reserve(mha.heads.size());
  for (auto& head : mha.heads) {
    AttentionResult r = crossmodal_attention(tape, x_target, x_source, head, key_valid);
    outs.push_back(r.output);
    if (capture) result.head_scores.push_back(r.probs.value());
  }
  Var joined = outs.size() == 1 ? outs.front() : concat_cols(outs);
  result.output = matmul(joined, tape.parameter(mha.W_O));
  return result;
}

MultiHeadResult multi_head_self_attention(Tape& tape, Var x, MultiHeadAttention& mha,
                                          const std::vector<bool>& key_valid, bool capture) {
  return multi_head_crossmodal(tape, x, x, mha, key_valid, capture);
}

}  // namespace mult
