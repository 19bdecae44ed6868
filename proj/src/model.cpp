// SPDX-License-Identifier: Apache-2.0

#include "mult/model.hpp"

#include <algorithm>

#include "mult/error.hpp"

namespace mult {

namespace {

std::pair<int, int> key(Modality source, Modality target) {
  return {static_cast<int>(source), static_cast<int>(target)};
}

// Sources feeding a target, in the order their outputs are concatenated:
// Z_L = [Z_{V->L}; Z_{A->L}], Z_V = [Z_{L->V}; Z_{A->V}], Z_A = [Z_{L->A}; Z_{V->A}].
std::array<Modality, 2> sources_of(Modality target) {
  std::array<Modality, 2> out{};
  std::size_t k = 0;
  for (Modality m : kModalities)
    if (m != target) out[k++] = m;
  return out;
}

}  // namespace

void MulTConfig::validate() const {
  if (d == 0) throw ConfigError("d must be positive");
  if (layers == 0) throw ConfigError("layers (D) must be at least 1");
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("d=" + std::to_string(d) + " is not divisible by heads=" + std::to_string(heads));
  }
  for (Modality m : kModalities) {
    const auto k = kernel(m);
    if (k == 0 || k % 2 == 0) {
      throw ConfigError("kernel size for " + modality_name(m) + " must be odd, got " + std::to_string(k));
    }
    if (input_dim(m) == 0) throw ConfigError("input dim for " + modality_name(m) + " must be positive");
  }
  validate_dropout_rate(embed_dropout, "embed_dropout");
  validate_dropout_rate(block_dropout, "block_dropout");
  validate_dropout_rate(output_dropout, "output_dropout");
  if (ffn_multiplier == 0) throw ConfigError("ffn_multiplier must be positive");
  if (!(ln_epsilon > 0.0)) throw ConfigError("ln_epsilon must be positive");
  if (variant == Variant::CtcEarlyFusion && ctc_hidden == 0) throw ConfigError("ctc_hidden must be positive");
}

std::string variant_name(Variant v, Modality m) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::Unimodal: return "unimodal_" + modality_name(m);
    case Variant::LateFusion: return "lf_transformer";
    case Variant::EarlyFusion: return "ef_transformer";
    case Variant::TargetOnly: return "target_only_" + modality_name(m);
    case Variant::IntermediateFeatures: return "intermediate_features";
    case Variant::CtcEarlyFusion: return "ctc_ef_transformer";
  }
  return "?";
}

void parse_variant(const std::string& name, MulTConfig& cfg) {
  auto suffix = [&](const std::string& prefix) -> std::optional<Modality> {
    if (name.size() == prefix.size() + 1 && name.compare(0, prefix.size(), prefix) == 0) {
      return parse_modality(name.substr(prefix.size()));
    }
    return std::nullopt;
  };
  if (name == "full") {
    cfg.variant = Variant::Full;
  } else if (name == "lf_transformer") {
    cfg.variant = Variant::LateFusion;
  } else if (name == "ef_transformer") {
    cfg.variant = Variant::EarlyFusion;
  } else if (name == "intermediate_features") {
    cfg.variant = Variant::IntermediateFeatures;
  } else if (name == "ctc_ef_transformer") {
    cfg.variant = Variant::CtcEarlyFusion;
  } else if (auto m = suffix("unimodal_")) {
    cfg.variant = Variant::Unimodal;
    cfg.variant_modality = *m;
  } else if (auto t = suffix("target_only_")) {
    cfg.variant = Variant::TargetOnly;
    cfg.variant_modality = *t;
  } else {
    throw ConfigError("unknown variant '" + name + "'");
  }
}

// ---------------------------------------------------------------------------

CrossmodalBlock::CrossmodalBlock(const std::string& name, std::size_t d, std::size_t heads, std::size_t ffn_hidden,
                                 double rate, bool self, double ln_eps, Rng& rng)
    : attention(name + ".attn", d, d, MultiHeadConfig{heads, d}, rng),
      ln_target(name + ".ln_target", d, ln_eps),
      ln_mid(name + ".ln_mid", d, ln_eps),
      ffn(name + ".ffn", d, ffn_hidden, rng),
      dropout(rate),
      self_attention(self) {
  if (!self) ln_source = LayerNormParams(name + ".ln_source", d, ln_eps);
}

void CrossmodalBlock::collect(ParameterList& out) {
  attention.collect(out);
  ln_target.collect(out);
  if (!self_attention) ln_source.collect(out);
  ln_mid.collect(out);
  ffn.collect(out);
}

namespace {

BlockResult block_core(Tape& tape, Var zt, Var zs, CrossmodalBlock& block, const BlockContext& ctx) {
  MultiHeadResult mh = multi_head_crossmodal(tape, zt, zs, block.attention, ctx.key_valid, ctx.capture);
  Var attended = dropout(mh.output, DropoutSpec{block.dropout, ctx.mode}, ctx.rng);
  Var zh = add(attended, zt);
  Var zm = layer_norm(tape, zh, block.ln_mid);
  Var out = add(feed_forward(tape, zm, block.ffn), zm);
  return {out, std::move(mh.head_scores)};
}

}  // namespace

BlockResult crossmodal_block_forward(Tape& tape, Var z_prev, Var z_source0, CrossmodalBlock& block,
                                     const BlockContext& ctx) {
  if (block.self_attention) throw ContractError("crossmodal_block_forward called on a self-attention block");
  if (z_prev.cols() != z_source0.cols()) {
    throw DimensionError("crossmodal block: target " + shape_string(z_prev.shape()) + " vs source " +
                         shape_string(z_source0.shape()));
  }
  Var zt = layer_norm(tape, z_prev, block.ln_target);
  Var zs = layer_norm(tape, z_source0, block.ln_source);
  return block_core(tape, zt, zs, block, ctx);
}

BlockResult self_attention_block_forward(Tape& tape, Var z, CrossmodalBlock& block, const BlockContext& ctx) {
  Var zt = layer_norm(tape, z, block.ln_target);
  return block_core(tape, zt, zt, block, ctx);
}

CrossmodalTransformer::CrossmodalTransformer(const std::string& name, Modality src, Modality dst,
                                             const MulTConfig& cfg, Rng& rng)
    : source(src), target(dst) {
  for (std::size_t i = 1; i <= cfg.layers; ++i) {
    blocks.emplace_back(name + ".layer" + std::to_string(i), cfg.d, cfg.heads, cfg.ffn_multiplier * cfg.d,
                        cfg.block_dropout, false, cfg.ln_epsilon, rng);
  }
}

void CrossmodalTransformer::collect(ParameterList& out) {
  for (auto& b : blocks) b.collect(out);
}

Var crossmodal_transformer_forward(Tape& tape, Var z_target0, Var z_source0, CrossmodalTransformer& ct,
                                   const BlockContext& ctx, TransformerTrace* trace) {
  if (ct.blocks.empty()) throw ContractError("crossmodal transformer has no blocks");
  Var z = z_target0;
  for (auto& block : ct.blocks) {
    BlockResult r = crossmodal_block_forward(tape, z, z_source0, block, ctx);
    z = r.output;
    if (trace) {
      trace->source_nodes.push_back(z_source0.id());
      trace->layer_outputs.push_back(z);
      trace->head_scores.push_back(std::move(r.head_scores));
    }
  }
  return z;
}

SelfAttentionTransformer::SelfAttentionTransformer(const std::string& name, std::size_t dim, std::size_t layers,
                                                   const MulTConfig& cfg, Rng& rng) {
  for (std::size_t i = 1; i <= layers; ++i) {
    blocks.emplace_back(name + ".layer" + std::to_string(i), dim, cfg.heads, cfg.ffn_multiplier * dim,
                        cfg.block_dropout, true, cfg.ln_epsilon, rng);
  }
}

void SelfAttentionTransformer::collect(ParameterList& out) {
  for (auto& b : blocks) b.collect(out);
}

Var self_attention_transformer_forward(Tape& tape, Var z, SelfAttentionTransformer& tr, const BlockContext& ctx) {
  for (auto& block : tr.blocks) z = self_attention_block_forward(tape, z, block, ctx).output;
  return z;
}

PredictionHead::PredictionHead(const std::string& name, std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
    : fc1(name + ".fc1", in, hidden, rng), fc2(name + ".fc2", hidden, out, rng) {}

Var PredictionHead::forward(Tape& tape, Var features, double rate, Mode mode, Rng* rng) {
  Var x = dropout(features, DropoutSpec{rate, mode}, rng);
  return fc2.forward(tape, relu(fc1.forward(tape, x)));
}

void PredictionHead::collect(ParameterList& out) {
  fc1.collect(out);
  fc2.collect(out);
}

// ---------------------------------------------------------------------------

void validate_sample(const MulTConfig& cfg, const ModalityTriple& x) {
  for (Modality m : kModalities) {
    const Tensor& s = x[m];
    if (s.size() == 0 || s.rows() == 0) throw InputError("modality " + modality_name(m) + ": empty sequence");
    if (s.cols() != cfg.input_dim(m)) {
      throw InputError("modality " + modality_name(m) + ": expected feature dim " +
                       std::to_string(cfg.input_dim(m)) + ", got " + std::to_string(s.cols()));
    }
  }
}

MulTModel::MulTModel(const MulTConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  if (cfg_.variant == Variant::CtcEarlyFusion) {
    throw ConfigError("ctc_ef_transformer is built by make_model, not MulTModel");
  }
  Rng rng(seed);
  const std::size_t d = cfg_.d;
  const std::size_t hl = cfg_.effective_head_layers();
  const Modality vm = cfg_.variant_modality;

  for (Modality m : kModalities) {
    if (cfg_.variant == Variant::Unimodal && m != vm) continue;
    embed_[index_of(m)].emplace("embed." + modality_name(m) + ".conv", cfg_.kernel(m), cfg_.input_dim(m), d, rng);
  }

  auto add_crossmodal = [&](Modality target) {
    for (Modality s : sources_of(target)) {
      crossmodal_.emplace(key(s, target),
                          CrossmodalTransformer("crossmodal." + direction_name(s, target), s, target, cfg_, rng));
    }
    heads_[index_of(target)].emplace("head." + modality_name(target), 2 * d, hl, cfg_, rng);
  };

  std::size_t fc_in = 0;
  switch (cfg_.variant) {
    case Variant::Full:
    case Variant::IntermediateFeatures:
      for (Modality m : kModalities) add_crossmodal(m);
      fc_in = 6 * d;
      break;
    case Variant::TargetOnly:
      add_crossmodal(vm);
      fc_in = 2 * d;
      break;
    case Variant::Unimodal:
      heads_[index_of(vm)].emplace("unimodal." + modality_name(vm), d, hl, cfg_, rng);
      fc_in = d;
      break;
    case Variant::LateFusion:
      for (Modality m : kModalities) heads_[index_of(m)].emplace("unimodal." + modality_name(m), d, hl, cfg_, rng);
      fc_in = 3 * d;
      break;
    case Variant::EarlyFusion:
      fusion_.emplace("early_fusion", d, hl, cfg_, rng);
      fc_in = d;
      break;
    case Variant::CtcEarlyFusion:
      break;
  }
  head_ = PredictionHead("output", fc_in, d, cfg_.output_dim(), rng);
}

ParameterList MulTModel::parameters() {
  ParameterList out;
  for (auto& e : embed_)
    if (e) e->collect(out);
  for (auto& [k, ct] : crossmodal_) ct.collect(out);
  for (auto& h : heads_)
    if (h) h->collect(out);
  if (fusion_) fusion_->collect(out);
  head_.collect(out);
  return out;
}

TemporalConvLayer& MulTModel::conv(Modality m) {
  auto& e = embed_[index_of(m)];
  if (!e) throw ContractError("variant has no embedding for modality " + modality_name(m));
  return *e;
}

CrossmodalTransformer* MulTModel::crossmodal(Modality source, Modality target) {
  auto it = crossmodal_.find(key(source, target));
  return it == crossmodal_.end() ? nullptr : &it->second;
}

Var MulTModel::embed_modality(Tape& tape, Var x, Modality m, Mode mode, Rng* rng) {
  auto& e = embed_[index_of(m)];
  if (!e) throw ContractError("variant has no embedding for modality " + modality_name(m));
  if (x.cols() != e->in_dim) {
    throw InputError("modality " + modality_name(m) + ": expected feature dim " + std::to_string(e->in_dim) +
                     ", got " + std::to_string(x.cols()));
  }
  Var conv = temporal_conv(tape, x, *e);
  Var z0 = add_constant(conv, positional_embedding(x.rows(), cfg_.d));
  return dropout(z0, DropoutSpec{cfg_.embed_dropout, mode}, rng);
}

MulTModel::Stream MulTModel::embed_stream(Tape& tape, Var x, Modality m, const ForwardOptions& opts) {
  const std::size_t rows = x.rows();
  const std::size_t length = opts.lengths ? (*opts.lengths)[index_of(m)] : rows;
  if (length == 0 || length > rows) {
    throw InputError("modality " + modality_name(m) + ": length " + std::to_string(length) + " outside [1, " +
                     std::to_string(rows) + "]");
  }
  Stream s;
  s.length = length;
  s.z = embed_modality(tape, x, m, opts.mode, opts.rng);
  if (length < rows) {
    s.valid.assign(rows, false);
    std::fill(s.valid.begin(), s.valid.begin() + static_cast<std::ptrdiff_t>(length), true);
  }
  return s;
}

Var MulTModel::last_real_row(Var z, std::size_t length) { return slice_rows(z, length - 1, 1); }

void MulTModel::forward_crossmodal(Tape& tape, const std::array<Var, 3>& x, const ForwardOptions& opts,
                                   ForwardResult& out, std::vector<Var>& pooled) {
  std::array<std::optional<Stream>, 3> z0;
  for (Modality m : kModalities) {
    z0[index_of(m)] = embed_stream(tape, x[index_of(m)], m, opts);
    out.embedding_nodes[index_of(m)] = z0[index_of(m)]->z.id();
  }
  std::vector<Modality> targets;
  if (cfg_.variant == Variant::TargetOnly) {
    targets.push_back(cfg_.variant_modality);
  } else {
    targets.assign(kModalities.begin(), kModalities.end());
  }

  auto context_for = [&](Modality source) {
    BlockContext ctx;
    ctx.key_valid = z0[index_of(source)]->valid;
    ctx.mode = opts.mode;
    ctx.rng = opts.rng;
    ctx.capture = opts.capture_attention;
    return ctx;
  };
  auto record = [&](Modality s, Modality t, int layer, Var src, std::size_t in_rows, Var result,
                    std::vector<Tensor>& scores) {
    out.blocks.push_back(BlockTrace{s, t, layer, src.id(), in_rows, result.rows()});
    for (std::size_t h = 0; h < scores.size(); ++h) {
      out.attention.push_back(AttentionMatrix{std::move(scores[h]), modality_name(s), modality_name(t), layer,
                                              static_cast<int>(h)});
    }
  };

  // Outputs Z_{s->t}^{[D]} keyed by direction.
  std::map<std::pair<int, int>, Var> finals;
  if (cfg_.variant == Variant::IntermediateFeatures) {
    std::map<std::pair<int, int>, Var> current;
    for (auto& [k, ct] : crossmodal_) current[k] = z0[index_of(ct.target)]->z;
    for (std::size_t i = 0; i < cfg_.layers; ++i) {
      std::map<std::pair<int, int>, Var> next;
      for (auto& [k, ct] : crossmodal_) {
        // Layer 1 sees Z_s^{[0]}; deeper layers see the previous layer of the
        // transformer that targets s from the remaining modality.
        Var src = i == 0 ? z0[index_of(ct.source)]->z
                         : current.at(key(third_modality(ct.source, ct.target), ct.source));
        Var in = current.at(k);
        BlockResult r = crossmodal_block_forward(tape, in, src, ct.blocks[i], context_for(ct.source));
        record(ct.source, ct.target, static_cast<int>(i + 1), src, in.rows(), r.output, r.head_scores);
        next[k] = r.output;
      }
      current = std::move(next);
    }
    finals = std::move(current);
  } else {
    for (Modality t : targets) {
      for (Modality s : sources_of(t)) {
        CrossmodalTransformer& ct = crossmodal_.at(key(s, t));
        TransformerTrace trace;
        Var zt0 = z0[index_of(t)]->z;
        Var result = crossmodal_transformer_forward(tape, zt0, z0[index_of(s)]->z, ct, context_for(s), &trace);
        for (std::size_t i = 0; i < trace.layer_outputs.size(); ++i) {
          Var in = i == 0 ? zt0 : trace.layer_outputs[i - 1];
          BlockTrace bt{s, t, static_cast<int>(i + 1), trace.source_nodes[i], in.rows(),
                        trace.layer_outputs[i].rows()};
          out.blocks.push_back(bt);
          for (std::size_t h = 0; h < trace.head_scores[i].size(); ++h) {
            out.attention.push_back(AttentionMatrix{std::move(trace.head_scores[i][h]), modality_name(s),
                                                    modality_name(t), static_cast<int>(i + 1),
                                                    static_cast<int>(h)});
          }
        }
        finals[key(s, t)] = result;
      }
    }
  }

  for (Modality t : targets) {
    const auto srcs = sources_of(t);
    Var fused = concat_cols({finals.at(key(srcs[0], t)), finals.at(key(srcs[1], t))});
    out.fused_feature_dim[index_of(t)] = fused.cols();
    BlockContext ctx = context_for(t);
    Var h = self_attention_transformer_forward(tape, fused, *heads_[index_of(t)], ctx);
    pooled.push_back(last_real_row(h, z0[index_of(t)]->length));
  }
}

ForwardResult MulTModel::forward(Tape& tape, const ModalityTriple& x, const ForwardOptions& opts) {
  validate_sample(cfg_, x);
  std::array<Var, 3> in;
  for (Modality m : kModalities) {
    const Tensor& raw = x[m];
    const std::size_t length = opts.lengths ? (*opts.lengths)[index_of(m)] : raw.rows();
    if (length > 0 && length < raw.rows()) {
      // Padded steps must be zero so the same-padding convolution sees the
      // same boundary as the unpadded sequence.
      Tensor clean = raw;
      std::fill(clean.values().begin() + static_cast<std::ptrdiff_t>(length * raw.cols()), clean.values().end(),
                0.0);
      in[index_of(m)] = tape.constant(std::move(clean));
    } else {
      in[index_of(m)] = tape.constant(raw);
    }
  }
  return forward_inputs(tape, in, opts);
}

ForwardResult MulTModel::forward_inputs(Tape& tape, const std::array<Var, 3>& x, const ForwardOptions& opts) {
  for (Modality m : kModalities) {
    if (has_embedding(m) && x[index_of(m)].cols() != cfg_.input_dim(m)) {
      throw InputError("modality " + modality_name(m) + ": expected feature dim " +
                       std::to_string(cfg_.input_dim(m)) + ", got " + std::to_string(x[index_of(m)].cols()));
    }
  }
  if (opts.mode == Mode::Train && !opts.rng &&
      (cfg_.embed_dropout > 0 || cfg_.block_dropout > 0 || cfg_.output_dropout > 0)) {
    throw ContractError("training-mode forward with dropout requires an rng");
  }
  ForwardResult out;
  std::vector<Var> pooled;
  auto self_ctx = [&](const Stream& s) {
    BlockContext ctx;
    ctx.key_valid = s.valid;
    ctx.mode = opts.mode;
    ctx.rng = opts.rng;
    return ctx;
  };

  switch (cfg_.variant) {
    case Variant::Full:
    case Variant::IntermediateFeatures:
    case Variant::TargetOnly:
      forward_crossmodal(tape, x, opts, out, pooled);
      break;
    case Variant::Unimodal: {
      const Modality m = cfg_.variant_modality;
      Stream s = embed_stream(tape, x[index_of(m)], m, opts);
      out.embedding_nodes[index_of(m)] = s.z.id();
      Var h = self_attention_transformer_forward(tape, s.z, *heads_[index_of(m)], self_ctx(s));
      pooled.push_back(last_real_row(h, s.length));
      break;
    }
    case Variant::LateFusion:
      for (Modality m : kModalities) {
        Stream s = embed_stream(tape, x[index_of(m)], m, opts);
        out.embedding_nodes[index_of(m)] = s.z.id();
        Var h = self_attention_transformer_forward(tape, s.z, *heads_[index_of(m)], self_ctx(s));
        pooled.push_back(last_real_row(h, s.length));
      }
      break;
    case Variant::EarlyFusion: {
      std::vector<Var> parts;
      std::vector<bool> valid;
      bool padded = false;
      std::size_t offset = 0, last = 0;
      for (Modality m : kModalities) {
        Stream s = embed_stream(tape, x[index_of(m)], m, opts);
        out.embedding_nodes[index_of(m)] = s.z.id();
        padded = padded || !s.valid.empty();
        const std::size_t rows = s.z.rows();
        for (std::size_t i = 0; i < rows; ++i) valid.push_back(i < s.length);
        last = offset + s.length - 1;
        offset += rows;
        parts.push_back(s.z);
      }
      Var joined = concat_rows(parts);
      Stream s{joined, last + 1, padded ? valid : std::vector<bool>{}};
      Var h = self_attention_transformer_forward(tape, joined, *fusion_, self_ctx(s));
      pooled.push_back(slice_rows(h, last, 1));
      break;
    }
    case Variant::CtcEarlyFusion:
      throw ContractError("unreachable");
  }

  Var features = pooled.size() == 1 ? pooled.front() : concat_cols(pooled);
  out.prediction = head_.forward(tape, features, cfg_.output_dropout, opts.mode, opts.rng);
  return out;
}

std::unique_ptr<MulTModel> build_variant(const MulTConfig& cfg, std::uint64_t seed) {
  return std::make_unique<MulTModel>(cfg, seed);
}

}  // namespace mult
