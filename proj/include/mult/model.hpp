// SPDX-License-Identifier: Apache-2.0
//
// Crossmodal attention blocks, crossmodal transformers, the six-transformer
// multimodal model and its ablation variants.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mult/attention.hpp"
#include "mult/layers.hpp"
#include "mult/modality.hpp"
#include "mult/tape.hpp"

namespace mult {

enum class Variant {
  Full,
  Unimodal,              // one self-attention transformer on variant_modality
  LateFusion,            // three unimodal transformers, last elements concatenated
  EarlyFusion,           // one transformer over the temporal concatenation L|V|A
  TargetOnly,            // only the two crossmodal transformers into variant_modality
  IntermediateFeatures,  // block i attends to intermediate source features
  CtcEarlyFusion,        // CTC pseudo-alignment + early fusion (see ctc.hpp)
};

enum class TaskKind { Sentiment, Emotion };

inline constexpr std::size_t kEmotionCount = 4;

struct MulTConfig {
  std::size_t d = 40;
  std::size_t layers = 4;  // D, crossmodal blocks per transformer
  std::size_t heads = 8;
  std::array<std::size_t, 3> kernels{3, 3, 3};        // L, V, A
  std::array<std::size_t, 3> input_dims{300, 35, 74};  // L, V, A
  double embed_dropout = 0.0;
  double block_dropout = 0.0;
  double output_dropout = 0.0;
  Variant variant = Variant::Full;
  Modality variant_modality = Modality::L;
  std::size_t head_layers = 0;  // 0: same as `layers`
  std::size_t ffn_multiplier = 4;
  TaskKind task = TaskKind::Sentiment;
  double ln_epsilon = 1e-5;
  std::size_t ctc_hidden = 16;  // alignment predictor width, CTC variant only
  std::size_t ctc_max_slots = 0;  // 0: derive from data when the model is built

  void validate() const;
  std::size_t output_dim() const { return task == TaskKind::Sentiment ? 1 : 2 * kEmotionCount; }
  std::size_t effective_head_layers() const { return head_layers ? head_layers : layers; }
  std::size_t input_dim(Modality m) const { return input_dims[index_of(m)]; }
  std::size_t kernel(Modality m) const { return kernels[index_of(m)]; }
};

/// "full", "unimodal_L", "lf_transformer", "ef_transformer", "target_only_V",
/// "intermediate_features", "ctc_ef_transformer".
std::string variant_name(Variant v, Modality m);
/// Inverse of variant_name; sets both fields of `cfg`.
void parse_variant(const std::string& name, MulTConfig& cfg);

struct ForwardOptions {
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;
  bool capture_attention = false;
  /// Real lengths when the streams carry trailing zero padding; empty when unpadded.
  std::optional<std::array<std::size_t, 3>> lengths;
};

/// Per-block bookkeeping for structural checks.
struct BlockTrace {
  Modality source;
  Modality target;
  int layer;                 // 1-based
  std::size_t source_node;   // tape id of the source sequence the block attended to
  std::size_t target_rows;   // input rows
  std::size_t output_rows;
};

struct ForwardResult {
  Var prediction;       // [1 x output_dim]
  Var auxiliary_loss;   // CTC term for the CTC baseline; invalid otherwise
  std::array<std::size_t, 3> embedding_nodes{};   // tape ids of Z^{[0]} per modality
  std::array<std::size_t, 3> fused_feature_dim{};  // width of the per-target concatenation; 0 if absent
  std::vector<BlockTrace> blocks;
  std::vector<AttentionMatrix> attention;  // when capture_attention is set
};

/// One crossmodal attention layer:
///   Zh  = MHA(LN_t(Z), LN_s(Z_src)) + LN_t(Z)
///   out = FFN(LN_m(Zh)) + LN_m(Zh)
/// In self-attention mode the source stream is LN_t(Z) itself and ln_source is unused.
struct CrossmodalBlock {
  CrossmodalBlock() = default;
  CrossmodalBlock(const std::string& name, std::size_t d, std::size_t heads, std::size_t ffn_hidden, double dropout,
                  bool self_attention, double ln_eps, Rng& rng);

  void collect(ParameterList& out);

  MultiHeadAttention attention;
  LayerNormParams ln_target;
  LayerNormParams ln_source;
  LayerNormParams ln_mid;
  FeedForwardSublayer ffn;
  double dropout = 0.0;
  bool self_attention = false;
};

struct BlockContext {
  std::vector<bool> key_valid;  // empty: all source steps valid
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;
  bool capture = false;
};

struct BlockResult {
  Var output;
  std::vector<Tensor> head_scores;
};

BlockResult crossmodal_block_forward(Tape& tape, Var z_prev, Var z_source0, CrossmodalBlock& block,
                                     const BlockContext& ctx);
BlockResult self_attention_block_forward(Tape& tape, Var z, CrossmodalBlock& block, const BlockContext& ctx);

/// D blocks in one direction. Every block attends to the same low-level source.
struct CrossmodalTransformer {
  CrossmodalTransformer() = default;
  CrossmodalTransformer(const std::string& name, Modality source, Modality target, const MulTConfig& cfg, Rng& rng);

  void collect(ParameterList& out);

  Modality source = Modality::V;
  Modality target = Modality::L;
  std::vector<CrossmodalBlock> blocks;
};

struct TransformerTrace {
  std::vector<std::size_t> source_nodes;
  std::vector<Var> layer_outputs;
  std::vector<std::vector<Tensor>> head_scores;  // per layer, when captured
};

Var crossmodal_transformer_forward(Tape& tape, Var z_target0, Var z_source0, CrossmodalTransformer& ct,
                                   const BlockContext& ctx, TransformerTrace* trace = nullptr);

/// Stack of self-attention blocks over one sequence.
struct SelfAttentionTransformer {
  SelfAttentionTransformer() = default;
  SelfAttentionTransformer(const std::string& name, std::size_t dim, std::size_t layers, const MulTConfig& cfg,
                           Rng& rng);

  void collect(ParameterList& out);

  std::vector<CrossmodalBlock> blocks;
};

Var self_attention_transformer_forward(Tape& tape, Var z, SelfAttentionTransformer& tr, const BlockContext& ctx);

/// Two fully-connected layers with ReLU: in -> d -> out, output dropout on the input.
struct PredictionHead {
  PredictionHead() = default;
  PredictionHead(const std::string& name, std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);

  Var forward(Tape& tape, Var features, double dropout_rate, Mode mode, Rng* rng);
  void collect(ParameterList& out);

  Linear fc1;
  Linear fc2;
};

/// Interface shared by every trainable sequence model.
class SequenceModel {
 public:
  virtual ~SequenceModel() = default;
  virtual const MulTConfig& config() const = 0;
  virtual ParameterList parameters() = 0;
  virtual ForwardResult forward(Tape& tape, const ModalityTriple& x, const ForwardOptions& opts) = 0;
};

class MulTModel final : public SequenceModel {
 public:
  MulTModel(const MulTConfig& cfg, std::uint64_t seed);
  MulTModel(const MulTModel&) = delete;
  MulTModel& operator=(const MulTModel&) = delete;

  const MulTConfig& config() const override { return cfg_; }
  ParameterList parameters() override;
  ForwardResult forward(Tape& tape, const ModalityTriple& x, const ForwardOptions& opts) override;
  /// Same as forward() on inputs already on the tape. Padded rows, if any, must be zero.
  ForwardResult forward_inputs(Tape& tape, const std::array<Var, 3>& x, const ForwardOptions& opts);

  /// Z0 = Conv1D(X) + PE(T, d), then embedding dropout.
  Var embed_modality(Tape& tape, Var x, Modality m, Mode mode, Rng* rng);

  bool has_embedding(Modality m) const { return embed_[index_of(m)].has_value(); }
  TemporalConvLayer& conv(Modality m);
  /// nullptr when the variant has no transformer in that direction.
  CrossmodalTransformer* crossmodal(Modality source, Modality target);
  PredictionHead& head() { return head_; }

 private:
  struct Stream {
    Var z;
    std::size_t length;   // real length
    std::vector<bool> valid;  // empty when unpadded
  };

  Stream embed_stream(Tape& tape, Var x, Modality m, const ForwardOptions& opts);
  Var last_real_row(Var z, std::size_t length);
  void forward_crossmodal(Tape& tape, const std::array<Var, 3>& x, const ForwardOptions& opts, ForwardResult& out,
                          std::vector<Var>& pooled);

  MulTConfig cfg_;
  std::array<std::optional<TemporalConvLayer>, 3> embed_;
  std::map<std::pair<int, int>, CrossmodalTransformer> crossmodal_;
  std::array<std::optional<SelfAttentionTransformer>, 3> heads_;
  std::optional<SelfAttentionTransformer> fusion_;  // early fusion
  PredictionHead head_;
};

/// Builds any of the six attention-based variants (not the CTC baseline).
std::unique_ptr<MulTModel> build_variant(const MulTConfig& cfg, std::uint64_t seed);

/// Verifies the sample against the configured input schema; throws InputError.
void validate_sample(const MulTConfig& cfg, const ModalityTriple& x);

}  // namespace mult
