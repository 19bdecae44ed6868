// SPDX-License-Identifier: Apache-2.0
//
// Synthetic unaligned multimodal data, the MMSEQ1 dataset file format and
// padded batches.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mult/model.hpp"
#include "mult/modality.hpp"

namespace mult {

enum class Dependency { CrossmodalConjunction, UnimodalLeak, None };

std::string dependency_name(Dependency d);
Dependency parse_dependency(const std::string& s);

inline constexpr std::array<const char*, kEmotionCount> kEmotionNames = {"happy", "sad", "angry", "neutral"};

/// Recipe for a synthetic dataset.
///
/// Every sample lasts base_len * U[1 - jitter, 1 + jitter] seconds; modality m
/// gets round(rates[m] * duration) steps, so the three streams are unaligned.
/// A "keyword" word may be planted somewhere in L and a "gesture" burst
/// somewhere in V. With the crossmodal conjunction rule the label is positive
/// exactly when both are present; negatives alternate between carrying only
/// the keyword and only the gesture.
struct SyntheticTaskSpec {
  std::array<double, 3> rates{6.0, 15.0, 12.5};  // L words per second, V and A frames per second
  double base_len = 1.0;
  double jitter = 0.25;
  std::array<std::size_t, 3> dims{8, 6, 6};
  double noise_std = 0.5;
  double gesture_amplitude = 2.0;
  std::size_t gesture_len = 3;
  std::size_t vocab_size = 20;
  Dependency dependency = Dependency::CrossmodalConjunction;
  TaskKind label_kind = TaskKind::Sentiment;
  std::uint64_t seed = 7;

  void validate() const;
};

struct Label {
  double score = 0.0;                            // sentiment, in [-3, 3]
  std::array<bool, kEmotionCount> emotions{};    // happy, sad, angry, neutral

  friend bool operator==(const Label&, const Label&) = default;
};

struct Sample {
  ModalityTriple x;
  Label label;

  friend bool operator==(const Sample&, const Sample&) = default;
};

/// Generator bookkeeping, kept in memory only.
struct PlantedPatterns {
  bool keyword = false;
  bool gesture = false;
  std::size_t keyword_step = 0;
  std::size_t gesture_step = 0;
  bool positive = false;
};

struct Dataset {
  TaskKind label_kind = TaskKind::Sentiment;
  std::array<std::size_t, 3> dims{};
  std::vector<Sample> samples;
  std::uint64_t seed = 0;
  std::string spec;                       // generator description for the manifest
  std::vector<PlantedPatterns> planted;   // empty unless freshly generated

  std::size_t size() const { return samples.size(); }
  /// Fraction of positive samples (score > 0, or "happy" for emotions).
  double class_balance() const;

  /// Compares kind, dims and samples.
  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.label_kind == b.label_kind && a.dims == b.dims && a.samples == b.samples;
  }
};

bool is_positive(const Label& label, TaskKind kind);

/// Deterministic in (spec, n): sample i draws from a stream derived from (seed, i).
Dataset generate_synthetic(const SyntheticTaskSpec& spec, std::size_t n);

/// Writes `path` (MMSEQ1) and `path + ".json"`: {n, dims, label_kind, seed,
/// spec, class_balance, lengths (per sample [T_L, T_V, T_A])}.
void save_dataset(const Dataset& ds, const std::string& path);
/// Throws FormatError with the byte offset of the first problem.
Dataset load_dataset(const std::string& path);
/// Serialised MMSEQ1 bytes; save_dataset writes exactly these.
std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes);

/// Seeded shuffle, then the first round(n * first_fraction) samples go to the first part.
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double first_fraction, std::uint64_t seed);
Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices);

/// Per modality a [B x T_max x d] zero-padded stack, the real lengths, and masks.
struct Batch {
  std::array<Tensor, 3> stacked;
  std::vector<std::array<std::size_t, 3>> lengths;
  std::vector<std::array<std::vector<bool>, 3>> masks;
  std::vector<Label> labels;

  std::size_t size() const { return lengths.size(); }
  /// Sample b at padded length.
  ModalityTriple padded_sample(std::size_t b) const;
};

Batch pad_batch(const std::vector<const Sample*>& samples);
Batch pad_batch(const std::vector<Sample>& samples);

}  // namespace mult
