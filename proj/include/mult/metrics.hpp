// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "mult/data.hpp"

namespace mult {

/// How exact-zero sentiment labels enter Acc2 and F1.
enum class ZeroLabelPolicy { Exclude, AsNegative };

struct SentimentMetrics {
  double acc7 = 0.0;
  double acc2 = 0.0;
  double f1 = 0.0;
  double mae = 0.0;
  double corr = 0.0;
  std::size_t n = 0;
  std::size_t n_binary = 0;  // samples counted in acc2 / f1
};

struct EmotionMetrics {
  std::array<double, kEmotionCount> acc{};
  std::array<double, kEmotionCount> f1{};
  std::size_t n = 0;
};

struct MetricReport {
  TaskKind kind = TaskKind::Sentiment;
  SentimentMetrics sentiment;
  EmotionMetrics emotion;

  /// Flat (name, value) pairs: acc7, acc2, f1, mae, corr or happy_acc, happy_f1, ...
  std::vector<std::pair<std::string, double>> entries() const;
  /// acc2 for sentiment, mean per-emotion accuracy otherwise.
  double headline_accuracy() const;
};

/// Round half away from zero, then clamp into {-3, ..., 3}.
int sentiment_class(double score);

/// Pearson correlation; ContractError when n < 2, 0 when either side is constant.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

/// 2TP / (2TP + FP + FN); 1 when there are no positives on either side.
double binary_f1(std::size_t tp, std::size_t fp, std::size_t fn);

SentimentMetrics compute_sentiment_metrics(const std::vector<double>& preds, const std::vector<double>& labels,
                                           ZeroLabelPolicy zero = ZeroLabelPolicy::Exclude);

/// `logits` is [n x 8]: columns (2k, 2k+1) are the (negative, positive) logits of
/// emotion k. Positive only when the positive logit is strictly larger.
EmotionMetrics compute_emotion_metrics(const Tensor& logits,
                                       const std::vector<std::array<bool, kEmotionCount>>& labels);

}  // namespace mult
