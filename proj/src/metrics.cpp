// SPDX-License-Identifier: Apache-2.0

#include "mult/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "mult/error.hpp"

namespace mult {

int sentiment_class(double score) {
  const double r = std::round(score);
  return static_cast<int>(std::clamp(r, -3.0, 3.0));
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("pearson: length mismatch");
  if (a.size() < 2) throw ContractError("correlation is undefined for fewer than 2 samples");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double binary_f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

SentimentMetrics compute_sentiment_metrics(const std::vector<double>& preds, const std::vector<double>& labels,
                                           ZeroLabelPolicy zero) {
  if (preds.size() != labels.size()) {
    throw DimensionError("sentiment metrics: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) throw ContractError("sentiment metrics need at least one sample");
  SentimentMetrics m;
  m.n = preds.size();
  std::size_t hit7 = 0, hit2 = 0, tp = 0, fp = 0, fn = 0;
  double abs_err = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (sentiment_class(preds[i]) == sentiment_class(labels[i])) ++hit7;
    abs_err += std::abs(preds[i] - labels[i]);
    if (labels[i] == 0.0 && zero == ZeroLabelPolicy::Exclude) continue;
    ++m.n_binary;
    const bool truth = labels[i] > 0.0;
    const bool guess = preds[i] > 0.0;
    if (truth == guess) ++hit2;
    if (guess && truth) ++tp;
    if (guess && !truth) ++fp;
    if (!guess && truth) ++fn;
  }
  const double n = static_cast<double>(m.n);
  m.acc7 = static_cast<double>(hit7) / n;
  m.acc2 = m.n_binary ? static_cast<double>(hit2) / static_cast<double>(m.n_binary) : 0.0;
  m.f1 = binary_f1(tp, fp, fn);
  m.mae = abs_err / n;
  m.corr = pearson(preds, labels);
  return m;
}

EmotionMetrics compute_emotion_metrics(const Tensor& logits,
                                       const std::vector<std::array<bool, kEmotionCount>>& labels) {
  if (logits.rows() != labels.size() || logits.cols() != 2 * kEmotionCount) {
    throw DimensionError("emotion metrics: logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  EmotionMetrics m;
  m.n = labels.size();
  for (std::size_t k = 0; k < kEmotionCount; ++k) {
    std::size_t hit = 0, tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool guess = logits.at(i, 2 * k + 1) > logits.at(i, 2 * k);
      const bool truth = labels[i][k];
      if (guess == truth) ++hit;
      if (guess && truth) ++tp;
      if (guess && !truth) ++fp;
      if (!guess && truth) ++fn;
    }
    m.acc[k] = m.n ? static_cast<double>(hit) / static_cast<double>(m.n) : 0.0;
    m.f1[k] = binary_f1(tp, fp, fn);
  }
  return m;
}

std::vector<std::pair<std::string, double>> MetricReport::entries() const {
  if (kind == TaskKind::Sentiment) {
    return {{"acc7", sentiment.acc7},
            {"acc2", sentiment.acc2},
            {"f1", sentiment.f1},
            {"mae", sentiment.mae},
            {"corr", sentiment.corr}};
  }
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t k = 0; k < kEmotionCount; ++k) {
    out.emplace_back(std::string(kEmotionNames[k]) + "_acc", emotion.acc[k]);
    out.emplace_back(std::string(kEmotionNames[k]) + "_f1", emotion.f1[k]);
  }
  return out;
}

double MetricReport::headline_accuracy() const {
  if (kind == TaskKind::Sentiment) return sentiment.acc2;
  double s = 0.0;
  for (double a : emotion.acc) s += a;
  return s / static_cast<double>(kEmotionCount);
}

}  // namespace mult
