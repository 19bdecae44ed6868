// SPDX-License-Identifier: Apache-2.0

#include "mult/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "mult/error.hpp"

namespace mult {

namespace {

constexpr char kMagic[] = "MMSEQ1";
constexpr std::size_t kMagicLen = 6;

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(std::string("truncated file while reading ") + what + " (need " + std::to_string(n) +
                            " bytes, " + std::to_string(remaining()) + " left)",
                        pos_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::vector<double> random_vector(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

std::string dependency_name(Dependency d) {
  switch (d) {
    case Dependency::CrossmodalConjunction: return "crossmodal_conjunction";
    case Dependency::UnimodalLeak: return "unimodal_leak";
    case Dependency::None: return "none";
  }
  return "?";
}

Dependency parse_dependency(const std::string& s) {
  if (s == "crossmodal_conjunction") return Dependency::CrossmodalConjunction;
  if (s == "unimodal_leak") return Dependency::UnimodalLeak;
  if (s == "none") return Dependency::None;
  throw ConfigError("unknown dependency '" + s + "' (expected crossmodal_conjunction, unimodal_leak or none)");
}

void SyntheticTaskSpec::validate() const {
  for (std::size_t i = 0; i < 3; ++i) {
    if (!(rates[i] > 0.0)) throw ConfigError("sampling rates must be positive");
    if (dims[i] == 0) throw ConfigError("feature dims must be positive");
  }
  if (!(base_len > 0.0)) throw ConfigError("base_len must be positive");
  if (!(jitter >= 0.0 && jitter < 1.0)) throw ConfigError("jitter must be in [0, 1)");
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be non-negative");
  if (gesture_len == 0) throw ConfigError("gesture_len must be positive");
  if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
}

bool is_positive(const Label& label, TaskKind kind) {
  return kind == TaskKind::Sentiment ? label.score > 0.0 : label.emotions[0];
}

double Dataset::class_balance() const {
  if (samples.empty()) return 0.0;
  std::size_t pos = 0;
  for (const auto& s : samples) pos += is_positive(s.label, label_kind) ? 1 : 0;
  return static_cast<double>(pos) / static_cast<double>(samples.size());
}

Dataset generate_synthetic(const SyntheticTaskSpec& spec, std::size_t n) {
  spec.validate();
  if (n == 0) throw ConfigError("generate_synthetic: n must be at least 1");
  const std::size_t dL = spec.dims[0], dV = spec.dims[1], dA = spec.dims[2];

  // Shared vocabulary, keyword and gesture direction.
  Rng shared = Rng::derive(spec.seed, ~std::uint64_t{0});
  std::vector<std::vector<double>> vocab;
  for (std::size_t w = 0; w < spec.vocab_size; ++w) vocab.push_back(random_vector(dL, shared));
  const std::vector<double> keyword = random_vector(dL, shared);
  std::vector<double> gesture = random_vector(dV, shared);
  double norm = 0.0;
  for (double g : gesture) norm += g * g;
  norm = std::sqrt(norm);
  for (double& g : gesture) g /= norm;

  Dataset ds;
  ds.label_kind = spec.label_kind;
  ds.dims = spec.dims;
  ds.seed = spec.seed;
  ds.spec = dependency_name(spec.dependency);
  ds.samples.reserve(n);
  ds.planted.reserve(n);
  const double word_noise = 0.2 * spec.noise_std;

  for (std::size_t i = 0; i < n; ++i) {
    Rng r = Rng::derive(spec.seed, i);
    const double duration = spec.base_len * r.uniform(1.0 - spec.jitter, 1.0 + spec.jitter);
    std::array<std::size_t, 3> T{};
    for (std::size_t m = 0; m < 3; ++m) {
      T[m] = static_cast<std::size_t>(std::max(1L, std::lround(spec.rates[m] * duration)));
    }

    PlantedPatterns p;
    p.positive = i % 2 == 1;
    switch (spec.dependency) {
      case Dependency::CrossmodalConjunction:
        if (p.positive) {
          p.keyword = p.gesture = true;
        } else {
          // Negatives alternate between keyword-only and gesture-only.
          p.keyword = i % 4 == 0;
          p.gesture = !p.keyword;
        }
        break;
      case Dependency::UnimodalLeak:
        p.keyword = p.positive;
        p.gesture = r.bernoulli(0.5);
        break;
      case Dependency::None:
        p.keyword = r.bernoulli(0.5);
        p.gesture = r.bernoulli(0.5);
        break;
    }

    Sample s;
    Tensor L({T[0], dL});
    for (std::size_t t = 0; t < T[0]; ++t) {
      const auto& w = vocab[r.below(spec.vocab_size)];
      for (std::size_t c = 0; c < dL; ++c) L.at(t, c) = w[c] + word_noise * r.normal();
    }
    if (p.keyword) {
      p.keyword_step = r.below(T[0]);
      for (std::size_t c = 0; c < dL; ++c) L.at(p.keyword_step, c) = keyword[c] + word_noise * r.normal();
    }

    Tensor V({T[1], dV});
    for (double& v : V.values()) v = spec.noise_std * r.normal();
    if (p.gesture) {
      const std::size_t len = std::min(spec.gesture_len, T[1]);
      p.gesture_step = r.below(T[1] - len + 1);
      for (std::size_t t = p.gesture_step; t < p.gesture_step + len; ++t)
        for (std::size_t c = 0; c < dV; ++c) V.at(t, c) += spec.gesture_amplitude * gesture[c];
    }

    Tensor A({T[2], dA});
    for (double& v : A.values()) v = spec.noise_std * r.normal();

    const double magnitude = r.uniform(1.0, 3.0);
    if (spec.label_kind == TaskKind::Sentiment) {
      s.label.score = p.positive ? magnitude : -magnitude;
    } else {
      s.label.emotions = {p.positive, p.keyword, p.gesture, !p.positive};
    }
    s.x[Modality::L] = std::move(L);
    s.x[Modality::V] = std::move(V);
    s.x[Modality::A] = std::move(A);
    ds.samples.push_back(std::move(s));
    ds.planted.push_back(p);
  }
  return ds;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  std::vector<std::uint8_t> out(kMagic, kMagic + kMagicLen);
  put_u32(out, ds.label_kind == TaskKind::Sentiment ? 0 : 1);
  put_u64(out, ds.samples.size());
  for (std::size_t d : ds.dims) put_u32(out, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    for (Modality m : kModalities) {
      if (s.x.dim(m) != ds.dims[index_of(m)]) {
        throw DimensionError("sample " + std::to_string(i) + " modality " + modality_name(m) + " has dim " +
                             std::to_string(s.x.dim(m)) + ", dataset declares " +
                             std::to_string(ds.dims[index_of(m)]));
      }
      put_u32(out, static_cast<std::uint32_t>(s.x.length(m)));
    }
    for (Modality m : kModalities)
      for (double v : s.x[m].values()) put_f64(out, v);
    if (ds.label_kind == TaskKind::Sentiment) {
      put_f64(out, s.label.score);
    } else {
      for (bool e : s.label.emotions) put_u8(out, e ? 1 : 0);
    }
  }
  return out;
}

Dataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.need(kMagicLen, "magic");
  if (std::memcmp(bytes.data(), kMagic, kMagicLen) != 0) throw FormatError("bad magic, expected MMSEQ1", 0);
  for (std::size_t i = 0; i < kMagicLen; ++i) r.u8("magic");

  Dataset ds;
  const std::size_t kind_at = r.offset();
  const std::uint32_t kind = r.u32("label kind");
  if (kind > 1) throw FormatError("unknown label kind " + std::to_string(kind), kind_at);
  ds.label_kind = kind == 0 ? TaskKind::Sentiment : TaskKind::Emotion;
  const std::uint64_t n = r.u64("sample count");
  for (std::size_t m = 0; m < 3; ++m) {
    const std::size_t at = r.offset();
    ds.dims[m] = r.u32("feature dims");
    if (ds.dims[m] == 0) throw FormatError("feature dim is zero", at);
  }
  const std::size_t label_bytes = ds.label_kind == TaskKind::Sentiment ? 8 : kEmotionCount;
  // Every sample takes at least 12 + 8 * (dL + dV + dA) + label bytes.
  const std::size_t min_record = 12 + 8 * (ds.dims[0] + ds.dims[1] + ds.dims[2]) + label_bytes;
  if (n > r.remaining() / min_record) {
    throw FormatError("header declares " + std::to_string(n) + " samples but only " +
                          std::to_string(r.remaining()) + " bytes follow",
                      r.offset());
  }
  ds.samples.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    Sample s;
    std::array<std::size_t, 3> T{};
    for (std::size_t m = 0; m < 3; ++m) {
      const std::size_t at = r.offset();
      T[m] = r.u32("sequence length");
      if (T[m] == 0) throw FormatError("sample " + std::to_string(i) + " has an empty sequence", at);
    }
    for (Modality m : kModalities) {
      const std::size_t count = T[index_of(m)] * ds.dims[index_of(m)];
      r.need(8 * count, "feature payload");
      std::vector<double> v(count);
      for (auto& x : v) x = r.f64("feature payload");
      s.x[m] = Tensor({T[index_of(m)], ds.dims[index_of(m)]}, std::move(v));
    }
    const std::size_t at = r.offset();
    if (ds.label_kind == TaskKind::Sentiment) {
      s.label.score = r.f64("label");
      if (!(s.label.score >= -3.0 && s.label.score <= 3.0)) {
        throw FormatError("sentiment score outside [-3, 3]", at);
      }
    } else {
      for (auto& e : s.label.emotions) {
        const std::uint8_t b = r.u8("label");
        if (b > 1) throw FormatError("emotion flag must be 0 or 1", at);
        e = b == 1;
      }
    }
    ds.samples.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last sample", r.offset());
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  const auto bytes = encode_dataset(ds);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw InputError("write to '" + path + "' failed");
  }
  nlohmann::ordered_json manifest;
  manifest["n"] = ds.samples.size();
  manifest["dims"] = {{"L", ds.dims[0]}, {"V", ds.dims[1]}, {"A", ds.dims[2]}};
  manifest["label_kind"] = ds.label_kind == TaskKind::Sentiment ? "sentiment" : "emotion";
  manifest["seed"] = ds.seed;
  manifest["spec"] = ds.spec;
  manifest["class_balance"] = ds.class_balance();
  nlohmann::ordered_json lengths = nlohmann::ordered_json::array();
  for (const auto& smp : ds.samples) {
    lengths.push_back({smp.x.length(Modality::L), smp.x.length(Modality::V), smp.x.length(Modality::A)});
  }
  manifest["lengths"] = lengths;
  std::ofstream m(path + ".json", std::ios::trunc);
  if (!m) throw InputError("cannot open '" + path + ".json' for writing");
  m << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open dataset '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Dataset ds = decode_dataset(bytes);
  std::ifstream m(path + ".json");
  if (m) {
    const auto manifest = nlohmann::json::parse(m, nullptr, false);
    if (manifest.is_object()) {
      ds.seed = manifest.value("seed", std::uint64_t{0});
      ds.spec = manifest.value("spec", std::string{});
    }
  }
  return ds;
}

Dataset subset(const Dataset& ds, const std::vector<std::size_t>& indices) {
  Dataset out;
  out.label_kind = ds.label_kind;
  out.dims = ds.dims;
  out.seed = ds.seed;
  out.spec = ds.spec;
  for (std::size_t i : indices) {
    if (i >= ds.samples.size()) throw ContractError("subset index out of range");
    out.samples.push_back(ds.samples[i]);
    if (!ds.planted.empty()) out.planted.push_back(ds.planted[i]);
  }
  return out;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double first_fraction, std::uint64_t seed) {
  if (!(first_fraction >= 0.0 && first_fraction <= 1.0)) throw ConfigError("split fraction must be in [0, 1]");
  std::vector<std::size_t> idx(ds.samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  shuffle(idx, rng);
  const auto cut = static_cast<std::size_t>(std::lround(first_fraction * static_cast<double>(idx.size())));
  std::vector<std::size_t> a(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut));
  std::vector<std::size_t> b(idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end());
  return {subset(ds, a), subset(ds, b)};
}

ModalityTriple Batch::padded_sample(std::size_t b) const {
  if (b >= size()) throw ContractError("batch index out of range");
  ModalityTriple x;
  for (std::size_t m = 0; m < 3; ++m) {
    const Tensor& st = stacked[m];
    const std::size_t T = st.shape()[1], d = st.shape()[2];
    const auto begin = st.values().begin() + static_cast<std::ptrdiff_t>(b * T * d);
    x.streams[m] = Tensor({T, d}, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(T * d)));
  }
  return x;
}

Batch pad_batch(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw ContractError("pad_batch: empty sample list");
  Batch batch;
  const std::size_t B = samples.size();
  for (Modality m : kModalities) {
    const std::size_t d = samples.front()->x.dim(m);
    std::size_t T = 0;
    for (const Sample* s : samples) {
      if (s->x.dim(m) != d) {
        throw DimensionError("pad_batch: inconsistent feature dims for modality " + modality_name(m) + " (" +
                             std::to_string(d) + " vs " + std::to_string(s->x.dim(m)) + ")");
      }
      if (s->x.length(m) == 0) throw InputError("pad_batch: empty sequence in modality " + modality_name(m));
      T = std::max(T, s->x.length(m));
    }
    Tensor st({B, T, d}, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& src = samples[b]->x[m].values();
      std::copy(src.begin(), src.end(), st.values().begin() + static_cast<std::ptrdiff_t>(b * T * d));
    }
    batch.stacked[index_of(m)] = std::move(st);
  }
  for (const Sample* s : samples) {
    std::array<std::size_t, 3> len{};
    std::array<std::vector<bool>, 3> mask;
    for (Modality m : kModalities) {
      const std::size_t i = index_of(m);
      len[i] = s->x.length(m);
      mask[i].assign(batch.stacked[i].shape()[1], false);
      std::fill(mask[i].begin(), mask[i].begin() + static_cast<std::ptrdiff_t>(len[i]), true);
    }
    batch.lengths.push_back(len);
    batch.masks.push_back(std::move(mask));
    batch.labels.push_back(s->label);
  }
  return batch;
}

Batch pad_batch(const std::vector<Sample>& samples) {
  std::vector<const Sample*> ptrs;
  ptrs.reserve(samples.size());
  for (const auto& s : samples) ptrs.push_back(&s);
  return pad_batch(ptrs);
}

}  // namespace mult
