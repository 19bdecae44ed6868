// SPDX-License-Identifier: Apache-2.0

#include "mult/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <json.hpp>

#include "mult/config.hpp"
#include "mult/ctc.hpp"
#include "mult/error.hpp"

namespace mult {

namespace {

constexpr char kMagic[] = "MULTCKPT1";
constexpr std::size_t kMagicLen = 9;

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(SequenceModel& model, std::uint64_t seed) {
  nlohmann::ordered_json manifest;
  manifest["format"] = "MULTCKPT1";
  manifest["seed"] = seed;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  for (const auto& kv : model_key_values(model.config())) config[kv.key] = kv.value;
  manifest["config"] = config;
  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  const ParameterList plist = model.parameters();
  for (const Parameter* p : plist) {
    params.push_back({{"name", p->name}, {"shape", p->tensor.shape()}, {"offset", offset}});
    offset += 8 * p->tensor.size();
  }
  manifest["parameters"] = params;
  manifest["blob_bytes"] = offset;
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + kMagicLen);
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const Parameter* p : plist) {
    for (double v : p->tensor.values()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
  }
  return out;
}

LoadedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kMagicLen + 8) throw FormatError("checkpoint truncated in header", bytes.size());
  if (std::memcmp(bytes.data(), kMagic, kMagicLen) != 0) throw FormatError("bad magic, expected MULTCKPT1", 0);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[kMagicLen + i]) << (8 * i);
  const std::size_t manifest_at = kMagicLen + 8;
  if (len > bytes.size() - manifest_at) throw FormatError("checkpoint truncated in manifest", bytes.size());
  const std::size_t blob_at = manifest_at + len;

  nlohmann::json manifest = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(manifest_at),
                                                  bytes.begin() + static_cast<std::ptrdiff_t>(blob_at), nullptr,
                                                  false);
  if (manifest.is_discarded() || !manifest.is_object() || !manifest.contains("config") ||
      !manifest.contains("parameters")) {
    throw FormatError("checkpoint manifest is not valid JSON of the expected shape", manifest_at);
  }

  LoadedCheckpoint out;
  MulTConfig cfg;
  try {
    KeyValueList kvs;
    for (const auto& [k, v] : manifest["config"].items()) kvs.push_back({k, v.get<std::string>(), 0});
    apply_model_key_values(kvs, cfg);
    out.seed = manifest.value("seed", std::uint64_t{0});
    out.model = make_model(cfg, out.seed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config echo: ") + e.what(), manifest_at);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config echo: ") + e.what(), manifest_at);
  }

  std::map<std::string, Parameter*> by_name;
  for (Parameter* p : out.model->parameters()) by_name[p->name] = p;
  const auto& entries = manifest["parameters"];
  if (!entries.is_array() || entries.size() != by_name.size()) {
    throw FormatError("checkpoint lists " + std::to_string(entries.size()) + " parameters, model has " +
                          std::to_string(by_name.size()),
                      manifest_at);
  }
  for (const auto& e : entries) {
    const std::string name = e.value("name", std::string{});
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("unknown parameter '" + name + "' in checkpoint", manifest_at);
    Tensor& t = it->second->tensor;
    const Shape shape = e.value("shape", Shape{});
    if (shape != t.shape()) {
      throw FormatError("parameter '" + name + "' has shape " + shape_string(shape) + ", model expects " +
                            shape_string(t.shape()),
                        manifest_at);
    }
    const std::size_t offset = e.value("offset", std::size_t{0});
    const std::size_t at = blob_at + offset;
    if (offset > bytes.size() || at + 8 * t.size() > bytes.size()) {
      throw FormatError("checkpoint truncated in parameter '" + name + "'", bytes.size());
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[at + 8 * i + b]) << (8 * b);
      t[i] = std::bit_cast<double>(bits);
    }
  }
  const std::size_t blob_bytes = manifest.value("blob_bytes", std::size_t{0});
  if (blob_at + blob_bytes != bytes.size()) {
    throw FormatError("checkpoint size does not match its manifest", std::min(bytes.size(), blob_at + blob_bytes));
  }
  return out;
}

void save_checkpoint(SequenceModel& model, std::uint64_t seed, const std::string& path) {
  const auto bytes = encode_checkpoint(model, seed);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw InputError("write to '" + path + "' failed");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace mult
