// SPDX-License-Identifier: Apache-2.0

#include "mult/config.hpp"

#include <algorithm>
#include <charconv>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "mult/error.hpp"

namespace mult {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t to_size(const std::string& key, const std::string& v) {
  if (v.empty() || !std::all_of(v.begin(), v.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  errno = 0;
  const unsigned long long n = std::strtoull(v.c_str(), nullptr, 10);
  if (errno == ERANGE) throw ConfigError(key + ": integer out of range");
  return static_cast<std::size_t>(n);
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(d)) {
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  }
  return d;
}

std::string size_str(std::size_t n) { return std::to_string(n); }

std::vector<std::size_t> parse_choices(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::istringstream in(v);
  std::string tok;
  while (in >> tok) {
    if (tok == "or") continue;
    out.push_back(to_size(key, tok));
  }
  if (out.empty()) throw ConfigError(key + ": expected a list such as '1 or 3'");
  return out;
}

std::string format_choices(const std::vector<std::size_t>& c) {
  std::string s;
  for (std::size_t i = 0; i < c.size(); ++i) s += (i ? " or " : "") + std::to_string(c[i]);
  return s;
}

enum class Group { Run, Model, Train, Data };

struct KeyDef {
  const char* key;
  Group group;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
  bool emit_when_empty = true;
};

#define SIZE_KEY(name, group, field)                                                    \
  KeyDef {                                                                              \
    name, group, [](RunConfig& c, const std::string& v) { c.field = to_size(name, v); }, \
        [](const RunConfig& c) { return size_str(c.field); }                              \
  }
#define DOUBLE_KEY(name, group, field)                                                    \
  KeyDef {                                                                                \
    name, group, [](RunConfig& c, const std::string& v) { c.field = to_double(name, v); }, \
        [](const RunConfig& c) { return format_double(c.field); }                           \
  }

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table = {
      KeyDef{"preset", Group::Run, [](RunConfig& c, const std::string& v) { c.preset = v; },
             [](const RunConfig& c) { return c.preset; }, false},
      KeyDef{"optimizer", Group::Run, [](RunConfig& c, const std::string& v) { c.optimizer = v; },
             [](const RunConfig& c) { return c.optimizer; }},
      KeyDef{"kernel_L_choices", Group::Run,
             [](RunConfig& c, const std::string& v) { c.kernel_L_choices = parse_choices("kernel_L_choices", v); },
             [](const RunConfig& c) { return format_choices(c.kernel_L_choices); }, false},

      SIZE_KEY("d", Group::Model, model.d),
      SIZE_KEY("layers", Group::Model, model.layers),
      SIZE_KEY("heads", Group::Model, model.heads),
      SIZE_KEY("kernel_L", Group::Model, model.kernels[0]),
      SIZE_KEY("kernel_V", Group::Model, model.kernels[1]),
      SIZE_KEY("kernel_A", Group::Model, model.kernels[2]),
      SIZE_KEY("input_dim_L", Group::Model, model.input_dims[0]),
      SIZE_KEY("input_dim_V", Group::Model, model.input_dims[1]),
      SIZE_KEY("input_dim_A", Group::Model, model.input_dims[2]),
      DOUBLE_KEY("embed_dropout", Group::Model, model.embed_dropout),
      DOUBLE_KEY("block_dropout", Group::Model, model.block_dropout),
      DOUBLE_KEY("output_dropout", Group::Model, model.output_dropout),
      KeyDef{"variant", Group::Model, [](RunConfig& c, const std::string& v) { parse_variant(v, c.model); },
             [](const RunConfig& c) { return variant_name(c.model.variant, c.model.variant_modality); }},
      SIZE_KEY("head_layers", Group::Model, model.head_layers),
      SIZE_KEY("ffn_multiplier", Group::Model, model.ffn_multiplier),
      KeyDef{"task", Group::Model,
             [](RunConfig& c, const std::string& v) {
               if (v == "sentiment") c.model.task = TaskKind::Sentiment;
               else if (v == "emotion") c.model.task = TaskKind::Emotion;
               else throw ConfigError("task: expected sentiment or emotion, got '" + v + "'");
             },
             [](const RunConfig& c) { return std::string(c.model.task == TaskKind::Sentiment ? "sentiment" : "emotion"); }},
      DOUBLE_KEY("ln_epsilon", Group::Model, model.ln_epsilon),
      SIZE_KEY("ctc_hidden", Group::Model, model.ctc_hidden),
      SIZE_KEY("ctc_max_slots", Group::Model, model.ctc_max_slots),

      SIZE_KEY("batch_size", Group::Train, train.batch_size),
      SIZE_KEY("epochs", Group::Train, train.epochs),
      DOUBLE_KEY("learning_rate", Group::Train, train.learning_rate),
      DOUBLE_KEY("grad_clip", Group::Train, train.clip_norm),
      SIZE_KEY("seed", Group::Train, train.seed),
      KeyDef{"loss", Group::Train,
             [](RunConfig& c, const std::string& v) {
               if (v == "l1") c.train.loss = LossKind::L1;
               else if (v == "l2") c.train.loss = LossKind::L2;
               else throw ConfigError("loss: expected l1 or l2, got '" + v + "'");
             },
             [](const RunConfig& c) { return std::string(c.train.loss == LossKind::L1 ? "l1" : "l2"); }},
      DOUBLE_KEY("val_fraction", Group::Train, train.val_fraction),
      DOUBLE_KEY("ctc_weight", Group::Train, train.ctc_weight),
      SIZE_KEY("lr_patience", Group::Train, train.lr_patience),
      DOUBLE_KEY("lr_factor", Group::Train, train.lr_factor),
      DOUBLE_KEY("min_lr", Group::Train, train.min_lr),
      KeyDef{"zero_labels", Group::Train,
             [](RunConfig& c, const std::string& v) {
               if (v == "exclude") c.train.zero_labels = ZeroLabelPolicy::Exclude;
               else if (v == "negative") c.train.zero_labels = ZeroLabelPolicy::AsNegative;
               else throw ConfigError("zero_labels: expected exclude or negative, got '" + v + "'");
             },
             [](const RunConfig& c) {
               return std::string(c.train.zero_labels == ZeroLabelPolicy::Exclude ? "exclude" : "negative");
             }},

      KeyDef{"data_dependency", Group::Data,
             [](RunConfig& c, const std::string& v) { c.data.dependency = parse_dependency(v); },
             [](const RunConfig& c) { return dependency_name(c.data.dependency); }},
      DOUBLE_KEY("data_rate_L", Group::Data, data.rates[0]),
      DOUBLE_KEY("data_rate_V", Group::Data, data.rates[1]),
      DOUBLE_KEY("data_rate_A", Group::Data, data.rates[2]),
      DOUBLE_KEY("data_base_len", Group::Data, data.base_len),
      DOUBLE_KEY("data_jitter", Group::Data, data.jitter),
      SIZE_KEY("data_dim_L", Group::Data, data.dims[0]),
      SIZE_KEY("data_dim_V", Group::Data, data.dims[1]),
      SIZE_KEY("data_dim_A", Group::Data, data.dims[2]),
      DOUBLE_KEY("data_noise_std", Group::Data, data.noise_std),
      DOUBLE_KEY("data_gesture_amplitude", Group::Data, data.gesture_amplitude),
      SIZE_KEY("data_gesture_len", Group::Data, data.gesture_len),
      SIZE_KEY("data_vocab_size", Group::Data, data.vocab_size),
      KeyDef{"data_label_kind", Group::Data,
             [](RunConfig& c, const std::string& v) {
               if (v == "sentiment") c.data.label_kind = TaskKind::Sentiment;
               else if (v == "emotion") c.data.label_kind = TaskKind::Emotion;
               else throw ConfigError("data_label_kind: expected sentiment or emotion, got '" + v + "'");
             },
             [](const RunConfig& c) {
               return std::string(c.data.label_kind == TaskKind::Sentiment ? "sentiment" : "emotion");
             }},
      SIZE_KEY("data_seed", Group::Data, data.seed),
  };
  return table;
}

#undef SIZE_KEY
#undef DOUBLE_KEY

const KeyDef* lookup(std::string_view key) {
  for (const auto& def : key_table())
    if (key == def.key) return &def;
  return nullptr;
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

KeyValueList parse_key_values(std::string_view text, const std::string& source) {
  KeyValueList out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string content = trim(line);
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value', got '" + content + "'");
    }
    KeyValue kv{trim(std::string_view(content).substr(0, eq)), trim(std::string_view(content).substr(eq + 1)),
                line_no};
    if (kv.key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
    if (find_key(out, kv.key)) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": duplicate key '" + kv.key + "'");
    }
    out.push_back(std::move(kv));
  }
  return out;
}

std::string format_key_values(const KeyValueList& entries) {
  std::string s;
  for (const auto& kv : entries) s += kv.key + " = " + kv.value + "\n";
  return s;
}

const KeyValue* find_key(const KeyValueList& entries, std::string_view key) {
  for (const auto& kv : entries)
    if (kv.key == key) return &kv;
  return nullptr;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (optimizer != "adam") throw ConfigError("optimizer: only adam is supported, got '" + optimizer + "'");
  if (!kernel_L_choices.empty() &&
      std::find(kernel_L_choices.begin(), kernel_L_choices.end(), model.kernels[0]) == kernel_L_choices.end()) {
    throw ConfigError("kernel_L = " + std::to_string(model.kernels[0]) + " is not one of kernel_L_choices (" +
                      format_choices(kernel_L_choices) + ")");
  }
}

void apply_key_values(const KeyValueList& entries, RunConfig& cfg) {
  for (const auto& kv : entries) {
    const KeyDef* def = lookup(kv.key);
    if (!def) {
      throw ConfigError("unknown config key '" + kv.key + "'" +
                        (kv.line ? " on line " + std::to_string(kv.line) : std::string{}));
    }
    def->set(cfg, kv.value);
  }
}

RunConfig run_config_from(const KeyValueList& entries) {
  RunConfig cfg;
  apply_key_values(entries, cfg);
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return run_config_from(parse_key_values(ss.str(), path));
}

KeyValueList to_key_values(const RunConfig& cfg) {
  KeyValueList out;
  for (const auto& def : key_table()) {
    std::string v = def.get(cfg);
    if (v.empty() && !def.emit_when_empty) continue;
    out.push_back({def.key, std::move(v), 0});
  }
  return out;
}

KeyValueList model_key_values(const MulTConfig& model) {
  RunConfig cfg;
  cfg.model = model;
  KeyValueList out;
  for (const auto& def : key_table())
    if (def.group == Group::Model) out.push_back({def.key, def.get(cfg), 0});
  return out;
}

void apply_model_key_values(const KeyValueList& entries, MulTConfig& model) {
  RunConfig cfg;
  cfg.model = model;
  for (const auto& kv : entries) {
    const KeyDef* def = lookup(kv.key);
    if (!def || def->group != Group::Model) throw ConfigError("'" + kv.key + "' is not a model key");
    def->set(cfg, kv.value);
  }
  model = cfg.model;
}

std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& def : key_table()) out.emplace_back(def.key);
  return out;
}

}  // namespace mult
