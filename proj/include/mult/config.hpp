// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value configuration files. Keys cover the model, the trainer and
// the synthetic data generator; unknown keys are rejected.

#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "mult/data.hpp"
#include "mult/model.hpp"
#include "mult/train.hpp"

namespace mult {

struct KeyValue {
  std::string key;
  std::string value;
  std::size_t line = 0;  // 1-based source line, 0 when synthesised

  friend bool operator==(const KeyValue& a, const KeyValue& b) { return a.key == b.key && a.value == b.value; }
};

using KeyValueList = std::vector<KeyValue>;

/// `key = value` per line; '#' starts a comment; blank lines are skipped.
/// Duplicate keys and malformed lines raise ConfigError naming the line.
KeyValueList parse_key_values(std::string_view text, const std::string& source = "<config>");
std::string format_key_values(const KeyValueList& entries);
const KeyValue* find_key(const KeyValueList& entries, std::string_view key);

struct RunConfig {
  std::string preset;          // free-form label
  std::string optimizer = "adam";
  std::vector<std::size_t> kernel_L_choices;  // allowed language kernels; empty: any odd size
  MulTConfig model;
  TrainConfig train;
  SyntheticTaskSpec data;

  void validate() const;
};

/// Applies entries over the defaults in `cfg`. Unknown keys raise ConfigError.
void apply_key_values(const KeyValueList& entries, RunConfig& cfg);
RunConfig run_config_from(const KeyValueList& entries);
RunConfig load_run_config(const std::string& path);

/// Every key with its current value, in canonical order.
KeyValueList to_key_values(const RunConfig& cfg);
/// Model keys only (used as the checkpoint config echo).
KeyValueList model_key_values(const MulTConfig& cfg);
void apply_model_key_values(const KeyValueList& entries, MulTConfig& cfg);

/// Every recognised key.
std::vector<std::string> known_keys();

/// Shortest decimal form that reads back to the same double.
std::string format_double(double v);

}  // namespace mult
