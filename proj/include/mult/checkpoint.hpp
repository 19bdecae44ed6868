// SPDX-License-Identifier: Apache-2.0
//
// MULTCKPT1 checkpoints:
//   "MULTCKPT1" | u64 manifest length | JSON manifest | little-endian f64 blobs
// The manifest echoes the model config as flat key/value strings and lists
// every parameter with its shape and byte offset into the blob section.

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mult/model.hpp"

namespace mult {

struct LoadedCheckpoint {
  std::unique_ptr<SequenceModel> model;
  std::uint64_t seed = 0;
};

std::vector<std::uint8_t> encode_checkpoint(SequenceModel& model, std::uint64_t seed);
LoadedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(SequenceModel& model, std::uint64_t seed, const std::string& path);
/// Rebuilds the model from the config echo, then overwrites every parameter.
/// Throws FormatError (with byte offset) on malformed or mismatched files.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace mult
