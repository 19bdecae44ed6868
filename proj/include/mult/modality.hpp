// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <string>

#include "mult/tensor.hpp"

namespace mult {

enum class Modality : int { L = 0, V = 1, A = 2 };

inline constexpr std::array<Modality, 3> kModalities = {Modality::L, Modality::V, Modality::A};

inline std::size_t index_of(Modality m) { return static_cast<std::size_t>(m); }
std::string modality_name(Modality m);
/// Accepts "L", "V", "A" (case-insensitive).
Modality parse_modality(const std::string& s);
/// "V_to_L" style label for a source -> target direction.
std::string direction_name(Modality source, Modality target);
/// Parses "V_to_L"; throws ConfigError on anything else.
std::pair<Modality, Modality> parse_direction(const std::string& s);
/// The modality that is neither a nor b.
Modality third_modality(Modality a, Modality b);

/// Three variable-length feature sequences, each [T_m x d_m], language first.
struct ModalityTriple {
  std::array<Tensor, 3> streams;

  Tensor& operator[](Modality m) { return streams[index_of(m)]; }
  const Tensor& operator[](Modality m) const { return streams[index_of(m)]; }
  std::size_t length(Modality m) const { return streams[index_of(m)].rows(); }
  std::size_t dim(Modality m) const { return streams[index_of(m)].cols(); }

  friend bool operator==(const ModalityTriple&, const ModalityTriple&) = default;
};

}  // namespace mult
