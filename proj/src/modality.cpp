// SPDX-License-Identifier: Apache-2.0

#include "mult/modality.hpp"

#include "mult/error.hpp"

namespace mult {

std::string modality_name(Modality m) {
  switch (m) {
    case Modality::L: return "L";
    case Modality::V: return "V";
    case Modality::A: return "A";
  }
  return "?";
}

Modality parse_modality(const std::string& s) {
  if (s == "L" || s == "l") return Modality::L;
  if (s == "V" || s == "v") return Modality::V;
  if (s == "A" || s == "a") return Modality::A;
  throw ConfigError("unknown modality '" + s + "' (expected L, V or A)");
}

std::string direction_name(Modality source, Modality target) {
  return modality_name(source) + "_to_" + modality_name(target);
}

std::pair<Modality, Modality> parse_direction(const std::string& s) {
  const auto pos = s.find("_to_");
  if (pos == std::string::npos) throw ConfigError("direction '" + s + "' is not of the form X_to_Y");
  const Modality src = parse_modality(s.substr(0, pos));
  const Modality dst = parse_modality(s.substr(pos + 4));
  if (src == dst) throw ConfigError("direction '" + s + "' must join two different modalities");
  return {src, dst};
}

Modality third_modality(Modality a, Modality b) {
  for (Modality m : kModalities)
    if (m != a && m != b) return m;
  throw ContractError("third_modality: arguments must differ");
}

}  // namespace mult
