// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference suite over every parameterised layer type, the CTC loss
// and a tiny full model.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mult {

struct GradCheckOptions {
  double eps = 1e-5;
  double threshold = 1e-4;
  std::uint64_t seed = 11;
  /// Component whose backward is deliberately corrupted (harness self-test).
  std::string inject_fault;
};

struct GradCheckEntry {
  std::string component;
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t coordinates = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double threshold = 0.0;

  bool all_pass() const;
  /// Components over the threshold.
  std::vector<std::string> failures() const;
};

std::vector<std::string> gradcheck_components();

/// Throws ConfigError if inject_fault names no component.
GradCheckReport run_gradcheck_suite(const GradCheckOptions& opts = {});

}  // namespace mult
