// SPDX-License-Identifier: Apache-2.0
//
// Invariant suites shared by the `selfcheck` subcommand and the acceptance
// runner. Each check reports the worst value seen against its tolerance.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "flans/prompts.hpp"
#include "flans/tensor.hpp"

namespace flans {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0;      // worst error, or failure count
  double tolerance = 0;
  std::string detail;
};

// Lifting layer, every group-conv layer and the canonicalizer energies under
// one group element per (input, kernel) draw, cycling through D4.
CheckResult check_equivariance_f32(std::size_t trials, std::uint64_t seed);
CheckResult check_equivariance_f64(std::size_t trials, std::uint64_t seed);

// Random-parameter FlansModel: invariant-mode masks agree across D4 and
// equivariant-mode masks transform with the input. Draws whose canonicalizer
// argmax is not unique are skipped and counted in `detail`.
CheckResult check_model_invariance(std::size_t trials, std::uint64_t seed);

// Every primitive op, every loss term, canonicalize_soft, the text encoder
// and the full model at 16 x 16, all in f64.
std::vector<CheckResult> check_gradients(std::uint64_t seed);

// Pixel-scan oracle agreement plus the r180/flip swap laws.
CheckResult check_spatial_oracle(std::size_t sets, std::uint64_t seed);
// Independent implementation used by the check above.
std::map<SpatialCategory, int> spatial_scan_oracle(const std::vector<Mask>& masks);

// FTS round trips for every dtype and a checkpoint save/load that must give
// bit-identical forward outputs.
CheckResult check_fts_roundtrip(std::uint64_t seed);
CheckResult check_checkpoint_roundtrip(const std::filesystem::path& scratch, std::uint64_t seed);

struct SelfcheckOptions {
  std::size_t equivariance_trials = 100;
  std::size_t invariance_trials = 8;
  std::size_t oracle_sets = 1000;
  std::uint64_t seed = 0;
  std::filesystem::path scratch;  // empty: a temp directory
};

std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& options);

}  // namespace flans
