// SPDX-License-Identifier: Apache-2.0
//
// Randomized verification suites behind the `verify` subcommand. Each suite
// checks the library against the reference implementations and reports how
// many of its cases passed.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "scattermoe/kernels.hpp"
#include "scattermoe/tensor.hpp"

namespace scattermoe::verify {

struct SuiteResult {
  std::string name;
  std::size_t passed = 0;
  std::size_t total = 0;
  /// Largest error-to-tolerance ratio seen (<= 1 passes); 0 for exact checks.
  double worst_ratio = 0.0;
  double seconds = 0.0;
  /// First failure, if any.
  std::string detail;

  bool ok() const noexcept { return total > 0 && passed == total; }
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  std::size_t trials = 100;
  TileConfig tile;
  /// Test hook: applied to every computed output or gradient before it is
  /// compared, so a corrupted result must make the suites fail.
  std::function<void(Matrix&)> perturb;
};

/// Fused SMoE MLP vs the per-token oracle over `trials` random configurations.
SuiteResult oracle_equivalence(const VerifyOptions& options);
/// SMoE MLP and MoMHA gradients vs central differences.
SuiteResult gradients(const VerifyOptions& options);
/// Kernel MAC counts equal the unpadded work for uniform and skewed routings.
SuiteResult padding_free(const VerifyOptions& options);
/// Fused vs padded-baseline ledgers over the oracle-equivalence configurations.
SuiteResult memory_footprint(const VerifyOptions& options);
/// ParallelLinear backward with pre-seeded scratch allocates no slot matrices.
SuiteResult buffer_reuse(const VerifyOptions& options);
/// Grouped output scattered back equals scattered output, bit for bit.
SuiteResult layout_consistency(const VerifyOptions& options);
/// Single-expert layers equal their dense counterparts.
SuiteResult reductions(const VerifyOptions& options);
/// Sweep derivations and MAC bookkeeping.
SuiteResult sweep_structure(const VerifyOptions& options);

std::vector<SuiteResult> run_all(const VerifyOptions& options);

/// Prints one line per suite and returns 0 when all passed, else 1.
int report(std::ostream& os, const std::vector<SuiteResult>& results);

}  // namespace scattermoe::verify
