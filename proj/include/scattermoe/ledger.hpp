// SPDX-License-Identifier: Apache-2.0
//
// Logical allocation accounting. Buffers are recorded by shape, not measured
// from the allocator, so footprints compare deterministically.

#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

namespace scattermoe {

enum class Phase { kForward, kBackward };

const char* phase_name(Phase phase);

struct LedgerEntry {
  std::string buffer;
  Phase phase = Phase::kForward;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t bytes = 0;  // rows * cols * sizeof(float)
  bool live = true;
};

class AllocationLedger {
 public:
  using Id = std::size_t;

  /// Records a new float buffer and returns a handle for `release`.
  Id allocate(std::string buffer, std::size_t rows, std::size_t cols, Phase phase);
  void release(Id id);

  const std::vector<LedgerEntry>& entries() const noexcept { return entries_; }
  std::size_t live_bytes() const noexcept { return live_bytes_; }
  std::size_t peak_bytes() const noexcept { return peak_bytes_; }
  std::size_t total_bytes(Phase phase) const;
  /// Number of entries with exactly this shape.
  std::size_t count_shape(std::size_t rows, std::size_t cols) const;
  /// Number of entries with this many rows, in the given phase.
  std::size_t count_rows(std::size_t rows, Phase phase) const;

  /// Header `buffer,phase,rows,cols,bytes`, one line per entry.
  void write_csv(std::ostream& os) const;

 private:
  std::vector<LedgerEntry> entries_;
  std::size_t live_bytes_ = 0;
  std::size_t peak_bytes_ = 0;
};

/// Null-safe helpers so instrumented code can take an optional ledger.
inline AllocationLedger::Id ledger_allocate(AllocationLedger* ledger, std::string buffer, std::size_t rows,
                                            std::size_t cols, Phase phase) {
  return ledger ? ledger->allocate(std::move(buffer), rows, cols, phase) : 0;
}
inline void ledger_release(AllocationLedger* ledger, AllocationLedger::Id id) {
  if (ledger) ledger->release(id);
}

}  // namespace scattermoe
