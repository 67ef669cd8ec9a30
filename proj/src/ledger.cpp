// SPDX-License-Identifier: Apache-2.0

#include "scattermoe/ledger.hpp"

#include <algorithm>
#include <ostream>
#include <stdexcept>

namespace scattermoe {

const char* phase_name(Phase phase) { return phase == Phase::kForward ? "forward" : "backward"; }

AllocationLedger::Id AllocationLedger::allocate(std::string buffer, std::size_t rows, std::size_t cols,
                                                Phase phase) {
  const std::size_t bytes = rows * cols * sizeof(float);
  entries_.push_back({std::move(buffer), phase, rows, cols, bytes, true});
  live_bytes_ += bytes;
  peak_bytes_ = std::max(peak_bytes_, live_bytes_);
  return entries_.size() - 1;
}

void AllocationLedger::release(Id id) {
  if (id >= entries_.size() || !entries_[id].live) {
    throw std::logic_error("AllocationLedger: release of unknown or already released buffer");
  }
  entries_[id].live = false;
  live_bytes_ -= entries_[id].bytes;
}

std::size_t AllocationLedger::total_bytes(Phase phase) const {
  std::size_t sum = 0;
  for (const auto& e : entries_) {
    if (e.phase == phase) sum += e.bytes;
  }
  return sum;
}

std::size_t AllocationLedger::count_shape(std::size_t rows, std::size_t cols) const {
  return static_cast<std::size_t>(
      std::count_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.rows == rows && e.cols == cols; }));
}

std::size_t AllocationLedger::count_rows(std::size_t rows, Phase phase) const {
  return static_cast<std::size_t>(
      std::count_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.rows == rows && e.phase == phase; }));
}

void AllocationLedger::write_csv(std::ostream& os) const {
  os << "buffer,phase,rows,cols,bytes\n";
  for (const auto& e : entries_) {
    os << e.buffer << ',' << phase_name(e.phase) << ',' << e.rows << ',' << e.cols << ',' << e.bytes << '\n';
  }
}

}  // namespace scattermoe
