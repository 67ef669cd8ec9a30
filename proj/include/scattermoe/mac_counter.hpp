// SPDX-License-Identifier: Apache-2.0
//
// Process-wide multiply-accumulate counter. Every GEMM-like kernel in the
// library adds the MACs it actually performs, so padding-free claims can be
// checked by exact equality.

#pragma once

#include <cstdint>

namespace scattermoe::mac_counter {

void add(std::uint64_t macs) noexcept;
std::uint64_t read() noexcept;
void reset() noexcept;

/// Counts MACs issued between construction and `count()`.
class Scope {
 public:
  Scope() noexcept : start_(read()) {}
  std::uint64_t count() const noexcept { return read() - start_; }

 private:
  std::uint64_t start_;
};

}  // namespace scattermoe::mac_counter
