// SPDX-License-Identifier: Apache-2.0

#include "scattermoe/mac_counter.hpp"

#include <atomic>

namespace scattermoe::mac_counter {
namespace {
std::atomic<std::uint64_t> g_macs{0};
}

void add(std::uint64_t macs) noexcept { g_macs.fetch_add(macs, std::memory_order_relaxed); }
std::uint64_t read() noexcept { return g_macs.load(std::memory_order_relaxed); }
void reset() noexcept { g_macs.store(0, std::memory_order_relaxed); }

}  // namespace scattermoe::mac_counter
