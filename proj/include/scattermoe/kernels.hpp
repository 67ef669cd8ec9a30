// SPDX-License-Identifier: Apache-2.0
//
// Fused grouped-GEMM primitives. Every kernel walks the expert bins of a
// GroupedOrder at their true sizes: a bin shorter than a tile yields one
// short tile, never a zero-padded one.

#pragma once

#include <cstddef>
#include <span>

#include "scattermoe/router.hpp"
#include "scattermoe/tensor.hpp"

namespace scattermoe {

/// Whether the kernel input and output rows are in grouped (expert-contiguous)
/// or scattered (chronological slot) order.
struct LayoutFlag {
  bool grouped_in = false;
  bool grouped_out = false;
};

/// Blocking parameters. Results do not depend on any of them.
struct TileConfig {
  std::size_t tile_rows = 64;
  std::size_t tile_cols = 64;
  std::size_t tile_inner = 64;
  std::size_t worker_count = default_worker_count();

  static std::size_t default_worker_count();
  void validate() const;
};

/// Which role W plays: x * W[e], or x * W[e]^T read with swapped indices.
enum class WeightView { kAsIs, kTransposed };

/// Applies each slot's expert transform while reading and writing rows in the
/// layout chosen by `layout`. Output has order.slots() rows. Position i of bin
/// e reads row i (grouped_in) or row o[i] / fan_out (scattered), and writes to
/// row i (grouped_out) or row o[i].
///
/// `reuse`, when it already has the output shape, receives the result without
/// a new allocation.
Matrix scatter2scatter(const Matrix& x, const ExpertTensor& w, const GroupedOrder& order, std::size_t fan_out,
                       LayoutFlag layout, const TileConfig& tile = {}, WeightView view = WeightView::kAsIs,
                       Matrix reuse = {});

/// scatter2scatter followed by the routing-weighted sum over each token's
/// slots, without materialising the per-slot outputs. `p` is S x j with
/// S * j = order.slots(); slot s * j + i is weighted by p(s, i). Output is S x d_out.
Matrix scatter2scatter_combine(const Matrix& x, const ExpertTensor& w, const GroupedOrder& order,
                               std::size_t fan_out, bool grouped_in, const Matrix& p, const TileConfig& tile = {});

/// Grouped copy: row i = x[o[i] / fan_out] * weights[o[i]] (weights empty means 1).
Matrix group(const Matrix& x, const GroupedOrder& order, std::span<const float> weights, std::size_t fan_out,
             Matrix reuse = {});

/// Inverse of group for fan_out 1: row o[i] of the result is row i of `grouped`.
Matrix scatter(const Matrix& grouped, const GroupedOrder& order);

/// Per-expert Gram product: result[e] = Xg[bin e]^T * Yg[bin e]. Empty bins give zeros.
ExpertTensor group_xty(const Matrix& xg, const Matrix& yg, const GroupedOrder& order, const TileConfig& tile = {});

}  // namespace scattermoe
