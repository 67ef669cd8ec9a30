// SPDX-License-Identifier: Apache-2.0
//
// Token routing: softmax gate, top-k selection and the padding-free grouped
// order that every kernel iterates.

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "scattermoe/tensor.hpp"

namespace scattermoe {

/// Per-token expert choices. Scattered slot s = t * k + j refers to token t's
/// j-th selection.
struct RoutingResult {
  std::size_t tokens = 0;
  std::size_t k = 0;
  /// tokens x k, row-major; ids within a row are distinct.
  std::vector<std::uint32_t> expert_idx;
  /// tokens x k gate weights applied in the weighted sum.
  Matrix p;
  /// tokens x E post-softmax probabilities, kept for the backward pass.
  Matrix gate_full;
  bool renormalized = true;

  std::size_t slots() const noexcept { return tokens * k; }
  std::uint32_t expert(std::size_t token, std::size_t j) const { return expert_idx[token * k + j]; }
};

/// Grouped layout without padding. Position i in [bin_offsets[e], bin_offsets[e+1])
/// holds scattered slot o[i], which is routed to expert e.
struct GroupedOrder {
  std::vector<std::size_t> o;
  std::vector<std::size_t> bin_counts;
  std::vector<std::size_t> bin_offsets;

  std::size_t slots() const noexcept { return o.size(); }
  std::size_t experts() const noexcept { return bin_counts.size(); }
  /// inverse[s] is the grouped position holding scattered slot s.
  std::vector<std::size_t> inverse() const;
};

/// Row-wise softmax of X * W_g; W_g.d_out() is the expert count.
Matrix gate_forward(const Matrix& x, const WeightMatrix& w_gate);

/// Row-wise softmax of raw logits.
Matrix softmax_rows(const Matrix& logits);

/// Keeps the k largest entries per row (ties go to the lower expert index) and
/// optionally rescales them to sum to one.
RoutingResult topk_select(const Matrix& gate, std::size_t k, bool renormalize = true);

/// Builds a routing directly from explicit assignments and weights; used for
/// adversarial routings in tests and benchmarks. gate_full is left empty.
RoutingResult routing_from_assignments(std::size_t tokens, std::size_t k, std::vector<std::uint32_t> expert_idx,
                                       Matrix p);

/// Stable counting sort of scattered slots by expert id, O(T*k + E).
GroupedOrder compute_grouped_order(const RoutingResult& routing, std::size_t experts);
GroupedOrder compute_grouped_order(std::span<const std::uint32_t> expert_idx, std::size_t experts);

/// Gradient with respect to the gate logits given dL/dp (tokens x k).
Matrix gate_backward(const Matrix& gate_full, const RoutingResult& routing, const Matrix& grad_p);

}  // namespace scattermoe
