// SPDX-License-Identifier: Apache-2.0

#include "scattermoe/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace scattermoe {

std::vector<std::size_t> GroupedOrder::inverse() const {
  std::vector<std::size_t> inv(o.size());
  for (std::size_t i = 0; i < o.size(); ++i) inv[o[i]] = i;
  return inv;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  std::vector<double> ex(logits.cols());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    const auto z = logits.row(t);
    const float zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t e = 0; e < z.size(); ++e) {
      ex[e] = std::exp(static_cast<double>(z[e]) - zmax);
      sum += ex[e];
    }
    auto y = out.row(t);
    for (std::size_t e = 0; e < z.size(); ++e) y[e] = static_cast<float>(ex[e] / sum);
  }
  return out;
}

Matrix gate_forward(const Matrix& x, const WeightMatrix& w_gate) {
  if (x.cols() != w_gate.d_in()) {
    throw DimensionError("gate_forward: tokens " + x.shape() + " incompatible with gate weights " + w_gate.shape());
  }
  return softmax_rows(matmul(x, w_gate));
}

RoutingResult topk_select(const Matrix& gate, std::size_t k, bool renormalize) {
  const std::size_t experts = gate.cols();
  if (k == 0 || k > experts) {
    throw std::invalid_argument("topk_select: k=" + std::to_string(k) + " outside [1, " + std::to_string(experts) +
                                "]");
  }
  RoutingResult r;
  r.tokens = gate.rows();
  r.k = k;
  r.expert_idx.resize(r.tokens * k);
  r.p = Matrix(r.tokens, k);
  r.gate_full = gate;
  r.renormalized = renormalize;

  std::vector<std::uint32_t> ids(experts);
  for (std::size_t t = 0; t < r.tokens; ++t) {
    const auto g = gate.row(t);
    std::iota(ids.begin(), ids.end(), 0u);
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                      [&](std::uint32_t a, std::uint32_t b) { return g[a] > g[b] || (g[a] == g[b] && a < b); });
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += g[ids[j]];
    for (std::size_t j = 0; j < k; ++j) {
      r.expert_idx[t * k + j] = ids[j];
      const double w = g[ids[j]];
      r.p(t, j) = static_cast<float>(renormalize && sum > 0.0 ? w / sum : w);
    }
  }
  return r;
}

RoutingResult routing_from_assignments(std::size_t tokens, std::size_t k, std::vector<std::uint32_t> expert_idx,
                                       Matrix p) {
  if (expert_idx.size() != tokens * k) {
    throw DimensionError("routing_from_assignments: " + std::to_string(expert_idx.size()) +
                         " assignments for " + shape_string(tokens, k));
  }
  if (p.rows() != tokens || p.cols() != k) {
    throw DimensionError("routing_from_assignments: weights " + p.shape() + " expected " + shape_string(tokens, k));
  }
  RoutingResult r;
  r.tokens = tokens;
  r.k = k;
  r.expert_idx = std::move(expert_idx);
  r.p = std::move(p);
  r.renormalized = false;
  return r;
}

GroupedOrder compute_grouped_order(std::span<const std::uint32_t> expert_idx, std::size_t experts) {
  GroupedOrder g;
  g.bin_counts.assign(experts, 0);
  for (const auto e : expert_idx) {
    if (e >= experts) {
      throw std::invalid_argument("compute_grouped_order: expert id " + std::to_string(e) + " outside [0, " +
                                  std::to_string(experts) + ")");
    }
    ++g.bin_counts[e];
  }
  g.bin_offsets.assign(experts + 1, 0);
  for (std::size_t e = 0; e < experts; ++e) g.bin_offsets[e + 1] = g.bin_offsets[e] + g.bin_counts[e];

  g.o.resize(expert_idx.size());
  std::vector<std::size_t> cursor(g.bin_offsets.begin(), g.bin_offsets.end() - 1);
  for (std::size_t s = 0; s < expert_idx.size(); ++s) g.o[cursor[expert_idx[s]]++] = s;
  return g;
}

GroupedOrder compute_grouped_order(const RoutingResult& routing, std::size_t experts) {
  return compute_grouped_order(routing.expert_idx, experts);
}

Matrix gate_backward(const Matrix& gate_full, const RoutingResult& routing, const Matrix& grad_p) {
  const std::size_t tokens = routing.tokens;
  const std::size_t k = routing.k;
  if (gate_full.rows() != tokens || gate_full.cols() < k) {
    throw DimensionError("gate_backward: gate " + gate_full.shape() + " inconsistent with routing of " +
                         shape_string(tokens, k));
  }
  if (grad_p.rows() != tokens || grad_p.cols() != k) {
    throw DimensionError("gate_backward: grad_p " + grad_p.shape() + " expected " + shape_string(tokens, k));
  }
  const std::size_t experts = gate_full.cols();
  Matrix grad_logits(tokens, experts);
  std::vector<double> dgate(experts);
  for (std::size_t t = 0; t < tokens; ++t) {
    std::fill(dgate.begin(), dgate.end(), 0.0);
    const auto g = gate_full.row(t);
    if (routing.renormalized) {
      // p_j = g_j / S with S the sum of selected gates.
      double sum = 0.0;
      double weighted = 0.0;
      for (std::size_t j = 0; j < k; ++j) sum += g[routing.expert(t, j)];
      for (std::size_t j = 0; j < k; ++j) weighted += static_cast<double>(grad_p(t, j)) * (g[routing.expert(t, j)] / sum);
      for (std::size_t j = 0; j < k; ++j) dgate[routing.expert(t, j)] = (grad_p(t, j) - weighted) / sum;
    } else {
      for (std::size_t j = 0; j < k; ++j) dgate[routing.expert(t, j)] = grad_p(t, j);
    }
    double dot = 0.0;
    for (std::size_t e = 0; e < experts; ++e) dot += g[e] * dgate[e];
    auto out = grad_logits.row(t);
    for (std::size_t e = 0; e < experts; ++e) out[e] = static_cast<float>(g[e] * (dgate[e] - dot));
  }
  return grad_logits;
}

}  // namespace scattermoe
