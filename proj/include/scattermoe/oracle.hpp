// SPDX-License-Identifier: Apache-2.0
//
// Reference implementations used as ground truth, and the group-copy + pad
// baseline pipeline whose footprint the fused layers are compared against.
//
// The references deliberately share no code with the kernels: they loop over
// tokens and their selected experts one at a time, in double precision.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "scattermoe/ledger.hpp"
#include "scattermoe/moe_layers.hpp"
#include "scattermoe/router.hpp"
#include "scattermoe/tensor.hpp"

namespace scattermoe::oracle {

/// Double-precision row-major matrix.
struct RefMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  RefMatrix() = default;
  RefMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  static RefMatrix from(const Matrix& m);
  static RefMatrix from(const WeightMatrix& w);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  Matrix to_float() const;
};

/// Double-precision E x d_in x d_out tensor.
struct RefExperts {
  std::size_t experts = 0;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::vector<double> data;

  static RefExperts from(const ExpertTensor& w);
  double operator()(std::size_t e, std::size_t i, std::size_t o) const {
    return data[(e * d_in + i) * d_out + o];
  }
};

/// Per-token SMoE MLP: Y_t = sum_j p(t, j) * act(X_t W1[e]) W2[e] with
/// e = expert_idx[t * k + j].
RefMatrix naive_smoe_mlp(const RefMatrix& x, const RefExperts& w1, const RefExperts& w2,
                         std::span<const std::uint32_t> expert_idx, const RefMatrix& p, std::size_t k,
                         Activation activation);
RefMatrix naive_smoe_mlp(const Matrix& x, const ExpertTensor& w1, const ExpertTensor& w2,
                         const RoutingResult& routing, Activation activation);

/// Plain dense attention with an explicit mask matrix; query row i belongs to
/// token slot_token[i]. Heads of width d_head are independent.
RefMatrix dense_attention(const RefMatrix& q, const RefMatrix& k, const RefMatrix& v,
                          std::span<const std::size_t> slot_token, std::size_t d_head, std::size_t seq_len,
                          bool causal);

struct RefMomhaWeights {
  RefMatrix w_k;
  RefMatrix w_v;
  RefExperts w_q;
  RefExperts w_o;
  static RefMomhaWeights from(const MomhaWeights& w);
};

/// Slot-by-slot MoMHA: for each token and each selected expert, materialise
/// that expert's queries, attend densely over the shared keys/values, project
/// with the expert's output transform and weight by p.
RefMatrix naive_momha(const RefMatrix& x, const RefMomhaWeights& w, std::span<const std::uint32_t> expert_idx,
                      const RefMatrix& p, const MomhaConfig& config);

/// Standard multi-head attention block with `heads` heads of width d_head.
RefMatrix dense_mha_reference(const RefMatrix& x, const RefMatrix& w_q, const RefMatrix& w_k, const RefMatrix& w_v,
                              const RefMatrix& w_o, std::size_t d_head, std::size_t seq_len, bool causal);

/// Central differences (f(theta + eps e_i) - f(theta - eps e_i)) / 2 eps.
std::vector<double> finite_difference_gradient(const std::function<double(std::span<const double>)>& f,
                                               std::span<const double> theta, double eps = 1e-3);

/// Plain two-layer MLP act(X W) W' in float, the dense comparator for sweeps.
Matrix dense_mlp_reference(const Matrix& x, const WeightMatrix& w, const WeightMatrix& w_out, Activation activation);

// ---------------------------------------------------------------------------
// Group-copy + pad baseline

struct BaselineConfig {
  /// Every expert bin is padded up to a multiple of this many rows.
  std::size_t block_size = 128;
  /// When false the first GEMM gathers rows by index instead of copying.
  bool make_grouped_copies = true;
};

/// Rows of a padded grouped buffer: sum_e ceil(count_e / block) * block.
std::size_t padded_rows(std::span<const std::size_t> bin_counts, std::size_t block_size);

/// The copy-then-compute SMoE MLP: grouped padded input copy, padded hidden,
/// padded activation, padded grouped output, scattered per-slot output, then
/// the weighted sum. Records every buffer and its lifetime in `ledger`.
Matrix baseline_grouped_pipeline(const Matrix& x, const ExpertTensor& w1, const ExpertTensor& w2,
                                 const RoutingResult& routing, const GroupedOrder& order, Activation activation,
                                 const BaselineConfig& config, AllocationLedger* ledger);

struct FusedLedgerConfig {
  std::size_t tokens = 0;
  std::size_t d_model = 0;
  std::size_t d_expert = 0;
  std::size_t experts = 0;
  std::size_t k = 0;
  bool include_backward = false;
  std::uint64_t seed = 0;
};

/// Runs the fused SMoE MLP on seeded data with instrumentation and returns the
/// buffers it allocated. Forward-only runs use inference mode.
AllocationLedger fused_pipeline_ledger(const FusedLedgerConfig& config);

}  // namespace scattermoe::oracle
