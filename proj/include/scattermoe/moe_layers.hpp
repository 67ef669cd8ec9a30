// SPDX-License-Identifier: Apache-2.0
//
// Layers composed from ParallelLinear: the SMoE MLP (scattered -> grouped,
// activation, grouped -> scattered with weighted sum) and Mixture of
// Multi-head Attention (expert-routed query/output projections over shared
// key/value projections, both transforms scattered -> scattered).

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "scattermoe/kernels.hpp"
#include "scattermoe/ledger.hpp"
#include "scattermoe/parallel_linear.hpp"
#include "scattermoe/router.hpp"
#include "scattermoe/tensor.hpp"

namespace scattermoe {

enum class Activation { kGelu, kSilu, kRelu, kIdentity };

Activation parse_activation(std::string_view name);
const char* activation_name(Activation act);
/// Exact (erf) GELU, SiLU, ReLU or identity, evaluated in double.
double activate(Activation act, double x);
double activate_derivative(Activation act, double x);
void activate_inplace(Activation act, std::span<float> values);

/// Train keeps what the backward needs; inference fuses the weighted sum and
/// keeps nothing.
enum class Mode { kTrain, kInference };

struct LayerOptions {
  TileConfig tile;
  AllocationLedger* ledger = nullptr;
  Mode mode = Mode::kTrain;
};

struct LayerBackwardOptions {
  TileConfig tile;
  AllocationLedger* ledger = nullptr;
  parallel_linear::BufferReuse reuse = parallel_linear::BufferReuse::kReuse;
};

// ---------------------------------------------------------------------------
// SMoE MLP

struct SmoeMlpConfig {
  std::size_t d_model = 0;
  std::size_t d_expert = 0;
  std::size_t experts = 0;
  std::size_t k = 0;
  Activation activation = Activation::kGelu;

  void validate() const;
};

/// Granularity of an expert size relative to a dense MLP of width d_ff.
struct DerivedGranularity {
  std::size_t d_ff = 0;
  std::size_t d_expert = 0;
  double g = 0.0;

  static DerivedGranularity of(std::size_t d_ff, std::size_t d_expert);
};

struct SmoeMlpContext {
  parallel_linear::LinearContext first;
  parallel_linear::LinearContext second;
  /// Grouped hidden state before the activation (slots x d_expert).
  Matrix hidden_pre;
  Activation activation = Activation::kGelu;
};

struct SmoeMlpResult {
  Matrix y;
  std::optional<SmoeMlpContext> ctx;  // empty in inference mode
};

struct SmoeMlpGradients {
  Matrix dx;
  ExpertTensor dw1;
  ExpertTensor dw2;
  Matrix dp;
};

/// Y (T x d_model). The hidden state exists only in grouped layout and the
/// routing weights are applied by the second transform.
SmoeMlpResult smoe_mlp_forward(const SmoeMlpConfig& config, const Matrix& x, const ExpertTensor& w1,
                               const ExpertTensor& w2, const RoutingResult& routing, const GroupedOrder& order,
                               const LayerOptions& options = {});

SmoeMlpGradients smoe_mlp_backward(SmoeMlpContext& ctx, const Matrix& dy, const ExpertTensor& w1,
                                   const ExpertTensor& w2, const LayerBackwardOptions& options = {});

// ---------------------------------------------------------------------------
// Attention

struct AttentionShape {
  std::size_t d_head = 0;
  /// Tokens per batch element; rows are batch-major, time-minor.
  std::size_t seq_len = 0;
  bool causal = true;
};

/// Multi-head scaled dot-product attention where query row i belongs to token
/// slot_token[i]. Query head j attends over key/value head j of the same batch
/// element (keys up to the query's time step when causal).
Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, std::span<const std::size_t> slot_token,
                 const AttentionShape& shape, const TileConfig& tile = {});

struct AttentionGradients {
  Matrix dq;
  Matrix dk;
  Matrix dv;
};

AttentionGradients attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                      std::span<const std::size_t> slot_token, const AttentionShape& shape,
                                      const Matrix& d_out, const TileConfig& tile = {});

// ---------------------------------------------------------------------------
// Mixture of Multi-head Attention

struct MomhaConfig {
  std::size_t d_model = 0;
  std::size_t d_head = 0;
  /// Active query heads per token: k * heads_per_expert.
  std::size_t heads = 0;
  std::size_t heads_per_expert = 0;
  std::size_t experts = 0;
  std::size_t k = 0;
  std::size_t seq_len = 0;
  bool causal = true;

  /// Width of every projection: heads_per_expert * d_head.
  std::size_t d_attn() const noexcept { return heads_per_expert * d_head; }
  void validate() const;
};

struct MomhaWeights {
  WeightMatrix w_k;  // d_model x d_attn
  WeightMatrix w_v;  // d_model x d_attn
  ExpertTensor w_q;  // E x d_model x d_attn
  ExpertTensor w_o;  // E x d_attn x d_model

  void validate(const MomhaConfig& config) const;
};

struct MomhaContext {
  parallel_linear::LinearContext query;
  parallel_linear::LinearContext output;
  Matrix q;
  Matrix k;
  Matrix v;
  std::vector<std::size_t> slot_token;
  AttentionShape shape;
};

struct MomhaResult {
  Matrix o;
  std::optional<MomhaContext> ctx;
};

struct MomhaGradients {
  Matrix dx;
  WeightMatrix dw_k;
  WeightMatrix dw_v;
  ExpertTensor dw_q;
  ExpertTensor dw_o;
  Matrix dp;
};

/// X is (B * seq_len) x d_model, batch-time contiguous. Positional embeddings
/// would be applied to the scattered Q and K here; none are.
MomhaResult momha_forward(const MomhaConfig& config, const Matrix& x, const MomhaWeights& weights,
                          const RoutingResult& routing, const GroupedOrder& order, const LayerOptions& options = {});

MomhaGradients momha_backward(MomhaContext& ctx, const Matrix& d_o, const MomhaWeights& weights,
                              const LayerBackwardOptions& options = {});

}  // namespace scattermoe
