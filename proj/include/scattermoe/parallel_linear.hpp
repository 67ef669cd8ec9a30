// SPDX-License-Identifier: Apache-2.0
//
// ParallelLinear: a differentiable expert-routed linear transform built on
// scatter2scatter. The forward never stores a grouped copy of its input; the
// backward groups what it needs and recycles the saved output buffer and the
// caller's scratch slots.

#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "scattermoe/kernels.hpp"
#include "scattermoe/ledger.hpp"
#include "scattermoe/router.hpp"
#include "scattermoe/tensor.hpp"

namespace scattermoe::parallel_linear {

/// Arrays saved by `forward` for a single `backward`.
struct LinearContext {
  Matrix x;
  bool x_was_grouped = false;
  std::size_t fan_out = 1;
  LayoutFlag layout;
  /// Per-slot outputs before the weighted sum, in scattered order. Only kept
  /// when routing weights were given, since the weight gradient needs them.
  Matrix y_hat;
  GroupedOrder order;
  std::optional<Matrix> p;

  /// Caller-provided buffers of shape slots x d_out and slots x d_in. When
  /// present the backward writes its grouped arrays into them.
  std::optional<Matrix> scratch_grouped_dy;
  std::optional<Matrix> scratch_grouped_x;

  bool consumed = false;

  std::size_t slots() const noexcept { return order.slots(); }
};

struct LinearGradients {
  Matrix dx;
  ExpertTensor dw;
  std::optional<Matrix> dp;
};

struct ForwardResult {
  Matrix y;
  LinearContext ctx;
};

struct Options {
  TileConfig tile;
  AllocationLedger* ledger = nullptr;
  /// Prefix for ledger entries.
  std::string name = "linear";
};

enum class BufferReuse { kNone, kReuse };

struct BackwardOptions {
  TileConfig tile;
  AllocationLedger* ledger = nullptr;
  std::string name = "linear";
  BufferReuse reuse = BufferReuse::kReuse;
};

/// Y = scatter2scatter(X, W, o, fan_out) and, when p (S x j, S*j = slots) is
/// given, the weighted sum Y_s = sum_i p(s, i) * Yhat[s*j + i]. Weighted output
/// requires a scattered output layout.
ForwardResult forward(Matrix x, const ExpertTensor& w, const GroupedOrder& order, const Matrix* p,
                      std::size_t fan_out, LayoutFlag layout, const Options& options = {});

/// Same result as `forward` without saving anything; with p the weighted sum
/// is fused into the kernel so no slots x d_out buffer exists.
Matrix infer(const Matrix& x, const ExpertTensor& w, const GroupedOrder& order, const Matrix* p,
             std::size_t fan_out, LayoutFlag layout, const Options& options = {});

/// Gradients of X, W and p. dy has the shape of the forward output. dX comes
/// back in the layout the forward input had. A context supports one call.
LinearGradients backward(LinearContext& ctx, const Matrix& dy, const ExpertTensor& w,
                         const BackwardOptions& options = {});

}  // namespace scattermoe::parallel_linear
