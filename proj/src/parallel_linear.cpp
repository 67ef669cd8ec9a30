// SPDX-License-Identifier: Apache-2.0

#include "scattermoe/parallel_linear.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace scattermoe::parallel_linear {
namespace {

void check_forward(const Matrix& x, const ExpertTensor& w, const GroupedOrder& order, const Matrix* p,
                   LayoutFlag layout) {
  if (x.cols() != w.d_in()) {
    throw DimensionError("ParallelLinear: input " + x.shape() + " incompatible with weights " + w.shape());
  }
  if (p != nullptr) {
    if (p->rows() * p->cols() != order.slots() || p->empty()) {
      throw std::invalid_argument("ParallelLinear: routing weights " + p->shape() + " must satisfy S*j = " +
                                  std::to_string(order.slots()));
    }
    if (layout.grouped_out) {
      throw std::invalid_argument("ParallelLinear: a weighted sum needs scattered output");
    }
  }
}

// Y_s = sum_i p(s, i) * y_hat[s * j + i], accumulated in double.
Matrix weighted_sum(const Matrix& y_hat, const Matrix& p) {
  const std::size_t j = p.cols();
  Matrix y(p.rows(), y_hat.cols());
  std::vector<double> acc(y_hat.cols());
  for (std::size_t s = 0; s < p.rows(); ++s) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t i = 0; i < j; ++i) {
      const double weight = p(s, i);
      const auto src = y_hat.row(s * j + i);
      for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += weight * src[c];
    }
    auto dst = y.row(s);
    for (std::size_t c = 0; c < acc.size(); ++c) dst[c] = static_cast<float>(acc[c]);
  }
  return y;
}

// Takes the scratch slot if it has the wanted shape.
Matrix take_scratch(std::optional<Matrix>& slot, std::size_t rows, std::size_t cols) {
  if (!slot) return {};
  if (slot->rows() != rows || slot->cols() != cols) {
    throw DimensionError("ParallelLinear: scratch slot " + slot->shape() + " expected " + shape_string(rows, cols));
  }
  Matrix out = std::move(*slot);
  slot.reset();
  return out;
}

}  // namespace

ForwardResult forward(Matrix x, const ExpertTensor& w, const GroupedOrder& order, const Matrix* p,
                      std::size_t fan_out, LayoutFlag layout, const Options& options) {
  check_forward(x, w, order, p, layout);
  ForwardResult result;
  Matrix y_hat = scatter2scatter(x, w, order, layout.grouped_in ? 1 : fan_out, layout, options.tile);
  if (p != nullptr) {
    // Kept only for the gradient of p.
    ledger_allocate(options.ledger, options.name + ".y_hat", y_hat.rows(), y_hat.cols(), Phase::kBackward);
    result.y = weighted_sum(y_hat, *p);
    result.ctx.y_hat = std::move(y_hat);
    result.ctx.p = *p;
  } else {
    result.y = std::move(y_hat);
  }
  ledger_allocate(options.ledger, options.name + ".y", result.y.rows(), result.y.cols(), Phase::kForward);
  result.ctx.x = std::move(x);
  result.ctx.x_was_grouped = layout.grouped_in;
  result.ctx.fan_out = layout.grouped_in ? 1 : fan_out;
  result.ctx.layout = layout;
  result.ctx.order = order;
  return result;
}

Matrix infer(const Matrix& x, const ExpertTensor& w, const GroupedOrder& order, const Matrix* p,
             std::size_t fan_out, LayoutFlag layout, const Options& options) {
  check_forward(x, w, order, p, layout);
  const std::size_t effective_fan_out = layout.grouped_in ? 1 : fan_out;
  Matrix y = p != nullptr
                 ? scatter2scatter_combine(x, w, order, effective_fan_out, layout.grouped_in, *p, options.tile)
                 : scatter2scatter(x, w, order, effective_fan_out, layout, options.tile);
  ledger_allocate(options.ledger, options.name + ".y", y.rows(), y.cols(), Phase::kForward);
  return y;
}

LinearGradients backward(LinearContext& ctx, const Matrix& dy, const ExpertTensor& w,
                         const BackwardOptions& options) {
  if (ctx.consumed) throw UsageError("ParallelLinear: backward already ran on this context");
  const std::size_t slots = ctx.slots();
  const std::size_t expected_rows = ctx.p ? ctx.p->rows() : slots;
  if (dy.rows() != expected_rows || dy.cols() != w.d_out()) {
    throw DimensionError("ParallelLinear backward: gradient " + dy.shape() + " expected " +
                         shape_string(expected_rows, w.d_out()));
  }
  if (ctx.x.cols() != w.d_in()) {
    throw DimensionError("ParallelLinear backward: saved input " + ctx.x.shape() + " incompatible with weights " +
                         w.shape());
  }
  ctx.consumed = true;
  const bool reuse = options.reuse == BufferReuse::kReuse;
  AllocationLedger* ledger = options.ledger;
  // Records a buffer only when the recycled target cannot hold it.
  auto fresh_unless = [&](const Matrix& target, const char* what, std::size_t rows, std::size_t cols) {
    if (target.rows() != rows || target.cols() != cols) {
      ledger_allocate(ledger, options.name + "." + what, rows, cols, Phase::kBackward);
    }
  };

  LinearGradients grads;

  // Gradient of the routing weights must be taken before y_hat's storage is
  // recycled for the grouped gradient.
  Matrix grouped_dy_storage;
  const Matrix* grouped_dy = &dy;
  if (ctx.p) {
    const Matrix& p = *ctx.p;
    const std::size_t j = p.cols();
    Matrix dp(p.rows(), j);
    for (std::size_t s = 0; s < p.rows(); ++s) {
      const auto g = dy.row(s);
      for (std::size_t i = 0; i < j; ++i) {
        const auto yh = ctx.y_hat.row(s * j + i);
        double acc = 0.0;
        for (std::size_t c = 0; c < g.size(); ++c) acc += static_cast<double>(g[c]) * yh[c];
        dp(s, i) = static_cast<float>(acc);
      }
    }
    grads.dp = std::move(dp);
    Matrix target = reuse ? std::move(ctx.y_hat) : Matrix{};
    ctx.y_hat = Matrix{};
    fresh_unless(target, "grouped_dy", slots, dy.cols());
    grouped_dy_storage = group(dy, ctx.order, p.data(), j, std::move(target));
    grouped_dy = &grouped_dy_storage;
  } else if (!ctx.layout.grouped_out) {
    Matrix target = reuse ? take_scratch(ctx.scratch_grouped_dy, slots, dy.cols()) : Matrix{};
    fresh_unless(target, "grouped_dy", slots, dy.cols());
    grouped_dy_storage = group(dy, ctx.order, {}, 1, std::move(target));
    grouped_dy = &grouped_dy_storage;
  }

  Matrix grouped_x_storage;
  const Matrix* grouped_x = &ctx.x;
  if (!ctx.x_was_grouped) {
    Matrix target = reuse ? take_scratch(ctx.scratch_grouped_x, slots, ctx.x.cols()) : Matrix{};
    fresh_unless(target, "grouped_x", slots, ctx.x.cols());
    grouped_x_storage = group(ctx.x, ctx.order, {}, ctx.fan_out, std::move(target));
    grouped_x = &grouped_x_storage;
  }

  grads.dw = group_xty(*grouped_x, *grouped_dy, ctx.order, options.tile);
  ledger_allocate(ledger, options.name + ".dw", w.experts() * w.d_in(), w.d_out(), Phase::kBackward);

  // The grouped input is dead once dW exists, so it can hold dX.
  Matrix dx_target;
  if (reuse) {
    dx_target = ctx.x_was_grouped ? take_scratch(ctx.scratch_grouped_x, slots, ctx.x.cols())
                                  : std::move(grouped_x_storage);
  }
  fresh_unless(dx_target, "grouped_dx", slots, ctx.x.cols());
  Matrix slot_dx = scatter2scatter(*grouped_dy, w, ctx.order, 1, LayoutFlag{true, ctx.x_was_grouped}, options.tile,
                                   WeightView::kTransposed, std::move(dx_target));

  if (!ctx.x_was_grouped && ctx.fan_out > 1) {
    // Sum the fan_out slot gradients of each token.
    const std::size_t k = ctx.fan_out;
    Matrix dx(ctx.x.rows(), ctx.x.cols());
    ledger_allocate(ledger, options.name + ".dx", dx.rows(), dx.cols(), Phase::kBackward);
    std::vector<double> acc(dx.cols());
    for (std::size_t t = 0; t < dx.rows(); ++t) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j = 0; j < k; ++j) {
        const auto src = slot_dx.row(t * k + j);
        for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += src[c];
      }
      auto dst = dx.row(t);
      for (std::size_t c = 0; c < acc.size(); ++c) dst[c] = static_cast<float>(acc[c]);
    }
    grads.dx = std::move(dx);
  } else {
    grads.dx = std::move(slot_dx);
  }
  return grads;
}

}  // namespace scattermoe::parallel_linear
