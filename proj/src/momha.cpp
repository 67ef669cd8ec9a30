// SPDX-License-Identifier: Apache-2.0

#include <stdexcept>
#include <string>

#include "scattermoe/moe_layers.hpp"

namespace scattermoe {

void MomhaConfig::validate() const {
  if (d_model == 0 || d_head == 0 || heads_per_expert == 0 || experts == 0 || k == 0 || seq_len == 0) {
    throw DimensionError("MomhaConfig: all dimensions must be >= 1");
  }
  if (k > experts) {
    throw DimensionError("MomhaConfig: k=" + std::to_string(k) + " exceeds E=" + std::to_string(experts));
  }
  if (heads != k * heads_per_expert) {
    throw DimensionError("MomhaConfig: h=" + std::to_string(heads) + " must equal k*h_expert=" +
                         std::to_string(k * heads_per_expert));
  }
}

void MomhaWeights::validate(const MomhaConfig& config) const {
  const std::size_t d_attn = config.d_attn();
  auto check_dense = [&](const WeightMatrix& w, const char* name) {
    if (w.d_in() != config.d_model || w.d_out() != d_attn) {
      throw DimensionError(std::string("MoMHA: ") + name + " " + w.shape() + " expected " +
                           shape_string(config.d_model, d_attn));
    }
  };
  check_dense(w_k, "W_K");
  check_dense(w_v, "W_V");
  if (w_q.experts() != config.experts || w_q.d_in() != config.d_model || w_q.d_out() != d_attn) {
    throw DimensionError("MoMHA: W_Q " + w_q.shape() + " does not match config");
  }
  if (w_o.experts() != config.experts || w_o.d_in() != d_attn || w_o.d_out() != config.d_model) {
    throw DimensionError("MoMHA: W_O " + w_o.shape() + " does not match config");
  }
}

MomhaResult momha_forward(const MomhaConfig& config, const Matrix& x, const MomhaWeights& weights,
                          const RoutingResult& routing, const GroupedOrder& order, const LayerOptions& options) {
  config.validate();
  weights.validate(config);
  if (x.cols() != config.d_model) {
    throw DimensionError("MoMHA: input " + x.shape() + " expected width " + std::to_string(config.d_model));
  }
  if (x.rows() % config.seq_len != 0) {
    throw std::invalid_argument("MoMHA: " + std::to_string(x.rows()) + " rows do not split into sequences of " +
                                std::to_string(config.seq_len));
  }
  if (routing.tokens != x.rows() || routing.k != config.k || order.slots() != x.rows() * config.k) {
    throw DimensionError("MoMHA: routing for " + shape_string(routing.tokens, routing.k) +
                         " does not match input " + x.shape());
  }

  const LayoutFlag scattered{false, false};
  parallel_linear::Options q_opts{options.tile, options.ledger, "attn.query"};
  parallel_linear::Options o_opts{options.tile, options.ledger, "attn.output"};
  AllocationLedger* ledger = options.ledger;

  Matrix keys = matmul(x, weights.w_k);
  ledger_allocate(ledger, "attn.k", keys.rows(), keys.cols(), Phase::kForward);
  Matrix values = matmul(x, weights.w_v);
  ledger_allocate(ledger, "attn.v", values.rows(), values.cols(), Phase::kForward);

  // Scattered slot s = t * k + j keeps token t's chronological position.
  std::vector<std::size_t> slot_token(order.slots());
  for (std::size_t s = 0; s < slot_token.size(); ++s) slot_token[s] = s / config.k;
  const AttentionShape shape{config.d_head, config.seq_len, config.causal};

  MomhaResult result;
  if (options.mode == Mode::kInference) {
    Matrix q = parallel_linear::infer(x, weights.w_q, order, nullptr, config.k, scattered, q_opts);
    Matrix mixed = attention(q, keys, values, slot_token, shape, options.tile);
    ledger_allocate(ledger, "attn.mixed", mixed.rows(), mixed.cols(), Phase::kForward);
    result.o = parallel_linear::infer(mixed, weights.w_o, order, &routing.p, 1, scattered, o_opts);
    return result;
  }

  auto query = parallel_linear::forward(x, weights.w_q, order, nullptr, config.k, scattered, q_opts);
  Matrix mixed = attention(query.y, keys, values, slot_token, shape, options.tile);
  ledger_allocate(ledger, "attn.mixed", mixed.rows(), mixed.cols(), Phase::kForward);
  auto output = parallel_linear::forward(std::move(mixed), weights.w_o, order, &routing.p, 1, scattered, o_opts);

  MomhaContext ctx;
  ctx.query = std::move(query.ctx);
  ctx.output = std::move(output.ctx);
  ctx.q = std::move(query.y);
  ctx.k = std::move(keys);
  ctx.v = std::move(values);
  ctx.slot_token = std::move(slot_token);
  ctx.shape = shape;
  result.o = std::move(output.y);
  result.ctx = std::move(ctx);
  return result;
}

MomhaGradients momha_backward(MomhaContext& ctx, const Matrix& d_o, const MomhaWeights& weights,
                              const LayerBackwardOptions& options) {
  parallel_linear::BackwardOptions o_opts{options.tile, options.ledger, "attn.output", options.reuse};
  parallel_linear::BackwardOptions q_opts{options.tile, options.ledger, "attn.query", options.reuse};

  auto g_out = parallel_linear::backward(ctx.output, d_o, weights.w_o, o_opts);
  auto g_attn = attention_backward(ctx.q, ctx.k, ctx.v, ctx.slot_token, ctx.shape, g_out.dx, options.tile);

  MomhaGradients grads;
  const Matrix& x = ctx.query.x;
  grads.dw_k = matmul_at_b(x, g_attn.dk);
  grads.dw_v = matmul_at_b(x, g_attn.dv);
  auto g_query = parallel_linear::backward(ctx.query, g_attn.dq, weights.w_q, q_opts);

  // dX collects the query, key and value paths.
  grads.dx = std::move(g_query.dx);
  add_inplace(grads.dx, matmul_transposed(g_attn.dk, weights.w_k));
  add_inplace(grads.dx, matmul_transposed(g_attn.dv, weights.w_v));
  grads.dw_q = std::move(g_query.dw);
  grads.dw_o = std::move(g_out.dw);
  grads.dp = std::move(*g_out.dp);
  return grads;
}

}  // namespace scattermoe
