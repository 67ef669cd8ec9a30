// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "scattermoe/moe_layers.hpp"

namespace scattermoe {

Activation parse_activation(std::string_view name) {
  if (name == "gelu") return Activation::kGelu;
  if (name == "silu") return Activation::kSilu;
  if (name == "relu") return Activation::kRelu;
  if (name == "identity") return Activation::kIdentity;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

const char* activation_name(Activation act) {
  switch (act) {
    case Activation::kGelu: return "gelu";
    case Activation::kSilu: return "silu";
    case Activation::kRelu: return "relu";
    case Activation::kIdentity: return "identity";
  }
  return "unknown";
}

double activate(Activation act, double x) {
  switch (act) {
    case Activation::kGelu: return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    case Activation::kSilu: return x / (1.0 + std::exp(-x));
    case Activation::kRelu: return x > 0.0 ? x : 0.0;
    case Activation::kIdentity: return x;
  }
  return x;
}

double activate_derivative(Activation act, double x) {
  switch (act) {
    case Activation::kGelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      return cdf + x * pdf;
    }
    case Activation::kSilu: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 + x * (1.0 - s));
    }
    case Activation::kRelu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::kIdentity: return 1.0;
  }
  return 1.0;
}

void activate_inplace(Activation act, std::span<float> values) {
  if (act == Activation::kIdentity) return;
  for (auto& v : values) v = static_cast<float>(activate(act, v));
}

void SmoeMlpConfig::validate() const {
  if (d_model == 0 || d_expert == 0 || experts == 0 || k == 0) {
    throw DimensionError("SmoeMlpConfig: all dimensions must be >= 1");
  }
  if (k > experts) {
    throw DimensionError("SmoeMlpConfig: k=" + std::to_string(k) + " exceeds E=" + std::to_string(experts));
  }
}

DerivedGranularity DerivedGranularity::of(std::size_t d_ff, std::size_t d_expert) {
  if (d_expert == 0) throw std::invalid_argument("granularity: d_expert must be >= 1");
  return {d_ff, d_expert, static_cast<double>(d_ff) / static_cast<double>(d_expert)};
}

namespace {

void check_mlp_inputs(const SmoeMlpConfig& config, const Matrix& x, const ExpertTensor& w1, const ExpertTensor& w2,
                      const RoutingResult& routing, const GroupedOrder& order) {
  config.validate();
  if (w1.experts() != config.experts || w1.d_in() != config.d_model || w1.d_out() != config.d_expert) {
    throw DimensionError("smoe_mlp: W1 " + w1.shape() + " does not match config");
  }
  if (w2.experts() != config.experts || w2.d_in() != config.d_expert || w2.d_out() != config.d_model) {
    throw DimensionError("smoe_mlp: W2 " + w2.shape() + " does not match config");
  }
  if (x.cols() != config.d_model) {
    throw DimensionError("smoe_mlp: input " + x.shape() + " expected width " + std::to_string(config.d_model));
  }
  if (routing.tokens != x.rows() || routing.k != config.k || order.slots() != x.rows() * config.k) {
    throw DimensionError("smoe_mlp: routing for " + shape_string(routing.tokens, routing.k) +
                         " does not match input " + x.shape() + " with k=" + std::to_string(config.k));
  }
}

}  // namespace

SmoeMlpResult smoe_mlp_forward(const SmoeMlpConfig& config, const Matrix& x, const ExpertTensor& w1,
                               const ExpertTensor& w2, const RoutingResult& routing, const GroupedOrder& order,
                               const LayerOptions& options) {
  check_mlp_inputs(config, x, w1, w2, routing, order);
  parallel_linear::Options first_opts{options.tile, options.ledger, "mlp.hidden"};
  parallel_linear::Options second_opts{options.tile, options.ledger, "mlp.output"};
  const LayoutFlag scattered_to_grouped{false, true};
  const LayoutFlag grouped_to_scattered{true, false};

  SmoeMlpResult result;
  if (options.mode == Mode::kInference) {
    Matrix hidden = parallel_linear::infer(x, w1, order, nullptr, config.k, scattered_to_grouped, first_opts);
    const auto hidden_id = options.ledger ? options.ledger->entries().size() - 1 : 0;
    activate_inplace(config.activation, hidden.data());
    result.y = parallel_linear::infer(hidden, w2, order, &routing.p, 1, grouped_to_scattered, second_opts);
    ledger_release(options.ledger, hidden_id);
    return result;
  }

  auto first = parallel_linear::forward(x, w1, order, nullptr, config.k, scattered_to_grouped, first_opts);
  SmoeMlpContext ctx;
  ctx.activation = config.activation;
  ctx.hidden_pre = first.y;
  ledger_allocate(options.ledger, "mlp.hidden_pre_activation", ctx.hidden_pre.rows(), ctx.hidden_pre.cols(),
                  Phase::kBackward);
  activate_inplace(config.activation, first.y.data());
  auto second = parallel_linear::forward(std::move(first.y), w2, order, &routing.p, 1, grouped_to_scattered,
                                         second_opts);
  ctx.first = std::move(first.ctx);
  ctx.second = std::move(second.ctx);
  result.y = std::move(second.y);
  result.ctx = std::move(ctx);
  return result;
}

SmoeMlpGradients smoe_mlp_backward(SmoeMlpContext& ctx, const Matrix& dy, const ExpertTensor& w1,
                                   const ExpertTensor& w2, const LayerBackwardOptions& options) {
  parallel_linear::BackwardOptions second_opts{options.tile, options.ledger, "mlp.output", options.reuse};
  parallel_linear::BackwardOptions first_opts{options.tile, options.ledger, "mlp.hidden", options.reuse};

  auto g2 = parallel_linear::backward(ctx.second, dy, w2, second_opts);
  // Chain through the activation on the grouped hidden gradient, in place.
  Matrix& dh = g2.dx;
  if (ctx.activation != Activation::kIdentity) {
    auto grad = dh.data();
    const auto pre = ctx.hidden_pre.data();
    for (std::size_t i = 0; i < grad.size(); ++i) {
      grad[i] = static_cast<float>(grad[i] * activate_derivative(ctx.activation, pre[i]));
    }
  }
  auto g1 = parallel_linear::backward(ctx.first, dh, w1, first_opts);

  SmoeMlpGradients grads;
  grads.dx = std::move(g1.dx);
  grads.dw1 = std::move(g1.dw);
  grads.dw2 = std::move(g2.dw);
  grads.dp = std::move(*g2.dp);
  return grads;
}

}  // namespace scattermoe
