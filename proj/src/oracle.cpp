// SPDX-License-Identifier: Apache-2.0

#include "scattermoe/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "scattermoe/mac_counter.hpp"

namespace scattermoe::oracle {

RefMatrix RefMatrix::from(const Matrix& m) {
  RefMatrix r(m.rows(), m.cols());
  std::copy(m.data().begin(), m.data().end(), r.data.begin());
  return r;
}

RefMatrix RefMatrix::from(const WeightMatrix& w) {
  RefMatrix r(w.d_in(), w.d_out());
  std::copy(w.data().begin(), w.data().end(), r.data.begin());
  return r;
}

Matrix RefMatrix::to_float() const {
  std::vector<float> out(data.begin(), data.end());
  return Matrix(rows, cols, std::move(out));
}

RefExperts RefExperts::from(const ExpertTensor& w) {
  return {w.experts(), w.d_in(), w.d_out(), std::vector<double>(w.data().begin(), w.data().end())};
}

RefMomhaWeights RefMomhaWeights::from(const MomhaWeights& w) {
  return {RefMatrix::from(w.w_k), RefMatrix::from(w.w_v), RefExperts::from(w.w_q), RefExperts::from(w.w_o)};
}

RefMatrix naive_smoe_mlp(const RefMatrix& x, const RefExperts& w1, const RefExperts& w2,
                         std::span<const std::uint32_t> expert_idx, const RefMatrix& p, std::size_t k,
                         Activation activation) {
  if (x.cols != w1.d_in || w1.d_out != w2.d_in || w2.d_out != x.cols || w1.experts != w2.experts) {
    throw DimensionError("naive_smoe_mlp: inconsistent shapes");
  }
  if (expert_idx.size() != x.rows * k || p.rows != x.rows || p.cols != k) {
    throw DimensionError("naive_smoe_mlp: routing does not match " + shape_string(x.rows, k));
  }
  RefMatrix y(x.rows, w2.d_out);
  std::vector<double> h(w1.d_out);
  for (std::size_t t = 0; t < x.rows; ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t e = expert_idx[t * k + j];
      for (std::size_t c = 0; c < w1.d_out; ++c) {
        double s = 0.0;
        for (std::size_t m = 0; m < w1.d_in; ++m) s += x(t, m) * w1(e, m, c);
        h[c] = activate(activation, s);
      }
      for (std::size_t o = 0; o < w2.d_out; ++o) {
        double s = 0.0;
        for (std::size_t c = 0; c < w2.d_in; ++c) s += h[c] * w2(e, c, o);
        y(t, o) += p(t, j) * s;
      }
    }
  }
  return y;
}

RefMatrix naive_smoe_mlp(const Matrix& x, const ExpertTensor& w1, const ExpertTensor& w2,
                         const RoutingResult& routing, Activation activation) {
  return naive_smoe_mlp(RefMatrix::from(x), RefExperts::from(w1), RefExperts::from(w2), routing.expert_idx,
                        RefMatrix::from(routing.p), routing.k, activation);
}

RefMatrix dense_attention(const RefMatrix& q, const RefMatrix& k, const RefMatrix& v,
                          std::span<const std::size_t> slot_token, std::size_t d_head, std::size_t seq_len,
                          bool causal) {
  if (q.cols != k.cols || k.cols != v.cols || q.cols % d_head != 0 || slot_token.size() != q.rows) {
    throw DimensionError("dense_attention: inconsistent shapes");
  }
  // mask(i, m) = 1 when query row i may attend to key m.
  RefMatrix mask(q.rows, k.rows);
  for (std::size_t i = 0; i < q.rows; ++i) {
    const std::size_t t = slot_token[i];
    for (std::size_t m = 0; m < k.rows; ++m) {
      const bool same_sequence = m / seq_len == t / seq_len;
      mask(i, m) = same_sequence && (!causal || m <= t) ? 1.0 : 0.0;
    }
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
  RefMatrix out(q.rows, q.cols);
  std::vector<double> scores(k.rows);
  for (std::size_t head = 0; head < q.cols / d_head; ++head) {
    const std::size_t c0 = head * d_head;
    for (std::size_t i = 0; i < q.rows; ++i) {
      double best = -INFINITY;
      for (std::size_t m = 0; m < k.rows; ++m) {
        double s = 0.0;
        for (std::size_t d = 0; d < d_head; ++d) s += q(i, c0 + d) * k(m, c0 + d);
        scores[m] = mask(i, m) > 0.0 ? s * scale : -INFINITY;
        best = std::max(best, scores[m]);
      }
      double sum = 0.0;
      for (auto& s : scores) {
        s = std::isinf(s) ? 0.0 : std::exp(s - best);
        sum += s;
      }
      for (std::size_t m = 0; m < k.rows; ++m) {
        const double a = scores[m] / sum;
        for (std::size_t d = 0; d < d_head; ++d) out(i, c0 + d) += a * v(m, c0 + d);
      }
    }
  }
  return out;
}

namespace {

RefMatrix ref_matmul(const RefMatrix& a, const RefMatrix& b) {
  RefMatrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t m = 0; m < a.cols; ++m) {
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += a(i, m) * b(m, j);
    }
  }
  return out;
}

}  // namespace

RefMatrix naive_momha(const RefMatrix& x, const RefMomhaWeights& w, std::span<const std::uint32_t> expert_idx,
                      const RefMatrix& p, const MomhaConfig& config) {
  const std::size_t k = config.k;
  const std::size_t d_attn = config.d_attn();
  if (expert_idx.size() != x.rows * k || p.rows != x.rows || p.cols != k) {
    throw DimensionError("naive_momha: routing does not match " + shape_string(x.rows, k));
  }
  const RefMatrix keys = ref_matmul(x, w.w_k);
  const RefMatrix values = ref_matmul(x, w.w_v);
  RefMatrix y(x.rows, config.d_model);
  RefMatrix query(1, d_attn);
  for (std::size_t t = 0; t < x.rows; ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t e = expert_idx[t * k + j];
      for (std::size_t c = 0; c < d_attn; ++c) {
        double s = 0.0;
        for (std::size_t m = 0; m < config.d_model; ++m) s += x(t, m) * w.w_q(e, m, c);
        query(0, c) = s;
      }
      const std::size_t token[] = {t};
      const RefMatrix mixed = dense_attention(query, keys, values, token, config.d_head, config.seq_len, config.causal);
      for (std::size_t o = 0; o < config.d_model; ++o) {
        double s = 0.0;
        for (std::size_t c = 0; c < d_attn; ++c) s += mixed(0, c) * w.w_o(e, c, o);
        y(t, o) += p(t, j) * s;
      }
    }
  }
  return y;
}

RefMatrix dense_mha_reference(const RefMatrix& x, const RefMatrix& w_q, const RefMatrix& w_k, const RefMatrix& w_v,
                              const RefMatrix& w_o, std::size_t d_head, std::size_t seq_len, bool causal) {
  const RefMatrix q = ref_matmul(x, w_q);
  const RefMatrix k = ref_matmul(x, w_k);
  const RefMatrix v = ref_matmul(x, w_v);
  std::vector<std::size_t> tokens(x.rows);
  for (std::size_t t = 0; t < x.rows; ++t) tokens[t] = t;
  return ref_matmul(dense_attention(q, k, v, tokens, d_head, seq_len, causal), w_o);
}

std::vector<double> finite_difference_gradient(const std::function<double(std::span<const double>)>& f,
                                               std::span<const double> theta, double eps) {
  std::vector<double> point(theta.begin(), theta.end());
  std::vector<double> grad(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + eps;
    const double up = f(point);
    point[i] = saved - eps;
    const double down = f(point);
    point[i] = saved;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

Matrix dense_mlp_reference(const Matrix& x, const WeightMatrix& w, const WeightMatrix& w_out, Activation activation) {
  Matrix hidden = matmul(x, w);
  activate_inplace(activation, hidden.data());
  return matmul(hidden, w_out);
}

std::size_t padded_rows(std::span<const std::size_t> bin_counts, std::size_t block_size) {
  if (block_size == 0) throw std::invalid_argument("padded_rows: block_size must be >= 1");
  std::size_t rows = 0;
  for (const auto c : bin_counts) rows += (c + block_size - 1) / block_size * block_size;
  return rows;
}

namespace {

// Per-expert GEMM over padded bins, padding rows included. row_of(r) gives
// the input row for padded row r, or nullptr for a padding row (zeros).
template <typename RowOf>
Matrix padded_expert_gemm(std::size_t rows, RowOf row_of, const ExpertTensor& w,
                          std::span<const std::size_t> pad_offsets) {
  Matrix out(rows, w.d_out());
  std::vector<double> acc(w.d_out());
  for (std::size_t e = 0; e < w.experts(); ++e) {
    const auto we = w.expert(e);
    for (std::size_t r = pad_offsets[e]; r < pad_offsets[e + 1]; ++r) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const float* x = row_of(r);
      for (std::size_t m = 0; m < w.d_in(); ++m) {
        const double xm = x != nullptr ? x[m] : 0.0;
        for (std::size_t c = 0; c < w.d_out(); ++c) acc[c] += xm * we[m * w.d_out() + c];
      }
      auto dst = out.row(r);
      for (std::size_t c = 0; c < w.d_out(); ++c) dst[c] = static_cast<float>(acc[c]);
    }
  }
  mac_counter::add(static_cast<std::uint64_t>(rows) * w.d_in() * w.d_out());
  return out;
}

}  // namespace

Matrix baseline_grouped_pipeline(const Matrix& x, const ExpertTensor& w1, const ExpertTensor& w2,
                                 const RoutingResult& routing, const GroupedOrder& order, Activation activation,
                                 const BaselineConfig& config, AllocationLedger* ledger) {
  if (config.block_size == 0) throw std::invalid_argument("BaselineConfig: block_size must be >= 1");
  if (x.cols() != w1.d_in() || w1.d_out() != w2.d_in() || w2.d_out() != x.cols() ||
      order.slots() != x.rows() * routing.k || order.experts() != w1.experts()) {
    throw DimensionError("baseline_grouped_pipeline: inconsistent shapes for input " + x.shape());
  }
  const std::size_t k = routing.k;
  const std::size_t experts = order.experts();
  std::vector<std::size_t> pad_offsets(experts + 1, 0);
  for (std::size_t e = 0; e < experts; ++e) {
    pad_offsets[e + 1] = pad_offsets[e] + (order.bin_counts[e] + config.block_size - 1) / config.block_size *
                                              config.block_size;
  }
  const std::size_t rows = pad_offsets[experts];
  // Padded row holding grouped position i.
  auto padded_row = [&](std::size_t e, std::size_t i) { return pad_offsets[e] + (i - order.bin_offsets[e]); };

  // Source token row for each padded row; padding rows have none.
  constexpr std::size_t kPadding = static_cast<std::size_t>(-1);
  std::vector<std::size_t> source(rows, kPadding);
  for (std::size_t e = 0; e < experts; ++e) {
    for (std::size_t i = order.bin_offsets[e]; i < order.bin_offsets[e + 1]; ++i) {
      source[padded_row(e, i)] = order.o[i] / k;
    }
  }

  Matrix hidden;
  AllocationLedger::Id hidden_id = 0;
  if (config.make_grouped_copies) {
    Matrix grouped_in(rows, x.cols());
    for (std::size_t r = 0; r < rows; ++r) {
      if (source[r] == kPadding) continue;
      const auto src = x.row(source[r]);
      std::copy(src.begin(), src.end(), grouped_in.row(r).begin());
    }
    const auto in_id = ledger_allocate(ledger, "baseline.grouped_input", rows, x.cols(), Phase::kForward);
    hidden = padded_expert_gemm(rows, [&](std::size_t r) { return grouped_in.row(r).data(); }, w1, pad_offsets);
    hidden_id = ledger_allocate(ledger, "baseline.grouped_hidden", rows, w1.d_out(), Phase::kForward);
    ledger_release(ledger, in_id);
  } else {
    hidden = padded_expert_gemm(
        rows, [&](std::size_t r) { return source[r] == kPadding ? nullptr : x.row(source[r]).data(); }, w1,
        pad_offsets);
    hidden_id = ledger_allocate(ledger, "baseline.grouped_hidden", rows, w1.d_out(), Phase::kForward);
  }

  Matrix activated = hidden;
  activate_inplace(activation, activated.data());
  const auto act_id = ledger_allocate(ledger, "baseline.grouped_activation", rows, w1.d_out(), Phase::kForward);
  ledger_release(ledger, hidden_id);

  Matrix grouped_out =
      padded_expert_gemm(rows, [&](std::size_t r) { return activated.row(r).data(); }, w2, pad_offsets);
  const auto out_id = ledger_allocate(ledger, "baseline.grouped_output", rows, w2.d_out(), Phase::kForward);
  ledger_release(ledger, act_id);

  Matrix slot_out(order.slots(), w2.d_out());
  for (std::size_t e = 0; e < experts; ++e) {
    for (std::size_t i = order.bin_offsets[e]; i < order.bin_offsets[e + 1]; ++i) {
      const auto src = grouped_out.row(padded_row(e, i));
      std::copy(src.begin(), src.end(), slot_out.row(order.o[i]).begin());
    }
  }
  const auto slot_id = ledger_allocate(ledger, "baseline.scattered_slots", order.slots(), w2.d_out(), Phase::kForward);
  ledger_release(ledger, out_id);

  Matrix y(x.rows(), w2.d_out());
  std::vector<double> acc(w2.d_out());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const double weight = routing.p(t, j);
      const auto src = slot_out.row(t * k + j);
      for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += weight * src[c];
    }
    auto dst = y.row(t);
    for (std::size_t c = 0; c < acc.size(); ++c) dst[c] = static_cast<float>(acc[c]);
  }
  ledger_allocate(ledger, "baseline.output", y.rows(), y.cols(), Phase::kForward);
  ledger_release(ledger, slot_id);
  return y;
}

AllocationLedger fused_pipeline_ledger(const FusedLedgerConfig& config) {
  const SmoeMlpConfig mlp{config.d_model, config.d_expert, config.experts, config.k, Activation::kGelu};
  mlp.validate();
  const Matrix x = seeded_random_matrix(config.tokens, config.d_model, config.seed);
  const ExpertTensor w1 = seeded_random_experts(config.experts, config.d_model, config.d_expert, config.seed + 1);
  const ExpertTensor w2 = seeded_random_experts(config.experts, config.d_expert, config.d_model, config.seed + 2);
  const Matrix logits = seeded_random_matrix(config.tokens, config.experts, config.seed + 3);
  const RoutingResult routing = topk_select(softmax_rows(logits), config.k);
  const GroupedOrder order = compute_grouped_order(routing, config.experts);

  AllocationLedger ledger;
  LayerOptions options;
  options.ledger = &ledger;
  options.mode = config.include_backward ? Mode::kTrain : Mode::kInference;
  auto result = smoe_mlp_forward(mlp, x, w1, w2, routing, order, options);
  if (config.include_backward) {
    const Matrix dy = seeded_random_matrix(config.tokens, config.d_model, config.seed + 4);
    LayerBackwardOptions bopts;
    bopts.ledger = &ledger;
    smoe_mlp_backward(*result.ctx, dy, w1, w2, bopts);
  }
  return ledger;
}

}  // namespace scattermoe::oracle
