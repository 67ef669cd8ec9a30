// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "parallel.hpp"
#include "scattermoe/moe_layers.hpp"

namespace scattermoe {
namespace {

struct KeyRange {
  std::size_t begin;
  std::size_t end;  // exclusive
};

void check_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::span<const std::size_t> slot_token,
                     const AttentionShape& shape) {
  if (shape.d_head == 0 || shape.seq_len == 0) {
    throw std::invalid_argument("attention: d_head and seq_len must be >= 1");
  }
  if (q.cols() != k.cols() || k.cols() != v.cols() || q.cols() % shape.d_head != 0) {
    throw DimensionError("attention: widths of Q " + q.shape() + ", K " + k.shape() + ", V " + v.shape() +
                         " must match and divide by d_head=" + std::to_string(shape.d_head));
  }
  if (k.rows() != v.rows()) throw DimensionError("attention: K " + k.shape() + " and V " + v.shape() + " differ");
  if (k.rows() % shape.seq_len != 0) {
    throw std::invalid_argument("attention: " + std::to_string(k.rows()) + " tokens do not split into sequences of " +
                                std::to_string(shape.seq_len));
  }
  if (slot_token.size() != q.rows()) {
    throw DimensionError("attention: " + std::to_string(slot_token.size()) + " slot entries for Q " + q.shape());
  }
  for (const auto t : slot_token) {
    if (t >= k.rows()) {
      throw std::invalid_argument("attention: slot maps to token " + std::to_string(t) + " outside [0, " +
                                  std::to_string(k.rows()) + ")");
    }
  }
}

KeyRange keys_for(std::size_t token, const AttentionShape& shape) {
  const std::size_t start = token - token % shape.seq_len;
  return {start, shape.causal ? token + 1 : start + shape.seq_len};
}

// Softmax weights of one (query row, head) over its key range.
void attention_weights(const float* q, const Matrix& k, std::size_t col0, std::size_t d_head, KeyRange keys,
                       double scale, std::vector<double>& weights) {
  weights.resize(keys.end - keys.begin);
  double best = -INFINITY;
  for (std::size_t m = keys.begin; m < keys.end; ++m) {
    const float* kr = k.row(m).data() + col0;
    double s = 0.0;
    for (std::size_t d = 0; d < d_head; ++d) s += static_cast<double>(q[d]) * kr[d];
    weights[m - keys.begin] = s * scale;
    best = std::max(best, s * scale);
  }
  double sum = 0.0;
  for (auto& w : weights) {
    w = std::exp(w - best);
    sum += w;
  }
  for (auto& w : weights) w /= sum;
}

}  // namespace

Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, std::span<const std::size_t> slot_token,
                 const AttentionShape& shape, const TileConfig& tile) {
  check_attention(q, k, v, slot_token, shape);
  const std::size_t heads = q.cols() / shape.d_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(shape.d_head));
  Matrix out(q.rows(), q.cols());
  const std::size_t row_blocks = (q.rows() + tile.tile_rows - 1) / tile.tile_rows;
  detail::parallel_for(heads * row_blocks, tile.worker_count, [&](std::size_t idx) {
    const std::size_t head = idx % heads;
    const std::size_t r0 = (idx / heads) * tile.tile_rows;
    const std::size_t r1 = std::min(r0 + tile.tile_rows, q.rows());
    const std::size_t col0 = head * shape.d_head;
    std::vector<double> weights;
    std::vector<double> acc(shape.d_head);
    for (std::size_t i = r0; i < r1; ++i) {
      const KeyRange keys = keys_for(slot_token[i], shape);
      attention_weights(q.row(i).data() + col0, k, col0, shape.d_head, keys, scale, weights);
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t m = keys.begin; m < keys.end; ++m) {
        const double a = weights[m - keys.begin];
        const float* vr = v.row(m).data() + col0;
        for (std::size_t d = 0; d < shape.d_head; ++d) acc[d] += a * vr[d];
      }
      float* dst = out.row(i).data() + col0;
      for (std::size_t d = 0; d < shape.d_head; ++d) dst[d] = static_cast<float>(acc[d]);
    }
  });
  return out;
}

AttentionGradients attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                      std::span<const std::size_t> slot_token, const AttentionShape& shape,
                                      const Matrix& d_out, const TileConfig& tile) {
  check_attention(q, k, v, slot_token, shape);
  if (!d_out.same_shape(q)) {
    throw DimensionError("attention_backward: output gradient " + d_out.shape() + " expected " + q.shape());
  }
  const std::size_t heads = q.cols() / shape.d_head;
  const std::size_t dh = shape.d_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionGradients grads{Matrix(q.rows(), q.cols()), Matrix(k.rows(), k.cols()), Matrix(v.rows(), v.cols())};

  // Heads touch disjoint columns of every gradient, so they run independently.
  detail::parallel_for(heads, tile.worker_count, [&](std::size_t head) {
    const std::size_t col0 = head * dh;
    std::vector<double> dk(k.rows() * dh, 0.0);
    std::vector<double> dv(v.rows() * dh, 0.0);
    std::vector<double> weights;
    std::vector<double> dscore;
    std::vector<double> dq(dh);
    for (std::size_t i = 0; i < q.rows(); ++i) {
      const KeyRange keys = keys_for(slot_token[i], shape);
      const float* qi = q.row(i).data() + col0;
      const float* go = d_out.row(i).data() + col0;
      attention_weights(qi, k, col0, dh, keys, scale, weights);
      dscore.resize(weights.size());
      double weighted = 0.0;
      for (std::size_t m = keys.begin; m < keys.end; ++m) {
        const float* vr = v.row(m).data() + col0;
        double da = 0.0;
        for (std::size_t d = 0; d < dh; ++d) da += static_cast<double>(go[d]) * vr[d];
        dscore[m - keys.begin] = da;
        weighted += weights[m - keys.begin] * da;
      }
      std::fill(dq.begin(), dq.end(), 0.0);
      for (std::size_t m = keys.begin; m < keys.end; ++m) {
        const double a = weights[m - keys.begin];
        const double ds = a * (dscore[m - keys.begin] - weighted) * scale;
        const float* kr = k.row(m).data() + col0;
        double* dkr = dk.data() + m * dh;
        double* dvr = dv.data() + m * dh;
        for (std::size_t d = 0; d < dh; ++d) {
          dq[d] += ds * kr[d];
          dkr[d] += ds * qi[d];
          dvr[d] += a * go[d];
        }
      }
      float* dqr = grads.dq.row(i).data() + col0;
      for (std::size_t d = 0; d < dh; ++d) dqr[d] = static_cast<float>(dq[d]);
    }
    for (std::size_t m = 0; m < k.rows(); ++m) {
      float* dkr = grads.dk.row(m).data() + col0;
      float* dvr = grads.dv.row(m).data() + col0;
      for (std::size_t d = 0; d < dh; ++d) {
        dkr[d] = static_cast<float>(dk[m * dh + d]);
        dvr[d] = static_cast<float>(dv[m * dh + d]);
      }
    }
  });
  return grads;
}

}  // namespace scattermoe
