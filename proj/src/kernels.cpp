// SPDX-License-Identifier: Apache-2.0

#include "scattermoe/kernels.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "parallel.hpp"
#include "scattermoe/mac_counter.hpp"

namespace scattermoe {

std::size_t TileConfig::default_worker_count() {
  return std::max(1u, std::thread::hardware_concurrency());
}

void TileConfig::validate() const {
  if (tile_rows == 0 || tile_cols == 0 || tile_inner == 0 || worker_count == 0) {
    throw std::invalid_argument("TileConfig: all blocking parameters must be >= 1");
  }
}

namespace {

struct WorkItem {
  std::size_t expert;
  std::size_t begin;  // grouped position
  std::size_t end;
};

std::vector<WorkItem> bin_tiles(const GroupedOrder& order, std::size_t tile_rows) {
  std::vector<WorkItem> items;
  for (std::size_t e = 0; e < order.experts(); ++e) {
    for (std::size_t b = order.bin_offsets[e]; b < order.bin_offsets[e + 1]; b += tile_rows) {
      items.push_back({e, b, std::min(b + tile_rows, order.bin_offsets[e + 1])});
    }
  }
  return items;
}

void check_order(const GroupedOrder& order, std::size_t experts, const char* op) {
  if (order.experts() != experts || order.bin_offsets.size() != experts + 1 ||
      order.bin_offsets.back() != order.slots()) {
    throw DimensionError(std::string(op) + ": grouped order over " + std::to_string(order.experts()) +
                         " experts does not match weights with " + std::to_string(experts));
  }
}

// Rows of x a scattered-in read may touch: T * fan_out must equal T * k.
std::size_t expected_input_rows(const GroupedOrder& order, std::size_t fan_out, bool grouped_in, const char* op) {
  if (fan_out == 0) throw std::invalid_argument(std::string(op) + ": fan_out must be >= 1");
  if (grouped_in) return order.slots();
  if (order.slots() % fan_out != 0) {
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(order.slots()) +
                                " slots not divisible by fan_out " + std::to_string(fan_out));
  }
  return order.slots() / fan_out;
}

// Dot products for rows [rows, rows + n) against expert weights, accumulated
// in double over the inner dimension in ascending order. acc is n x (c1 - c0).
void tile_products(const float* const* rows, std::size_t n, std::span<const float> w, std::size_t w_in,
                   std::size_t w_out, WeightView view, std::size_t c0, std::size_t c1, std::size_t tile_inner,
                   std::vector<double>& acc) {
  const std::size_t width = c1 - c0;
  acc.assign(n * width, 0.0);
  const std::size_t inner = view == WeightView::kAsIs ? w_in : w_out;
  for (std::size_t m0 = 0; m0 < inner; m0 += tile_inner) {
    const std::size_t m1 = std::min(m0 + tile_inner, inner);
    for (std::size_t r = 0; r < n; ++r) {
      const float* x = rows[r];
      double* a = acc.data() + r * width;
      if (view == WeightView::kAsIs) {
        for (std::size_t m = m0; m < m1; ++m) {
          const double xm = x[m];
          const float* wrow = w.data() + m * w_out + c0;
          for (std::size_t c = 0; c < width; ++c) a[c] += xm * wrow[c];
        }
      } else {
        // W^T[m][c] = W[c][m]; each output column reads a contiguous W row.
        for (std::size_t c = 0; c < width; ++c) {
          const float* wrow = w.data() + (c0 + c) * w_out;
          double s = a[c];
          for (std::size_t m = m0; m < m1; ++m) s += static_cast<double>(x[m]) * wrow[m];
          a[c] = s;
        }
      }
    }
  }
}

}  // namespace

Matrix scatter2scatter(const Matrix& x, const ExpertTensor& w, const GroupedOrder& order, std::size_t fan_out,
                       LayoutFlag layout, const TileConfig& tile, WeightView view, Matrix reuse) {
  tile.validate();
  check_order(order, w.experts(), "scatter2scatter");
  const std::size_t d_in = view == WeightView::kAsIs ? w.d_in() : w.d_out();
  const std::size_t d_out = view == WeightView::kAsIs ? w.d_out() : w.d_in();
  const std::size_t in_rows = expected_input_rows(order, fan_out, layout.grouped_in, "scatter2scatter");
  if (x.rows() != in_rows || x.cols() != d_in) {
    throw DimensionError("scatter2scatter: input " + x.shape() + " expected " + shape_string(in_rows, d_in) +
                         " for weights " + w.shape());
  }

  Matrix out = reuse.rows() == order.slots() && reuse.cols() == d_out ? std::move(reuse)
                                                                        : Matrix(order.slots(), d_out);
  const auto items = bin_tiles(order, tile.tile_rows);
  detail::parallel_for(items.size(), tile.worker_count, [&](std::size_t idx) {
    const WorkItem& item = items[idx];
    const std::size_t n = item.end - item.begin;
    std::vector<const float*> rows(n);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t i = item.begin + r;
      const std::size_t src = layout.grouped_in ? i : order.o[i] / fan_out;
      rows[r] = x.row(src).data();
    }
    std::vector<double> acc;
    const auto we = w.expert(item.expert);
    for (std::size_t c0 = 0; c0 < d_out; c0 += tile.tile_cols) {
      const std::size_t c1 = std::min(c0 + tile.tile_cols, d_out);
      tile_products(rows.data(), n, we, w.d_in(), w.d_out(), view, c0, c1, tile.tile_inner, acc);
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t i = item.begin + r;
        auto dst = out.row(layout.grouped_out ? i : order.o[i]);
        for (std::size_t c = c0; c < c1; ++c) dst[c] = static_cast<float>(acc[r * (c1 - c0) + (c - c0)]);
      }
    }
  });
  mac_counter::add(static_cast<std::uint64_t>(order.slots()) * d_in * d_out);
  return out;
}

Matrix scatter2scatter_combine(const Matrix& x, const ExpertTensor& w, const GroupedOrder& order,
                               std::size_t fan_out, bool grouped_in, const Matrix& p, const TileConfig& tile) {
  tile.validate();
  check_order(order, w.experts(), "scatter2scatter_combine");
  const std::size_t in_rows = expected_input_rows(order, fan_out, grouped_in, "scatter2scatter_combine");
  if (x.rows() != in_rows || x.cols() != w.d_in()) {
    throw DimensionError("scatter2scatter_combine: input " + x.shape() + " expected " +
                         shape_string(in_rows, w.d_in()) + " for weights " + w.shape());
  }
  if (p.rows() * p.cols() != order.slots() || p.empty()) {
    throw std::invalid_argument("scatter2scatter_combine: weights " + p.shape() + " do not cover " +
                                std::to_string(order.slots()) + " slots");
  }
  const std::size_t per_token = p.cols();
  const std::size_t d_out = w.d_out();
  const auto inv = order.inverse();
  std::vector<std::uint32_t> slot_expert(order.slots());
  for (std::size_t e = 0; e < order.experts(); ++e) {
    for (std::size_t i = order.bin_offsets[e]; i < order.bin_offsets[e + 1]; ++i) {
      slot_expert[order.o[i]] = static_cast<std::uint32_t>(e);
    }
  }

  Matrix out(p.rows(), d_out);
  const std::size_t n_tiles = (p.rows() + tile.tile_rows - 1) / tile.tile_rows;
  detail::parallel_for(n_tiles, tile.worker_count, [&](std::size_t tidx) {
    const std::size_t t0 = tidx * tile.tile_rows;
    const std::size_t t1 = std::min(t0 + tile.tile_rows, p.rows());
    // Slots of this token tile, stably sorted by expert so each expert's
    // weights are streamed once per tile.
    std::vector<std::size_t> slots;
    slots.reserve((t1 - t0) * per_token);
    for (std::size_t s = t0 * per_token; s < t1 * per_token; ++s) slots.push_back(s);
    std::stable_sort(slots.begin(), slots.end(),
                     [&](std::size_t a, std::size_t b) { return slot_expert[a] < slot_expert[b]; });

    std::vector<double> sums((t1 - t0) * d_out, 0.0);
    std::vector<double> acc;
    std::vector<const float*> rows;
    for (std::size_t g0 = 0; g0 < slots.size();) {
      const std::uint32_t e = slot_expert[slots[g0]];
      std::size_t g1 = g0;
      while (g1 < slots.size() && slot_expert[slots[g1]] == e) ++g1;
      const std::size_t n = g1 - g0;
      rows.resize(n);
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t s = slots[g0 + r];
        rows[r] = x.row(grouped_in ? inv[s] : s / fan_out).data();
      }
      for (std::size_t c0 = 0; c0 < d_out; c0 += tile.tile_cols) {
        const std::size_t c1 = std::min(c0 + tile.tile_cols, d_out);
        tile_products(rows.data(), n, w.expert(e), w.d_in(), d_out, WeightView::kAsIs, c0, c1, tile.tile_inner,
                      acc);
        for (std::size_t r = 0; r < n; ++r) {
          const std::size_t s = slots[g0 + r];
          const double weight = p.data()[s];
          double* dst = sums.data() + (s / per_token - t0) * d_out;
          for (std::size_t c = c0; c < c1; ++c) dst[c] += weight * acc[r * (c1 - c0) + (c - c0)];
        }
      }
      g0 = g1;
    }
    for (std::size_t t = t0; t < t1; ++t) {
      auto dst = out.row(t);
      for (std::size_t c = 0; c < d_out; ++c) dst[c] = static_cast<float>(sums[(t - t0) * d_out + c]);
    }
  });
  mac_counter::add(static_cast<std::uint64_t>(order.slots()) * w.d_in() * d_out);
  return out;
}

Matrix group(const Matrix& x, const GroupedOrder& order, std::span<const float> weights, std::size_t fan_out,
             Matrix reuse) {
  const std::size_t in_rows = expected_input_rows(order, fan_out, false, "group");
  if (x.rows() != in_rows) {
    throw DimensionError("group: input " + x.shape() + " expected " + std::to_string(in_rows) + " rows");
  }
  if (!weights.empty() && weights.size() != order.slots()) {
    throw DimensionError("group: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(order.slots()) + " slots");
  }
  Matrix out = reuse.rows() == order.slots() && reuse.cols() == x.cols() ? std::move(reuse)
                                                                          : Matrix(order.slots(), x.cols());
  for (std::size_t i = 0; i < order.slots(); ++i) {
    const std::size_t s = order.o[i];
    const auto src = x.row(s / fan_out);
    auto dst = out.row(i);
    if (weights.empty()) {
      std::copy(src.begin(), src.end(), dst.begin());
    } else {
      const float wgt = weights[s];
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] = src[c] * wgt;
    }
  }
  return out;
}

Matrix scatter(const Matrix& grouped, const GroupedOrder& order) {
  if (grouped.rows() != order.slots()) {
    throw DimensionError("scatter: input " + grouped.shape() + " expected " + std::to_string(order.slots()) +
                         " rows");
  }
  Matrix out(grouped.rows(), grouped.cols());
  for (std::size_t i = 0; i < order.slots(); ++i) {
    const auto src = grouped.row(i);
    std::copy(src.begin(), src.end(), out.row(order.o[i]).begin());
  }
  return out;
}

ExpertTensor group_xty(const Matrix& xg, const Matrix& yg, const GroupedOrder& order, const TileConfig& tile) {
  tile.validate();
  if (xg.rows() != yg.rows() || xg.rows() != order.slots()) {
    throw DimensionError("group_xty: grouped operands " + xg.shape() + " and " + yg.shape() + " for " +
                         std::to_string(order.slots()) + " slots");
  }
  const std::size_t d_in = xg.cols();
  const std::size_t d_out = yg.cols();
  ExpertTensor result(order.experts(), d_in, d_out);
  // One item per (expert, row block of d_in); each output element is owned by one item.
  const std::size_t row_blocks = (d_in + tile.tile_rows - 1) / tile.tile_rows;
  detail::parallel_for(order.experts() * row_blocks, tile.worker_count, [&](std::size_t idx) {
    const std::size_t e = idx / row_blocks;
    const std::size_t m0 = (idx % row_blocks) * tile.tile_rows;
    const std::size_t m1 = std::min(m0 + tile.tile_rows, d_in);
    if (order.bin_counts[e] == 0) return;
    std::vector<double> acc((m1 - m0) * d_out, 0.0);
    for (std::size_t i = order.bin_offsets[e]; i < order.bin_offsets[e + 1]; ++i) {
      const auto xr = xg.row(i);
      const auto yr = yg.row(i);
      for (std::size_t m = m0; m < m1; ++m) {
        const double xm = xr[m];
        double* a = acc.data() + (m - m0) * d_out;
        for (std::size_t c = 0; c < d_out; ++c) a[c] += xm * yr[c];
      }
    }
    auto we = result.expert(e);
    for (std::size_t m = m0; m < m1; ++m) {
      for (std::size_t c = 0; c < d_out; ++c) we[m * d_out + c] = static_cast<float>(acc[(m - m0) * d_out + c]);
    }
  });
  mac_counter::add(static_cast<std::uint64_t>(order.slots()) * d_in * d_out);
  return result;
}

}  // namespace scattermoe
