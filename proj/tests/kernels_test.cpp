// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <vector>

#include "scattermoe/kernels.hpp"
#include "scattermoe/mac_counter.hpp"
#include "test_util.hpp"

namespace scattermoe {
namespace {

constexpr LayoutFlag kLayouts[] = {{false, false}, {false, true}, {true, false}, {true, true}};

// Per-slot reference in scattered order: row s = X[s / fan_out] * W[idx[s]].
oracle::RefMatrix reference_slots(const Matrix& x, const ExpertTensor& w, std::span<const std::uint32_t> idx,
                                  std::size_t fan_out) {
  oracle::RefMatrix y(idx.size(), w.d_out());
  for (std::size_t s = 0; s < idx.size(); ++s) {
    for (std::size_t o = 0; o < w.d_out(); ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < w.d_in(); ++i) acc += double(x(s / fan_out, i)) * w(idx[s], i, o);
      y(s, o) = acc;
    }
  }
  return y;
}

oracle::RefMatrix to_grouped(const oracle::RefMatrix& scattered, const GroupedOrder& order) {
  oracle::RefMatrix g(scattered.rows, scattered.cols);
  for (std::size_t i = 0; i < order.slots(); ++i) {
    for (std::size_t c = 0; c < g.cols; ++c) g(i, c) = scattered(order.o[i], c);
  }
  return g;
}

// Kernel input for a layout: T rows (scattered) or the grouped slot rows.
Matrix input_for(const Matrix& x, const GroupedOrder& order, std::size_t fan_out, bool grouped_in) {
  return grouped_in ? group(x, order, {}, fan_out) : x;
}

TEST(Scatter2Scatter, IdentityExpertsCopyRowsInEveryLayout) {
  const std::size_t tokens = 5, d = 3, experts = 2, k = 2;
  ExpertTensor w(experts, d, d);
  for (std::size_t e = 0; e < experts; ++e) {
    for (std::size_t i = 0; i < d; ++i) w(e, i, i) = 1.0f;
  }
  const RoutingResult r = testing::make_routing(tokens, experts, k, testing::RoutingKind::kRandom, 3);
  const GroupedOrder order = compute_grouped_order(r, experts);
  const Matrix x = seeded_random_matrix(tokens, d, 4);
  for (const LayoutFlag layout : kLayouts) {
    const Matrix y = scatter2scatter(input_for(x, order, k, layout.grouped_in), w, order, k, layout);
    ASSERT_EQ(y.rows(), tokens * k);
    for (std::size_t i = 0; i < order.slots(); ++i) {
      const std::size_t s = order.o[i];
      const std::size_t out_row = layout.grouped_out ? i : s;
      for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(y(out_row, c), x(s / k, c));
    }
  }
}

TEST(Scatter2Scatter, ScaledIdentityExample) {
  ExpertTensor w(2, 2, 2);
  w(0, 0, 0) = w(0, 1, 1) = 2.0f;
  w(1, 0, 0) = w(1, 1, 1) = 3.0f;
  const Matrix x(3, 2, {1, 2, 3, 4, 5, 6});
  const std::vector<std::uint32_t> idx{1, 0, 1};
  const GroupedOrder order = compute_grouped_order(idx, 2);
  const Matrix scattered = scatter2scatter(x, w, order, 1, {false, false});
  EXPECT_EQ(scattered, Matrix(3, 2, {3, 6, 6, 8, 15, 18}));
  const Matrix grouped = scatter2scatter(x, w, order, 1, {false, true});
  EXPECT_EQ(grouped, Matrix(3, 2, {6, 8, 3, 6, 15, 18}));
}

TEST(Scatter2Scatter, MatchesReferenceAcrossLayoutsAndRoutings) {
  const std::size_t tokens = 37, d_in = 19, d_out = 23, experts = 6;
  const ExpertTensor w = seeded_random_experts(experts, d_in, d_out, 8);
  const Matrix x = seeded_random_matrix(tokens, d_in, 9);
  for (const auto kind : {testing::RoutingKind::kRandom, testing::RoutingKind::kAllToOne,
                          testing::RoutingKind::kOneEmpty}) {
    for (const std::size_t k : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
      const RoutingResult r = testing::make_routing(tokens, experts, k, kind, 10 + k);
      const GroupedOrder order = compute_grouped_order(r, experts);
      const oracle::RefMatrix ref = reference_slots(x, w, r.expert_idx, k);
      const oracle::RefMatrix ref_grouped = to_grouped(ref, order);
      for (const LayoutFlag layout : kLayouts) {
        const Matrix y = scatter2scatter(input_for(x, order, k, layout.grouped_in), w, order, k, layout);
        const auto& want = layout.grouped_out ? ref_grouped : ref;
        EXPECT_LE(testing::allclose_ratio(y.data(), want.data, 1e-6, 1e-7), 1.0);
      }
    }
  }
}

TEST(Scatter2Scatter, LayoutsArePermutationsOfEachOther) {
  const std::size_t tokens = 29, experts = 5, k = 2;
  const RoutingResult r = testing::make_routing(tokens, experts, k, testing::RoutingKind::kRandom, 1);
  const GroupedOrder order = compute_grouped_order(r, experts);
  const ExpertTensor w = seeded_random_experts(experts, 11, 7, 2);
  const Matrix x = seeded_random_matrix(tokens, 11, 3);
  const Matrix scattered = scatter2scatter(x, w, order, k, {false, false});
  const Matrix grouped = scatter2scatter(x, w, order, k, {false, true});
  EXPECT_EQ(scatter(grouped, order), scattered);
  EXPECT_EQ(group(scattered, order, {}, 1), grouped);
  const Matrix from_grouped = scatter2scatter(group(x, order, {}, k), w, order, k, {true, false});
  EXPECT_EQ(from_grouped, scattered);
}

TEST(Scatter2Scatter, ResultIndependentOfTilingAndWorkers) {
  const std::size_t tokens = 70, experts = 4, k = 2;
  const RoutingResult r = testing::make_routing(tokens, experts, k, testing::RoutingKind::kRandom, 5);
  const GroupedOrder order = compute_grouped_order(r, experts);
  const ExpertTensor w = seeded_random_experts(experts, 33, 17, 6);
  const Matrix x = seeded_random_matrix(tokens, 33, 7);
  const Matrix base = scatter2scatter(x, w, order, k, {false, false});
  for (const TileConfig tile : {TileConfig{1, 1, 1, 1}, TileConfig{3, 5, 7, 2}, TileConfig{128, 128, 128, 4}}) {
    EXPECT_EQ(scatter2scatter(x, w, order, k, {false, false}, tile), base);
  }
}

TEST(Scatter2Scatter, SingleExpertEqualsMatmul) {
  const Matrix x = seeded_random_matrix(9, 12, 1);
  const ExpertTensor w = seeded_random_experts(1, 12, 5, 2);
  const std::vector<std::uint32_t> idx(9, 0);
  const GroupedOrder order = compute_grouped_order(idx, 1);
  const WeightMatrix dense(12, 5, {w.data().begin(), w.data().end()});
  EXPECT_EQ(scatter2scatter(x, w, order, 1, {false, false}), matmul(x, dense));
}

TEST(Scatter2Scatter, TransposedViewUsesWTranspose) {
  const std::size_t tokens = 8, experts = 3;
  const RoutingResult r = testing::make_routing(tokens, experts, 1, testing::RoutingKind::kRandom, 2);
  const GroupedOrder order = compute_grouped_order(r, experts);
  const ExpertTensor w = seeded_random_experts(experts, 6, 4, 3);
  ExpertTensor wt(experts, 4, 6);
  for (std::size_t e = 0; e < experts; ++e) {
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t o = 0; o < 4; ++o) wt(e, o, i) = w(e, i, o);
    }
  }
  const Matrix x = seeded_random_matrix(tokens, 4, 4);
  EXPECT_EQ(scatter2scatter(x, w, order, 1, {false, false}, {}, WeightView::kTransposed),
            scatter2scatter(x, wt, order, 1, {false, false}));
}

TEST(Scatter2Scatter, ReuseBufferReceivesResult) {
  const RoutingResult r = testing::make_routing(6, 3, 1, testing::RoutingKind::kRandom, 1);
  const GroupedOrder order = compute_grouped_order(r, 3);
  const ExpertTensor w = seeded_random_experts(3, 4, 5, 2);
  const Matrix x = seeded_random_matrix(6, 4, 3);
  Matrix buffer(6, 5);
  const float* storage = buffer.data().data();
  const Matrix y = scatter2scatter(x, w, order, 1, {false, false}, {}, WeightView::kAsIs, std::move(buffer));
  EXPECT_EQ(y.data().data(), storage);
  EXPECT_EQ(y, scatter2scatter(x, w, order, 1, {false, false}));
}

TEST(Scatter2Scatter, ShapeErrors) {
  const RoutingResult r = testing::make_routing(4, 2, 1, testing::RoutingKind::kRandom, 1);
  const GroupedOrder order = compute_grouped_order(r, 2);
  const ExpertTensor w = seeded_random_experts(2, 3, 3, 1);
  EXPECT_THROW(scatter2scatter(Matrix(4, 5), w, order, 1, {false, false}), DimensionError);
  EXPECT_THROW(scatter2scatter(Matrix(3, 3), w, order, 1, {false, false}), DimensionError);
  EXPECT_THROW(scatter2scatter(Matrix(4, 3), w, order, 3, {false, false}), std::invalid_argument);
  EXPECT_THROW(scatter2scatter(Matrix(4, 3), ExpertTensor(3, 3, 3), order, 1, {false, false}), DimensionError);
}

TEST(Scatter2Scatter, CountsOnlyRealRows) {
  const std::size_t tokens = 64, experts = 8, k = 2, d_in = 16, d_out = 8;
  const ExpertTensor w = seeded_random_experts(experts, d_in, d_out, 1);
  const Matrix x = seeded_random_matrix(tokens, d_in, 2);
  for (const auto kind : {testing::RoutingKind::kRandom, testing::RoutingKind::kAllToOne}) {
    const RoutingResult r = testing::make_routing(tokens, experts, k, kind, 3);
    const GroupedOrder order = compute_grouped_order(r, experts);
    const mac_counter::Scope scope;
    scatter2scatter(x, w, order, k, {false, false}, TileConfig{64, 64, 64, 1});
    EXPECT_EQ(scope.count(), tokens * k * d_in * d_out);
  }
}

TEST(Scatter2ScatterCombine, EqualsWeightedSumOfSlots) {
  const std::size_t tokens = 31, experts = 5, d_in = 9, d_out = 13;
  const ExpertTensor w = seeded_random_experts(experts, d_in, d_out, 4);
  for (const std::size_t k : {std::size_t{1}, std::size_t{3}}) {
    const RoutingResult r = testing::make_routing(tokens, experts, k, testing::RoutingKind::kRandom, 6);
    const GroupedOrder order = compute_grouped_order(r, experts);
    // One input row per slot, as for an expert hidden state.
    const Matrix h = seeded_random_matrix(tokens * k, d_in, 7);
    const oracle::RefMatrix per_slot = reference_slots(h, w, r.expert_idx, 1);
    oracle::RefMatrix want(tokens, d_out);
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t c = 0; c < d_out; ++c) want(t, c) += r.p(t, j) * per_slot(t * k + j, c);
      }
    }
    const Matrix y = scatter2scatter_combine(h, w, order, 1, false, r.p);
    EXPECT_LE(testing::allclose_ratio(y.data(), want.data, 1e-6, 1e-7), 1.0);
    const Matrix yg = scatter2scatter_combine(group(h, order, {}, 1), w, order, 1, true, r.p);
    EXPECT_EQ(yg, y);
    const mac_counter::Scope scope;
    scatter2scatter_combine(h, w, order, 1, false, r.p);
    EXPECT_EQ(scope.count(), tokens * k * d_in * d_out);
  }
}

TEST(Group, ExampleAndWeights) {
  const Matrix x(3, 2, {1, 2, 3, 4, 5, 6});
  const std::vector<std::uint32_t> idx{1, 0, 1};
  const GroupedOrder order = compute_grouped_order(idx, 2);
  EXPECT_EQ(group(x, order, {}, 1), Matrix(3, 2, {3, 4, 1, 2, 5, 6}));
  const std::vector<float> weights{0.5f, 2.0f, 1.0f};
  EXPECT_EQ(group(x, order, weights, 1), Matrix(3, 2, {6, 8, 0.5f, 1, 5, 6}));
}

TEST(Group, FanOutRepeatsTokens) {
  const Matrix x(2, 1, {10, 20});
  const std::vector<std::uint32_t> idx{0, 1, 1, 0};
  const GroupedOrder order = compute_grouped_order(idx, 2);
  EXPECT_EQ(group(x, order, {}, 2), Matrix(4, 1, {10, 20, 10, 20}));
}

TEST(GroupXty, MatchesPerExpertReference) {
  const std::size_t slots = 40, experts = 5, d_in = 7, d_out = 6;
  const std::vector<std::uint32_t> idx = [&] {
    std::vector<std::uint32_t> v(slots);
    for (std::size_t s = 0; s < slots; ++s) v[s] = static_cast<std::uint32_t>((s * 7) % (experts - 1));
    return v;
  }();
  const GroupedOrder order = compute_grouped_order(idx, experts);
  const Matrix xg = seeded_random_matrix(slots, d_in, 1);
  const Matrix yg = seeded_random_matrix(slots, d_out, 2);
  for (const TileConfig tile : {TileConfig{}, TileConfig{3, 2, 5, 3}}) {
    const ExpertTensor g = group_xty(xg, yg, order, tile);
    ASSERT_EQ(g.experts(), experts);
    for (std::size_t e = 0; e < experts; ++e) {
      for (std::size_t i = 0; i < d_in; ++i) {
        for (std::size_t o = 0; o < d_out; ++o) {
          double want = 0.0;
          for (std::size_t n = order.bin_offsets[e]; n < order.bin_offsets[e + 1]; ++n) {
            want += double(xg(n, i)) * yg(n, o);
          }
          EXPECT_NEAR(g(e, i, o), want, 1e-6 + 1e-6 * std::abs(want));
        }
      }
    }
    for (const float v : g.expert(experts - 1)) EXPECT_EQ(v, 0.0f);
  }
}

TEST(TileConfig, RejectsZeroSizes) {
  EXPECT_THROW((TileConfig{0, 64, 64, 1}.validate()), std::invalid_argument);
  EXPECT_THROW((TileConfig{64, 64, 64, 0}.validate()), std::invalid_argument);
  EXPECT_NO_THROW(TileConfig{}.validate());
}

}  // namespace
}  // namespace scattermoe
