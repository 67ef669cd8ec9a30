// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <optional>
#include <vector>

#include "scattermoe/parallel_linear.hpp"
#include "test_util.hpp"

namespace scattermoe {
namespace {

namespace pl = parallel_linear;

// Double-precision layer: per-slot x_row * W[e], optional weighted sum, rows
// placed according to the layout.
struct RefLinear {
  std::span<const std::uint32_t> idx;
  std::vector<std::size_t> inverse;
  std::size_t tokens = 0;
  std::size_t k = 0;
  std::size_t fan_out = 1;
  LayoutFlag layout;
  bool weighted = false;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t experts = 0;

  std::size_t x_rows() const { return layout.grouped_in || fan_out == 1 ? tokens * k : tokens; }

  // theta = [x | w | p]
  oracle::RefMatrix operator()(std::span<const double> theta) const {
    const std::size_t slots = tokens * k;
    const double* x = theta.data();
    const double* w = x + x_rows() * d_in;
    const double* p = w + experts * d_in * d_out;
    oracle::RefMatrix y(weighted ? tokens : slots, d_out);
    for (std::size_t s = 0; s < slots; ++s) {
      const std::size_t in_row = layout.grouped_in ? inverse[s] : s / fan_out;
      const std::size_t out_row = weighted ? s / k : (layout.grouped_out ? inverse[s] : s);
      const double scale = weighted ? p[s] : 1.0;
      for (std::size_t o = 0; o < d_out; ++o) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d_in; ++i) acc += x[in_row * d_in + i] * w[(idx[s] * d_in + i) * d_out + o];
        y(out_row, o) += scale * acc;
      }
    }
    return y;
  }
};

struct Case {
  LayoutFlag layout;
  bool weighted;
  bool fan_out_k;
};

std::string case_name(const ::testing::TestParamInfo<Case>& info) {
  const Case& c = info.param;
  return std::string(c.layout.grouped_in ? "GroupedIn" : "ScatteredIn") +
         (c.layout.grouped_out ? "GroupedOut" : "ScatteredOut") + (c.weighted ? "Weighted" : "Plain") +
         (c.fan_out_k ? "FanOutK" : "FanOut1");
}

class ParallelLinearGradient : public ::testing::TestWithParam<Case> {};

TEST_P(ParallelLinearGradient, MatchesFiniteDifferences) {
  const Case c = GetParam();
  const std::size_t tokens = 12, d_in = 8, d_out = 16, experts = 4, k = 2;
  const RoutingResult r = testing::make_routing(tokens, experts, k, testing::RoutingKind::kRandom, 42);
  const GroupedOrder order = compute_grouped_order(r, experts);
  RefLinear ref{r.expert_idx, order.inverse(), tokens, k, c.fan_out_k ? k : 1, c.layout, c.weighted,
                d_in, d_out, experts};

  const Matrix x = seeded_random_matrix(ref.x_rows(), d_in, 1);
  const ExpertTensor w = seeded_random_experts(experts, d_in, d_out, 2, 0.5f);
  auto fwd = pl::forward(x, w, order, c.weighted ? &r.p : nullptr, ref.fan_out, c.layout);

  std::vector<double> theta = testing::to_double(x.data());
  for (const float v : w.data()) theta.push_back(v);
  for (const float v : r.p.data()) theta.push_back(v);
  const oracle::RefMatrix y_ref = ref(theta);
  ASSERT_LE(testing::allclose_ratio(fwd.y.data(), y_ref.data, 1e-5, 1e-7), 1.0);

  const auto grads = pl::backward(fwd.ctx, testing::sum_squares_grad(fwd.y), w);
  const auto fd = oracle::finite_difference_gradient(
      [&](std::span<const double> t) { return testing::sum_squares(ref(t)); }, theta);
  const std::span<const double> fd_all(fd);
  const std::size_t nx = x.size(), nw = w.data().size();
  EXPECT_LE(testing::gradient_ratio(grads.dx.data(), fd_all.subspan(0, nx)), 1.0) << "dX";
  EXPECT_LE(testing::gradient_ratio(grads.dw.data(), fd_all.subspan(nx, nw)), 1.0) << "dW";
  ASSERT_EQ(grads.dp.has_value(), c.weighted);
  if (c.weighted) {
    EXPECT_LE(testing::gradient_ratio(grads.dp->data(), fd_all.subspan(nx + nw)), 1.0) << "dp";
  }
}

std::vector<Case> all_cases() {
  std::vector<Case> cases;
  for (const bool gi : {false, true}) {
    for (const bool go : {false, true}) {
      for (const bool weighted : {false, true}) {
        if (weighted && go) continue;
        for (const bool fan_out_k : {false, true}) {
          if (gi && fan_out_k) continue;
          cases.push_back({{gi, go}, weighted, fan_out_k});
        }
      }
    }
  }
  return cases;
}

INSTANTIATE_TEST_SUITE_P(Layouts, ParallelLinearGradient, ::testing::ValuesIn(all_cases()), case_name);

TEST(ParallelLinearForward, WeightedSumExample) {
  ExpertTensor w(2, 1, 1);
  w(0, 0, 0) = 2.0f;
  w(1, 0, 0) = 3.0f;
  const Matrix x(2, 1, {1.0f, 10.0f});
  Matrix p(2, 2, {0.25f, 0.75f, 0.5f, 0.5f});
  const RoutingResult r = routing_from_assignments(2, 2, {0, 1, 1, 0}, p);
  const GroupedOrder order = compute_grouped_order(r, 2);
  const auto fwd = pl::forward(x, w, order, &r.p, 2, {false, false});
  EXPECT_EQ(fwd.y, Matrix(2, 1, {2.75f, 25.0f}));
  EXPECT_EQ(pl::infer(x, w, order, &r.p, 2, {false, false}), fwd.y);
}

TEST(ParallelLinearForward, IsLinearInInput) {
  const std::size_t tokens = 10, experts = 3, k = 2;
  const RoutingResult r = testing::make_routing(tokens, experts, k, testing::RoutingKind::kRandom, 3);
  const GroupedOrder order = compute_grouped_order(r, experts);
  const ExpertTensor w = seeded_random_experts(experts, 5, 4, 4);
  const Matrix a = seeded_random_matrix(tokens, 5, 5);
  const Matrix b = seeded_random_matrix(tokens, 5, 6);
  Matrix combo = a;
  scale_inplace(combo.data(), 2.0f);
  Matrix b3 = b;
  scale_inplace(b3.data(), -3.0f);
  add_inplace(combo, b3);
  Matrix want = pl::infer(a, w, order, &r.p, k, {false, false});
  scale_inplace(want.data(), 2.0f);
  Matrix yb = pl::infer(b, w, order, &r.p, k, {false, false});
  scale_inplace(yb.data(), -3.0f);
  add_inplace(want, yb);
  EXPECT_LT(max_abs_diff(pl::infer(combo, w, order, &r.p, k, {false, false}).data(), want.data()), 1e-5);
}

TEST(ParallelLinearForward, InferMatchesForwardInEveryLayout) {
  const std::size_t tokens = 17, experts = 4, k = 2;
  const RoutingResult r = testing::make_routing(tokens, experts, k, testing::RoutingKind::kOneEmpty, 8);
  const GroupedOrder order = compute_grouped_order(r, experts);
  const ExpertTensor w = seeded_random_experts(experts, 6, 9, 9);
  const Matrix x = seeded_random_matrix(tokens, 6, 10);
  for (const LayoutFlag layout : {LayoutFlag{false, false}, LayoutFlag{false, true}}) {
    EXPECT_EQ(pl::infer(x, w, order, nullptr, k, layout), pl::forward(x, w, order, nullptr, k, layout).y);
  }
  // The fused sum skips rounding the per-slot outputs, so only closeness holds.
  const Matrix fused = pl::infer(x, w, order, &r.p, k, {false, false});
  const Matrix unfused = pl::forward(x, w, order, &r.p, k, {false, false}).y;
  EXPECT_LE(testing::allclose_ratio(fused.data(), testing::to_double(unfused.data()), 1e-6, 1e-7), 1.0);
}

TEST(ParallelLinearForward, RejectsWeightedGroupedOutput) {
  const RoutingResult r = testing::make_routing(4, 2, 1, testing::RoutingKind::kRandom, 1);
  const GroupedOrder order = compute_grouped_order(r, 2);
  const ExpertTensor w = seeded_random_experts(2, 3, 3, 1);
  EXPECT_THROW(pl::forward(Matrix(4, 3), w, order, &r.p, 1, {false, true}), std::invalid_argument);
  EXPECT_THROW(pl::forward(Matrix(4, 2), w, order, nullptr, 1, {false, false}), DimensionError);
}

struct ReuseRun {
  pl::LinearGradients grads;
  AllocationLedger ledger;
};

ReuseRun run_backward(bool weighted, bool grouped_in, pl::BufferReuse reuse, bool seed_scratch) {
  const std::size_t tokens = 12, d_in = 8, d_out = 16, experts = 4, k = 2;
  const RoutingResult r = testing::make_routing(tokens, experts, k, testing::RoutingKind::kRandom, 5);
  const GroupedOrder order = compute_grouped_order(r, experts);
  const ExpertTensor w = seeded_random_experts(experts, d_in, d_out, 6);
  const LayoutFlag layout{grouped_in, false};
  const Matrix x = grouped_in ? group(seeded_random_matrix(tokens, d_in, 7), order, {}, k)
                              : seeded_random_matrix(tokens, d_in, 7);
  auto fwd = pl::forward(x, w, order, weighted ? &r.p : nullptr, k, layout);
  if (seed_scratch) {
    fwd.ctx.scratch_grouped_dy = Matrix(tokens * k, d_out);
    fwd.ctx.scratch_grouped_x = Matrix(tokens * k, d_in);
  }
  ReuseRun run;
  pl::BackwardOptions opts;
  opts.ledger = &run.ledger;
  opts.reuse = reuse;
  run.grads = pl::backward(fwd.ctx, testing::sum_squares_grad(fwd.y), w, opts);
  return run;
}

TEST(ParallelLinearBackward, SeededScratchAllocatesNoSlotMatrices) {
  const std::size_t slots = 24;
  for (const bool weighted : {false, true}) {
    for (const bool grouped_in : {false, true}) {
      const ReuseRun reused = run_backward(weighted, grouped_in, pl::BufferReuse::kReuse, true);
      const ReuseRun plain = run_backward(weighted, grouped_in, pl::BufferReuse::kNone, true);
      EXPECT_EQ(reused.ledger.count_rows(slots, Phase::kBackward), 0u);
      EXPECT_GT(plain.ledger.count_rows(slots, Phase::kBackward), 0u);
      EXPECT_EQ(reused.grads.dx, plain.grads.dx);
      EXPECT_EQ(reused.grads.dw, plain.grads.dw);
      EXPECT_EQ(reused.grads.dp, plain.grads.dp);
    }
  }
}

TEST(ParallelLinearBackward, UnseededScratchAllocatesAtMostTwo) {
  for (const bool weighted : {false, true}) {
    const ReuseRun run = run_backward(weighted, false, pl::BufferReuse::kReuse, false);
    EXPECT_LE(run.ledger.count_rows(24, Phase::kBackward), 2u);
  }
}

TEST(ParallelLinearBackward, SecondCallIsAUsageError) {
  const RoutingResult r = testing::make_routing(4, 2, 1, testing::RoutingKind::kRandom, 1);
  const GroupedOrder order = compute_grouped_order(r, 2);
  const ExpertTensor w = seeded_random_experts(2, 3, 3, 1);
  auto fwd = pl::forward(seeded_random_matrix(4, 3, 2), w, order, &r.p, 1, {false, false});
  const Matrix dy(4, 3);
  pl::backward(fwd.ctx, dy, w);
  EXPECT_THROW(pl::backward(fwd.ctx, dy, w), UsageError);
}

TEST(ParallelLinearBackward, WrongScratchShapeIsRejected) {
  const RoutingResult r = testing::make_routing(4, 2, 1, testing::RoutingKind::kRandom, 1);
  const GroupedOrder order = compute_grouped_order(r, 2);
  const ExpertTensor w = seeded_random_experts(2, 3, 3, 1);
  auto fwd = pl::forward(seeded_random_matrix(4, 3, 2), w, order, nullptr, 1, {false, false});
  fwd.ctx.scratch_grouped_x = Matrix(5, 3);
  EXPECT_THROW(pl::backward(fwd.ctx, Matrix(4, 3), w), DimensionError);
}

TEST(ParallelLinearBackward, RejectsWrongGradientShape) {
  const RoutingResult r = testing::make_routing(4, 2, 1, testing::RoutingKind::kRandom, 1);
  const GroupedOrder order = compute_grouped_order(r, 2);
  const ExpertTensor w = seeded_random_experts(2, 3, 3, 1);
  auto fwd = pl::forward(seeded_random_matrix(4, 3, 2), w, order, nullptr, 1, {false, false});
  EXPECT_THROW(pl::backward(fwd.ctx, Matrix(3, 3), w), DimensionError);
}

}  // namespace
}  // namespace scattermoe
