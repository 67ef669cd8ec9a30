// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sstream>

#include "scattermoe/mac_counter.hpp"
#include "scattermoe/oracle.hpp"
#include "test_util.hpp"

namespace scattermoe {
namespace {

const LedgerEntry* find_entry(const AllocationLedger& ledger, const std::string& name) {
  for (const auto& e : ledger.entries()) {
    if (e.buffer == name) return &e;
  }
  return nullptr;
}

struct BaselineFixture {
  std::size_t tokens, d_model, d_expert, experts, k;
  Matrix x;
  ExpertTensor w1, w2;
  RoutingResult routing;
  GroupedOrder order;

  BaselineFixture(std::size_t t, std::size_t dm, std::size_t de, std::size_t e, std::size_t kk,
                  testing::RoutingKind kind, std::uint64_t seed)
      : tokens(t), d_model(dm), d_expert(de), experts(e), k(kk),
        x(seeded_random_matrix(t, dm, seed)),
        w1(seeded_random_experts(e, dm, de, seed + 1)),
        w2(seeded_random_experts(e, de, dm, seed + 2)),
        routing(testing::make_routing(t, e, kk, kind, seed + 3)),
        order(compute_grouped_order(routing, e)) {}
};

TEST(RefMatrix, RoundTrip) {
  const Matrix m = seeded_random_matrix(3, 4, 1);
  EXPECT_EQ(oracle::RefMatrix::from(m).to_float(), m);
}

TEST(NaiveSmoeMlp, HandComputedExample) {
  // One token, two experts with scalar weights; identity activation.
  oracle::RefMatrix x(1, 1);
  x(0, 0) = 2.0;
  const oracle::RefExperts w1{2, 1, 1, {3.0, -1.0}};
  const oracle::RefExperts w2{2, 1, 1, {0.5, 4.0}};
  oracle::RefMatrix p(1, 2);
  p(0, 0) = 0.25;
  p(0, 1) = 0.75;
  const std::vector<std::uint32_t> idx{1, 0};
  const auto y = oracle::naive_smoe_mlp(x, w1, w2, idx, p, 2, Activation::kIdentity);
  // 0.25 * (2 * -1 * 4) + 0.75 * (2 * 3 * 0.5)
  EXPECT_DOUBLE_EQ(y(0, 0), 0.25);
}

TEST(FiniteDifference, ExactOnQuadratics) {
  const std::vector<double> theta{1.0, -2.0, 0.5};
  const auto g = oracle::finite_difference_gradient(
      [](std::span<const double> t) { return t[0] * t[0] + 3.0 * t[1] + t[0] * t[2]; }, theta);
  EXPECT_NEAR(g[0], 2.5, 1e-9);
  EXPECT_NEAR(g[1], 3.0, 1e-9);
  EXPECT_NEAR(g[2], 1.0, 1e-9);
}

TEST(PaddedRows, ClosedForm) {
  const std::vector<std::size_t> counts{1, 0, 128, 129};
  EXPECT_EQ(oracle::padded_rows(counts, 1), 258u);
  EXPECT_EQ(oracle::padded_rows(counts, 128), 128u + 0 + 128 + 256);
  EXPECT_THROW(oracle::padded_rows(counts, 0), std::invalid_argument);
}

TEST(Baseline, MatchesNaiveOracle) {
  for (const std::size_t block : {std::size_t{1}, std::size_t{4}, std::size_t{128}}) {
    for (const bool copies : {true, false}) {
      const BaselineFixture f(23, 8, 16, 8, 2, testing::RoutingKind::kOneEmpty, 4);
      const Matrix y = oracle::baseline_grouped_pipeline(f.x, f.w1, f.w2, f.routing, f.order, Activation::kGelu,
                                                         {block, copies}, nullptr);
      const auto want = oracle::naive_smoe_mlp(f.x, f.w1, f.w2, f.routing, Activation::kGelu);
      EXPECT_LE(testing::allclose_ratio(y.data(), want.data, 1e-5, 1e-7), 1.0);
    }
  }
}

TEST(Baseline, PaddedBuffersFollowClosedForm) {
  const BaselineFixture f(37, 8, 16, 8, 2, testing::RoutingKind::kRandom, 5);
  for (const std::size_t block : {std::size_t{1}, std::size_t{64}, std::size_t{128}}) {
    AllocationLedger ledger;
    oracle::baseline_grouped_pipeline(f.x, f.w1, f.w2, f.routing, f.order, Activation::kGelu, {block, true},
                                      &ledger);
    std::size_t want_rows = 0;
    for (const auto c : f.order.bin_counts) want_rows += (c + block - 1) / block * block;
    const auto* input = find_entry(ledger, "baseline.grouped_input");
    ASSERT_NE(input, nullptr);
    EXPECT_EQ(input->bytes, want_rows * f.d_model * sizeof(float));
    EXPECT_EQ(find_entry(ledger, "baseline.grouped_hidden")->bytes, want_rows * f.d_expert * sizeof(float));
    EXPECT_EQ(find_entry(ledger, "baseline.grouped_output")->bytes, want_rows * f.d_model * sizeof(float));
  }
}

TEST(Baseline, SingleTokenBinPadsToFullBlock) {
  const std::vector<std::uint32_t> idx{3};
  Matrix p(1, 1, {1.0f});
  const RoutingResult r = routing_from_assignments(1, 1, idx, p);
  const GroupedOrder order = compute_grouped_order(r, 4);
  AllocationLedger ledger;
  oracle::baseline_grouped_pipeline(seeded_random_matrix(1, 8, 1), seeded_random_experts(4, 8, 16, 2),
                                    seeded_random_experts(4, 16, 8, 3), r, order, Activation::kRelu, {128, true},
                                    &ledger);
  EXPECT_EQ(find_entry(ledger, "baseline.grouped_input")->rows, 128u);
}

TEST(Baseline, BlockOneHasNoPadding) {
  const BaselineFixture f(16, 8, 16, 4, 2, testing::RoutingKind::kRandom, 6);
  AllocationLedger ledger;
  oracle::baseline_grouped_pipeline(f.x, f.w1, f.w2, f.routing, f.order, Activation::kGelu, {1, true}, &ledger);
  EXPECT_EQ(find_entry(ledger, "baseline.grouped_input")->bytes, f.tokens * f.k * f.d_model * 4);
}

TEST(Baseline, PaddingCostsMacs) {
  const BaselineFixture f(10, 8, 16, 4, 1, testing::RoutingKind::kRandom, 7);
  const mac_counter::Scope scope;
  oracle::baseline_grouped_pipeline(f.x, f.w1, f.w2, f.routing, f.order, Activation::kGelu, {128, false}, nullptr);
  const std::size_t rows = oracle::padded_rows(f.order.bin_counts, 128);
  EXPECT_EQ(scope.count(), rows * (f.d_model * f.d_expert * 2));
  EXPECT_GT(rows, f.tokens);
}

TEST(Baseline, PeakShrinksAsBlockShrinks) {
  const BaselineFixture f(50, 8, 16, 16, 2, testing::RoutingKind::kRandom, 8);
  std::size_t previous = 0;
  for (const std::size_t block : {std::size_t{1}, std::size_t{16}, std::size_t{64}, std::size_t{128}}) {
    AllocationLedger ledger;
    oracle::baseline_grouped_pipeline(f.x, f.w1, f.w2, f.routing, f.order, Activation::kGelu, {block, true},
                                      &ledger);
    EXPECT_GE(ledger.peak_bytes(), previous);
    previous = ledger.peak_bytes();
  }
}

TEST(FusedLedger, ForwardHoldsOnlyHiddenAndOutput) {
  const oracle::FusedLedgerConfig cfg{40, 8, 16, 16, 2, false, 3};
  const AllocationLedger ledger = oracle::fused_pipeline_ledger(cfg);
  EXPECT_EQ(ledger.count_shape(cfg.tokens * cfg.k, cfg.d_model), 0u);
  EXPECT_EQ(ledger.peak_bytes(), (cfg.tokens * cfg.k * cfg.d_expert + cfg.tokens * cfg.d_model) * 4);
  EXPECT_EQ(ledger.total_bytes(Phase::kBackward), 0u);
}

TEST(FusedLedger, TrainForwardPhaseMatchesInference) {
  const oracle::FusedLedgerConfig infer_cfg{24, 8, 16, 8, 1, false, 9};
  oracle::FusedLedgerConfig train_cfg = infer_cfg;
  train_cfg.include_backward = true;
  const AllocationLedger infer = oracle::fused_pipeline_ledger(infer_cfg);
  const AllocationLedger train = oracle::fused_pipeline_ledger(train_cfg);
  EXPECT_EQ(train.total_bytes(Phase::kForward), infer.total_bytes(Phase::kForward));
  EXPECT_GT(train.total_bytes(Phase::kBackward), 0u);
}

TEST(FusedLedger, SmallerPeakThanBaseline) {
  for (const std::size_t k : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
    for (const std::size_t block : {std::size_t{1}, std::size_t{64}, std::size_t{128}}) {
      const oracle::FusedLedgerConfig cfg{30, 64, 16, 8 * k, k, false, 11};
      const AllocationLedger fused = oracle::fused_pipeline_ledger(cfg);
      const BaselineFixture f(30, 64, 16, 8 * k, k, testing::RoutingKind::kRandom, 11);
      AllocationLedger baseline;
      oracle::baseline_grouped_pipeline(f.x, f.w1, f.w2, f.routing, f.order, Activation::kGelu, {block, true},
                                        &baseline);
      EXPECT_LT(fused.peak_bytes(), baseline.peak_bytes()) << "k=" << k << " block=" << block;
    }
  }
}

TEST(Ledger, LiveAndPeakAccounting) {
  AllocationLedger ledger;
  const auto a = ledger.allocate("a", 2, 3, Phase::kForward);
  const auto b = ledger.allocate("b", 4, 1, Phase::kBackward);
  EXPECT_EQ(ledger.live_bytes(), 40u);
  ledger.release(a);
  EXPECT_EQ(ledger.live_bytes(), 16u);
  EXPECT_EQ(ledger.peak_bytes(), 40u);
  EXPECT_THROW(ledger.release(a), std::logic_error);
  ledger.release(b);
  EXPECT_EQ(ledger.total_bytes(Phase::kForward), 24u);
  EXPECT_EQ(ledger.count_rows(4, Phase::kBackward), 1u);
  EXPECT_EQ(ledger.count_rows(4, Phase::kForward), 0u);
}

TEST(Ledger, CsvExport) {
  AllocationLedger ledger;
  ledger.allocate("mlp.hidden.y", 6, 16, Phase::kForward);
  ledger.allocate("mlp.output.dw", 32, 8, Phase::kBackward);
  std::ostringstream os;
  ledger.write_csv(os);
  EXPECT_EQ(os.str(),
            "buffer,phase,rows,cols,bytes\n"
            "mlp.hidden.y,forward,6,16,384\n"
            "mlp.output.dw,backward,32,8,1024\n");
}

}  // namespace
}  // namespace scattermoe
