// SPDX-License-Identifier: Apache-2.0

#include "scattermoe/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

#include "scattermoe/bench.hpp"
#include "scattermoe/mac_counter.hpp"
#include "scattermoe/moe_layers.hpp"
#include "scattermoe/oracle.hpp"

namespace scattermoe::verify {
namespace {

using Clock = std::chrono::steady_clock;

class Tally {
 public:
  explicit Tally(std::string name) { result_.name = std::move(name); }

  void check(bool ok, const std::string& what) {
    ++result_.total;
    if (ok) {
      ++result_.passed;
    } else if (result_.detail.empty()) {
      result_.detail = what;
    }
  }
  // Passes when ratio <= 1.
  void check_ratio(double ratio, const std::string& what) {
    result_.worst_ratio = std::max(result_.worst_ratio, ratio);
    std::ostringstream os;
    os << what << " (error/tolerance " << ratio << ")";
    check(ratio <= 1.0, os.str());
  }
  SuiteResult finish() {
    result_.seconds = std::chrono::duration<double>(Clock::now() - start_).count();
    return result_;
  }

 private:
  SuiteResult result_;
  Clock::time_point start_ = Clock::now();
};

Matrix perturbed(Matrix m, const VerifyOptions& options) {
  if (options.perturb) options.perturb(m);
  return m;
}
ExpertTensor perturbed(ExpertTensor w, const VerifyOptions& options) {
  if (!options.perturb) return w;
  Matrix m(w.experts() * w.d_in(), w.d_out(), {w.data().begin(), w.data().end()});
  options.perturb(m);
  return ExpertTensor(w.experts(), w.d_in(), w.d_out(), {m.data().begin(), m.data().end()});
}
WeightMatrix perturbed(WeightMatrix w, const VerifyOptions& options) {
  if (!options.perturb) return w;
  Matrix m(w.d_in(), w.d_out(), {w.data().begin(), w.data().end()});
  options.perturb(m);
  return WeightMatrix(m);
}

// |a - b| <= atol + rtol |b| elementwise; returns the worst ratio.
double allclose_ratio(std::span<const float> a, std::span<const double> b, double rtol, double atol) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double err = std::abs(static_cast<double>(a[i]) - b[i]);
    worst = std::max(worst, err / (atol + rtol * std::abs(b[i])));
  }
  return std::isnan(worst) ? INFINITY : worst;
}

double sum_squares(const oracle::RefMatrix& m) {
  double s = 0.0;
  for (const double v : m.data) s += v * v;
  return s;
}

Matrix twice(const Matrix& y) {
  Matrix g = y;
  scale_inplace(g.data(), 2.0f);
  return g;
}

enum class RoutingKind { kRouter, kAllToOne, kOneEmpty };

const char* kind_name(RoutingKind kind) {
  switch (kind) {
    case RoutingKind::kRouter: return "router";
    case RoutingKind::kAllToOne: return "all-to-one";
    case RoutingKind::kOneEmpty: return "one-empty";
  }
  return "?";
}

// Router output for random logits; the adversarial kinds pin every token to
// experts 0..k-1 or push the last expert's logit far down.
RoutingResult make_routing(std::size_t tokens, std::size_t experts, std::size_t k, RoutingKind kind,
                           std::uint64_t seed) {
  Matrix logits = seeded_random_matrix(tokens, experts, seed, 2.0f);
  for (std::size_t t = 0; t < tokens; ++t) {
    if (kind == RoutingKind::kAllToOne) {
      for (std::size_t e = 0; e < experts; ++e) logits(t, e) = e < k ? 10.0f - static_cast<float>(e) : 0.0f;
    } else if (kind == RoutingKind::kOneEmpty) {
      logits(t, experts - 1) = -30.0f;
    }
  }
  return topk_select(softmax_rows(logits), k);
}

struct MlpCase {
  std::size_t tokens = 0;
  std::size_t d_model = 0;
  std::size_t d_expert = 0;
  std::size_t experts = 0;
  std::size_t k = 0;
  RoutingKind kind = RoutingKind::kRouter;
  std::uint64_t seed = 0;

  std::string describe() const {
    std::ostringstream os;
    os << "T=" << tokens << " d_model=" << d_model << " d_expert=" << d_expert << " E=" << experts << " k=" << k
       << " routing=" << kind_name(kind);
    return os.str();
  }
};

// k cycles through {1, 2, 4} and the routing kind through all three kinds
// for each k; T spans [1, 256] with both ends always present.
MlpCase make_case(std::uint64_t seed, std::size_t i) {
  std::mt19937_64 rng(seed * 1000003 + i);
  static constexpr std::size_t kKs[] = {1, 2, 4};
  static constexpr std::size_t kModels[] = {8, 64};
  static constexpr std::size_t kExperts[] = {16, 128};
  MlpCase c;
  c.k = kKs[i % 3];
  c.experts = 8 * c.k;
  c.kind = static_cast<RoutingKind>((i / 3) % 3);
  c.tokens = i == 0 ? 1 : i == 1 ? 256 : std::uniform_int_distribution<std::size_t>(1, 256)(rng);
  c.d_model = kModels[rng() % 2];
  c.d_expert = kExperts[rng() % 2];
  c.seed = rng();
  return c;
}

struct MlpProblem {
  SmoeMlpConfig cfg;
  Matrix x;
  ExpertTensor w1;
  ExpertTensor w2;
  RoutingResult routing;
  GroupedOrder order;
};

MlpProblem make_problem(const MlpCase& c) {
  MlpProblem p;
  p.cfg = {c.d_model, c.d_expert, c.experts, c.k, Activation::kGelu};
  p.x = seeded_random_matrix(c.tokens, c.d_model, c.seed);
  p.w1 = seeded_random_experts(c.experts, c.d_model, c.d_expert, c.seed + 1,
                               1.0f / std::sqrt(static_cast<float>(c.d_model)));
  p.w2 = seeded_random_experts(c.experts, c.d_expert, c.d_model, c.seed + 2,
                               1.0f / std::sqrt(static_cast<float>(c.d_expert)));
  p.routing = make_routing(c.tokens, c.experts, c.k, c.kind, c.seed + 3);
  p.order = compute_grouped_order(p.routing, c.experts);
  return p;
}

// Reads consecutive blocks of a flat parameter vector.
class ThetaReader {
 public:
  explicit ThetaReader(std::span<const double> theta) : theta_(theta) {}
  oracle::RefMatrix matrix(std::size_t rows, std::size_t cols) {
    oracle::RefMatrix m(rows, cols);
    std::copy_n(take(rows * cols), rows * cols, m.data.begin());
    return m;
  }
  oracle::RefExperts experts(std::size_t e, std::size_t d_in, std::size_t d_out) {
    const double* src = take(e * d_in * d_out);
    return {e, d_in, d_out, std::vector<double>(src, src + e * d_in * d_out)};
  }

 private:
  const double* take(std::size_t n) {
    const double* p = theta_.data() + offset_;
    offset_ += n;
    return p;
  }
  std::span<const double> theta_;
  std::size_t offset_ = 0;
};

void append(std::vector<double>& theta, std::span<const float> values) {
  theta.insert(theta.end(), values.begin(), values.end());
}

// Compares consecutive gradient blocks with the matching slices of fd.
class GradientBlocks {
 public:
  GradientBlocks(Tally& tally, std::span<const double> fd, std::string prefix)
      : tally_(tally), fd_(fd), prefix_(std::move(prefix)) {}
  void next(std::span<const float> analytic, const char* what) {
    const auto slice = offset_ + analytic.size() <= fd_.size() ? fd_.subspan(offset_, analytic.size())
                                                               : std::span<const double>{};
    tally_.check_ratio(allclose_ratio(analytic, slice, 1e-3, 1e-5), prefix_ + " " + what);
    offset_ += analytic.size();
  }

 private:
  Tally& tally_;
  std::span<const double> fd_;
  std::string prefix_;
  std::size_t offset_ = 0;
};

std::size_t closed_form_padded_bytes(std::span<const std::size_t> counts, std::size_t block, std::size_t width) {
  std::size_t bytes = 0;
  for (const auto c : counts) bytes += (c + block - 1) / block * block * width * sizeof(float);
  return bytes;
}

const LedgerEntry* find_entry(const AllocationLedger& ledger, const std::string& name) {
  for (const auto& e : ledger.entries()) {
    if (e.buffer == name) return &e;
  }
  return nullptr;
}

}  // namespace

SuiteResult oracle_equivalence(const VerifyOptions& options) {
  Tally tally("oracle_equivalence");
  for (std::size_t i = 0; i < options.trials; ++i) {
    const MlpCase c = make_case(options.seed, i);
    const MlpProblem p = make_problem(c);
    const oracle::RefMatrix want = oracle::naive_smoe_mlp(p.x, p.w1, p.w2, p.routing, p.cfg.activation);
    double worst = 0.0;
    for (const Mode mode : {Mode::kInference, Mode::kTrain}) {
      const Matrix y = perturbed(
          smoe_mlp_forward(p.cfg, p.x, p.w1, p.w2, p.routing, p.order, {options.tile, nullptr, mode}).y, options);
      worst = std::max(worst, allclose_ratio(y.data(), want.data, 1e-5, 1e-7));
    }
    tally.check_ratio(worst, c.describe());
  }
  return tally.finish();
}

SuiteResult gradients(const VerifyOptions& options) {
  Tally tally("gradients");
  {
    const std::size_t tokens = 12, d_model = 8, d_expert = 16, experts = 4, k = 2;
    const SmoeMlpConfig cfg{d_model, d_expert, experts, k, Activation::kGelu};
    const std::uint64_t seed = options.seed + 11;
    const Matrix x = seeded_random_matrix(tokens, d_model, seed);
    const ExpertTensor w1 = seeded_random_experts(experts, d_model, d_expert, seed + 1, 0.5f);
    const ExpertTensor w2 = seeded_random_experts(experts, d_expert, d_model, seed + 2, 0.5f);
    const RoutingResult r = make_routing(tokens, experts, k, RoutingKind::kRouter, seed + 3);
    const GroupedOrder order = compute_grouped_order(r, experts);
    auto fwd = smoe_mlp_forward(cfg, x, w1, w2, r, order, {options.tile, nullptr, Mode::kTrain});
    const auto g = smoe_mlp_backward(*fwd.ctx, twice(fwd.y), w1, w2, {options.tile});

    std::vector<double> theta;
    append(theta, x.data());
    append(theta, w1.data());
    append(theta, w2.data());
    append(theta, r.p.data());
    const auto fd = oracle::finite_difference_gradient(
        [&](std::span<const double> t) {
          ThetaReader in(t);
          const auto xr = in.matrix(tokens, d_model);
          const auto w1r = in.experts(experts, d_model, d_expert);
          const auto w2r = in.experts(experts, d_expert, d_model);
          const auto pr = in.matrix(tokens, k);
          return sum_squares(oracle::naive_smoe_mlp(xr, w1r, w2r, r.expert_idx, pr, k, cfg.activation));
        },
        theta);
    GradientBlocks blocks(tally, fd, "SMoE MLP");
    blocks.next(perturbed(g.dx, options).data(), "dX");
    blocks.next(perturbed(g.dw1, options).data(), "dW1");
    blocks.next(perturbed(g.dw2, options).data(), "dW2");
    blocks.next(perturbed(g.dp, options).data(), "dp");
  }
  {
    const std::size_t batch = 2;
    const MomhaConfig cfg{8, 4, 4, 2, 3, 2, 8, true};
    const std::size_t tokens = batch * cfg.seq_len, d_attn = cfg.d_attn();
    const std::uint64_t seed = options.seed + 31;
    const MomhaWeights w{seeded_random_weights(cfg.d_model, d_attn, seed, 0.5f),
                         seeded_random_weights(cfg.d_model, d_attn, seed + 1, 0.5f),
                         seeded_random_experts(cfg.experts, cfg.d_model, d_attn, seed + 2, 0.5f),
                         seeded_random_experts(cfg.experts, d_attn, cfg.d_model, seed + 3, 0.5f)};
    const Matrix x = seeded_random_matrix(tokens, cfg.d_model, seed + 4);
    const RoutingResult r = make_routing(tokens, cfg.experts, cfg.k, RoutingKind::kRouter, seed + 5);
    const GroupedOrder order = compute_grouped_order(r, cfg.experts);
    auto fwd = momha_forward(cfg, x, w, r, order, {options.tile, nullptr, Mode::kTrain});
    const auto g = momha_backward(*fwd.ctx, twice(fwd.o), w, {options.tile});

    std::vector<double> theta;
    append(theta, x.data());
    append(theta, w.w_k.data());
    append(theta, w.w_v.data());
    append(theta, w.w_q.data());
    append(theta, w.w_o.data());
    append(theta, r.p.data());
    const auto fd = oracle::finite_difference_gradient(
        [&](std::span<const double> t) {
          ThetaReader in(t);
          const auto xr = in.matrix(tokens, cfg.d_model);
          oracle::RefMomhaWeights wr;
          wr.w_k = in.matrix(cfg.d_model, d_attn);
          wr.w_v = in.matrix(cfg.d_model, d_attn);
          wr.w_q = in.experts(cfg.experts, cfg.d_model, d_attn);
          wr.w_o = in.experts(cfg.experts, d_attn, cfg.d_model);
          const auto pr = in.matrix(tokens, cfg.k);
          return sum_squares(oracle::naive_momha(xr, wr, r.expert_idx, pr, cfg));
        },
        theta);
    GradientBlocks blocks(tally, fd, "MoMHA");
    blocks.next(perturbed(g.dx, options).data(), "dX");
    blocks.next(perturbed(g.dw_k, options).data(), "dW_K");
    blocks.next(perturbed(g.dw_v, options).data(), "dW_V");
    blocks.next(perturbed(g.dw_q, options).data(), "dW_Q");
    blocks.next(perturbed(g.dw_o, options).data(), "dW_O");
    blocks.next(perturbed(g.dp, options).data(), "dp");
  }
  return tally.finish();
}

SuiteResult padding_free(const VerifyOptions& options) {
  Tally tally("padding_free");
  const std::size_t tokens = 96, k = 2, experts = 16;
  for (const auto& [d_in, d_out] : {std::pair<std::size_t, std::size_t>{16, 8}, {7, 33}}) {
    for (const bool skewed : {false, true}) {
      std::vector<std::uint32_t> idx(tokens * k);
      for (std::size_t s = 0; s < idx.size(); ++s) {
        idx[s] = static_cast<std::uint32_t>(skewed ? s % k : s % experts);
      }
      Matrix p(tokens, k);
      p.fill(1.0f / static_cast<float>(k));
      const RoutingResult r = routing_from_assignments(tokens, k, idx, p);
      const GroupedOrder order = compute_grouped_order(r, experts);
      std::uint64_t want = 0;
      for (const auto count : order.bin_counts) want += count * d_in * d_out;

      const ExpertTensor w = seeded_random_experts(experts, d_in, d_out, options.seed + 1);
      const Matrix x = seeded_random_matrix(tokens, d_in, options.seed + 2);
      const Matrix xg = group(x, order, {}, k);
      const std::string label = std::string(skewed ? "skewed" : "uniform") + " d_in=" + std::to_string(d_in) +
                                " d_out=" + std::to_string(d_out);
      for (const LayoutFlag layout : {LayoutFlag{false, false}, LayoutFlag{false, true}, LayoutFlag{true, false},
                                      LayoutFlag{true, true}}) {
        const mac_counter::Scope scope;
        scatter2scatter(layout.grouped_in ? xg : x, w, order, k, layout, options.tile);
        tally.check(scope.count() == want, label + " scatter2scatter MACs " + std::to_string(scope.count()) +
                                               " != " + std::to_string(want));
      }
      {
        const mac_counter::Scope scope;
        scatter2scatter_combine(xg, w, order, 1, true, r.p, options.tile);
        tally.check(scope.count() == want, label + " combine MACs " + std::to_string(scope.count()));
      }
      {
        const Matrix yg = seeded_random_matrix(tokens * k, d_out, options.seed + 3);
        const mac_counter::Scope scope;
        group_xty(xg, yg, order, options.tile);
        tally.check(scope.count() == want, label + " group_xty MACs " + std::to_string(scope.count()));
      }
      {
        const SmoeMlpConfig cfg{d_in, d_out, experts, k, Activation::kGelu};
        const ExpertTensor w2 = seeded_random_experts(experts, d_out, d_in, options.seed + 4);
        const mac_counter::Scope scope;
        smoe_mlp_forward(cfg, x, w, w2, r, order, {options.tile, nullptr, Mode::kInference});
        tally.check(scope.count() == 2 * want, label + " SMoE MLP MACs " + std::to_string(scope.count()));
      }
    }
  }
  return tally.finish();
}

SuiteResult memory_footprint(const VerifyOptions& options) {
  Tally tally("memory_footprint");
  for (std::size_t i = 0; i < options.trials; ++i) {
    const MlpCase c = make_case(options.seed, i);
    const MlpProblem p = make_problem(c);
    const std::size_t slots = c.tokens * c.k;

    AllocationLedger fused;
    smoe_mlp_forward(p.cfg, p.x, p.w1, p.w2, p.routing, p.order, {options.tile, &fused, Mode::kInference});
    // With k = 1 the layer output itself has T*k rows.
    const std::size_t allowed = c.k == 1 ? 1 : 0;
    tally.check(fused.count_shape(slots, c.d_model) == allowed, c.describe() + ": T*k x d_model buffer in fused");

    for (const std::size_t block : {std::size_t{1}, std::size_t{64}, std::size_t{128}}) {
      AllocationLedger baseline;
      oracle::baseline_grouped_pipeline(p.x, p.w1, p.w2, p.routing, p.order, p.cfg.activation, {block, true},
                                        &baseline);
      const std::string label = c.describe() + " block=" + std::to_string(block);
      tally.check(fused.peak_bytes() < baseline.peak_bytes(),
                  label + ": fused peak " + std::to_string(fused.peak_bytes()) + " >= baseline " +
                      std::to_string(baseline.peak_bytes()));
      bool exact = true;
      for (const auto& [name, width] : {std::pair<std::string, std::size_t>{"baseline.grouped_input", c.d_model},
                                        {"baseline.grouped_hidden", c.d_expert},
                                        {"baseline.grouped_activation", c.d_expert},
                                        {"baseline.grouped_output", c.d_model}}) {
        const LedgerEntry* e = find_entry(baseline, name);
        exact = exact && e != nullptr && e->bytes == closed_form_padded_bytes(p.order.bin_counts, block, width);
      }
      tally.check(exact, label + ": padded bytes differ from closed form");
    }
  }
  return tally.finish();
}

SuiteResult buffer_reuse(const VerifyOptions& options) {
  namespace pl = parallel_linear;
  Tally tally("buffer_reuse");
  const std::size_t d_in = 8, d_out = 16;
  for (const std::size_t tokens : {std::size_t{12}, std::size_t{37}}) {
    for (const std::size_t k : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
      const std::size_t experts = 8 * k, slots = tokens * k;
      const RoutingResult r = make_routing(tokens, experts, k, RoutingKind::kRouter, options.seed + tokens + k);
      const GroupedOrder order = compute_grouped_order(r, experts);
      const ExpertTensor w = seeded_random_experts(experts, d_in, d_out, options.seed + 1);
      const Matrix x_tokens = seeded_random_matrix(tokens, d_in, options.seed + 2);
      const Matrix x_grouped = group(x_tokens, order, {}, k);
      for (const bool grouped_in : {false, true}) {
        for (const bool grouped_out : {false, true}) {
          for (const bool weighted : {false, true}) {
            if (weighted && grouped_out) continue;
            const LayoutFlag layout{grouped_in, grouped_out};
            const Matrix& x = grouped_in ? x_grouped : x_tokens;
            auto run = [&](pl::BufferReuse reuse, AllocationLedger& ledger) {
              auto fwd = pl::forward(x, w, order, weighted ? &r.p : nullptr, k, layout, {options.tile});
              fwd.ctx.scratch_grouped_dy = Matrix(slots, d_out);
              fwd.ctx.scratch_grouped_x = Matrix(slots, d_in);
              return pl::backward(fwd.ctx, twice(fwd.y), w, {options.tile, &ledger, "linear", reuse});
            };
            AllocationLedger reuse_ledger, plain_ledger;
            auto reused = run(pl::BufferReuse::kReuse, reuse_ledger);
            const auto plain = run(pl::BufferReuse::kNone, plain_ledger);
            reused.dx = perturbed(std::move(reused.dx), options);

            std::size_t slot_buffers = 0;
            for (const auto& e : reuse_ledger.entries()) {
              const bool weight_grad = e.buffer.ends_with(".dw");
              if (e.phase == Phase::kBackward && e.rows == slots && !weight_grad) ++slot_buffers;
            }
            std::ostringstream label;
            label << "T=" << tokens << " k=" << k << " grouped_in=" << grouped_in << " grouped_out=" << grouped_out
                  << " weighted=" << weighted;
            tally.check(slot_buffers == 0, label.str() + ": " + std::to_string(slot_buffers) +
                                               " T*k-row buffers allocated");
            tally.check(reused.dx == plain.dx && reused.dw == plain.dw && reused.dp == plain.dp,
                        label.str() + ": reuse changed the gradients");
          }
        }
      }
    }
  }
  return tally.finish();
}

SuiteResult layout_consistency(const VerifyOptions& options) {
  Tally tally("layout_consistency");
  std::mt19937_64 rng(options.seed + 606);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  for (std::size_t i = 0; i < 50; ++i) {
    const std::size_t k = std::size_t{1} << pick(0, 2);
    const std::size_t experts = 8 * k;
    const std::size_t tokens = pick(1, 128), d_in = pick(1, 40), d_out = pick(1, 40);
    const RoutingResult r = make_routing(tokens, experts, k, static_cast<RoutingKind>(i % 3), rng());
    const GroupedOrder order = compute_grouped_order(r, experts);
    const ExpertTensor w = seeded_random_experts(experts, d_in, d_out, rng());
    const Matrix x = seeded_random_matrix(tokens, d_in, rng());
    const Matrix xg = group(x, order, {}, k);
    const TileConfig tile{pick(1, 64), pick(1, 64), pick(1, 64), options.tile.worker_count};
    for (const bool grouped_in : {false, true}) {
      const Matrix& in = grouped_in ? xg : x;
      const Matrix grouped = perturbed(scatter2scatter(in, w, order, k, {grouped_in, true}, tile), options);
      const Matrix scattered = scatter2scatter(in, w, order, k, {grouped_in, false}, tile);
      std::ostringstream label;
      label << "T=" << tokens << " k=" << k << " d_in=" << d_in << " d_out=" << d_out
            << " grouped_in=" << grouped_in;
      tally.check(scatter(grouped, order) == scattered, label.str());
    }
  }
  return tally.finish();
}

SuiteResult reductions(const VerifyOptions& options) {
  Tally tally("reductions");
  constexpr double kTol = 1e-6;
  std::ostringstream os;
  for (const auto& [tokens, d_model, d_expert] :
       {std::tuple<std::size_t, std::size_t, std::size_t>{1, 8, 16}, {33, 8, 16}, {64, 64, 128}}) {
    const std::uint64_t seed = options.seed + tokens;
    const SmoeMlpConfig cfg{d_model, d_expert, 1, 1, Activation::kGelu};
    const Matrix x = seeded_random_matrix(tokens, d_model, seed);
    const ExpertTensor w1 = seeded_random_experts(1, d_model, d_expert, seed + 1,
                                                  1.0f / std::sqrt(static_cast<float>(d_model)));
    const ExpertTensor w2 = seeded_random_experts(1, d_expert, d_model, seed + 2,
                                                  1.0f / std::sqrt(static_cast<float>(d_expert)));
    const RoutingResult r = topk_select(softmax_rows(Matrix(tokens, 1)), 1);
    const GroupedOrder order = compute_grouped_order(r, 1);
    const WeightMatrix dense1(d_model, d_expert, {w1.data().begin(), w1.data().end()});
    const WeightMatrix dense2(d_expert, d_model, {w2.data().begin(), w2.data().end()});
    const Matrix dense = oracle::dense_mlp_reference(x, dense1, dense2, cfg.activation);
    for (const Mode mode : {Mode::kInference, Mode::kTrain}) {
      const Matrix y =
          perturbed(smoe_mlp_forward(cfg, x, w1, w2, r, order, {options.tile, nullptr, mode}).y, options);
      const double diff = max_abs_diff(y.data(), dense.data());
      tally.check_ratio(diff / kTol, "E=1 SMoE MLP vs dense MLP T=" + std::to_string(tokens));
    }

    const Matrix y = perturbed(scatter2scatter(x, w1, order, 1, {false, false}, options.tile), options);
    tally.check_ratio(max_abs_diff(y.data(), matmul(x, dense1).data()) / kTol,
                      "E=1 scatter2scatter vs matmul T=" + std::to_string(tokens));
  }
  for (const auto& [batch, seq_len, d_model, d_head, heads] :
       {std::tuple<std::size_t, std::size_t, std::size_t, std::size_t, std::size_t>{1, 1, 8, 4, 2},
        {2, 8, 8, 4, 2},
        {2, 16, 32, 8, 4}}) {
    const MomhaConfig cfg{d_model, d_head, heads, heads, 1, 1, seq_len, true};
    const std::size_t d_attn = cfg.d_attn();
    const std::uint64_t seed = options.seed + 77 + seq_len;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d_model));
    const MomhaWeights w{seeded_random_weights(d_model, d_attn, seed, scale),
                         seeded_random_weights(d_model, d_attn, seed + 1, scale),
                         seeded_random_experts(1, d_model, d_attn, seed + 2, scale),
                         seeded_random_experts(1, d_attn, d_model, seed + 3, scale)};
    const Matrix x = seeded_random_matrix(batch * seq_len, d_model, seed + 4);
    const RoutingResult r = topk_select(softmax_rows(Matrix(x.rows(), 1)), 1);
    const GroupedOrder order = compute_grouped_order(r, 1);
    auto first = [](const ExpertTensor& t) {
      return oracle::RefMatrix::from(WeightMatrix(t.d_in(), t.d_out(), {t.data().begin(), t.data().end()}));
    };
    const Matrix want = oracle::dense_mha_reference(oracle::RefMatrix::from(x), first(w.w_q),
                                                    oracle::RefMatrix::from(w.w_k), oracle::RefMatrix::from(w.w_v),
                                                    first(w.w_o), d_head, seq_len, true)
                            .to_float();
    for (const Mode mode : {Mode::kInference, Mode::kTrain}) {
      const Matrix o = perturbed(momha_forward(cfg, x, w, r, order, {options.tile, nullptr, mode}).o, options);
      tally.check_ratio(max_abs_diff(o.data(), want.data()) / kTol,
                        "E=1 MoMHA vs dense MHA B=" + std::to_string(batch) + " T=" + std::to_string(seq_len));
    }
  }
  return tally.finish();
}

SuiteResult sweep_structure(const VerifyOptions& options) {
  Tally tally("sweep_structure");
  const bench::GranularityPoint k4 = bench::derive_granularity(8192, 4);
  tally.check(k4.experts == 32 && k4.d_expert == 2048 && k4.g == 4.0, "k=4 with d_ff=8192 must give E=32, 2048, G=4");
  const bench::GranularityPoint k1 = bench::derive_granularity(8192, 1);
  tally.check(k1.d_expert == 8192 && k1.g == 1.0 && k1.experts == 8, "k=1 must give d_expert=d_ff and G=1");
  const bench::AttentionPoint a8 = bench::derive_attention(32, 8);
  tally.check(a8.heads_per_expert == 4 && a8.experts == 64, "attention k=8 must give h_expert=4, E=64");

  bench::SweepOptions paper;
  paper.preset = bench::granularity_preset("paper");
  paper.dry_run = true;
  const auto paper_rows = bench::sweep_granularity(paper);
  bool equal_macs = true;
  for (const auto& row : paper_rows) {
    if (row.record.spec.mode != "baseline") equal_macs = equal_macs && row.record.macs == paper_rows.back().record.macs;
  }
  tally.check(equal_macs, "paper preset: fused and dense MAC counts differ across k");

  // A measured miniature of the granularity sweep.
  bench::SweepOptions small;
  small.preset = {"verify", 16, 64, 24};
  small.seed = options.seed;
  small.repeats = 1;
  small.warmup = 0;
  small.workers = options.tile.worker_count;
  const auto rows = bench::sweep_granularity(small);
  const std::uint64_t dense_macs = rows.back().record.macs;
  for (const auto& row : rows) {
    if (row.record.spec.mode != "mlp") continue;
    const auto& s = row.record.spec;
    const std::uint64_t closed = 2ull * s.tokens * s.k * s.d_expert * s.d_model;
    tally.check(row.record.macs == closed && row.record.macs == dense_macs,
                "granularity k=" + std::to_string(s.k) + " MACs " + std::to_string(row.record.macs));
  }

  bench::SparsityOptions sparsity;
  sparsity.d_model = 8;
  sparsity.d_expert = 4;
  sparsity.tokens = 16;
  sparsity.ks = {1, 8, bench::kSparsityExperts};
  sparsity.seed = options.seed;
  sparsity.repeats = 1;
  sparsity.warmup = 0;
  sparsity.workers = options.tile.worker_count;
  const auto srows = bench::sweep_sparsity(sparsity);
  const std::uint64_t dense = srows.back().macs;
  tally.check(srows[2].macs == dense, "sparsity k=E fused MACs " + std::to_string(srows[2].macs) +
                                          " != dense " + std::to_string(dense));
  tally.check(srows[0].macs * bench::kSparsityExperts == dense, "sparsity k=1 MACs are not dense/64");
  return tally.finish();
}

std::vector<SuiteResult> run_all(const VerifyOptions& options) {
  return {oracle_equivalence(options), gradients(options),          padding_free(options),
          memory_footprint(options),   buffer_reuse(options),       layout_consistency(options),
          reductions(options),         sweep_structure(options)};
}

int report(std::ostream& os, const std::vector<SuiteResult>& results) {
  bool all_ok = true;
  for (const auto& r : results) {
    all_ok = all_ok && r.ok();
    os << (r.ok() ? "[PASS] " : "[FAIL] ") << std::left << std::setw(20) << r.name << std::right << ' '
       << r.passed << '/' << r.total;
    if (r.worst_ratio > 0.0) os << "  worst error/tolerance " << std::setprecision(3) << r.worst_ratio;
    os << "  " << std::fixed << std::setprecision(2) << r.seconds << " s" << std::defaultfloat
       << std::setprecision(6) << '\n';
    if (!r.ok() && !r.detail.empty()) os << "       first failure: " << r.detail << '\n';
  }
  return all_ok ? 0 : 1;
}

}  // namespace scattermoe::verify
