// SPDX-License-Identifier: Apache-2.0

#include "scattermoe/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "scattermoe/kernels.hpp"
#include "scattermoe/mac_counter.hpp"
#include "scattermoe/moe_layers.hpp"
#include "scattermoe/oracle.hpp"

namespace scattermoe::bench {

const char* phase_name(BenchPhase phase) { return phase == BenchPhase::kTrain ? "train" : "forward"; }

BenchPhase parse_phase(const std::string& name) {
  if (name == "forward") return BenchPhase::kForward;
  if (name == "train") return BenchPhase::kTrain;
  throw std::invalid_argument("unknown phase '" + name + "'");
}

TimingStats summarize(std::vector<double> samples_ns) {
  if (samples_ns.empty()) return {};
  std::sort(samples_ns.begin(), samples_ns.end());
  const auto rank = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(samples_ns.size())));
    return samples_ns[std::clamp<std::size_t>(idx, 1, samples_ns.size()) - 1];
  };
  return {rank(0.5), rank(0.05), rank(0.95)};
}

TimingStats time_runs(const std::function<void()>& fn, std::size_t warmup, std::size_t repeats) {
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> samples;
  samples.reserve(repeats);
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    const auto stop = std::chrono::steady_clock::now();
    samples.push_back(static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count()));
  }
  return summarize(std::move(samples));
}

GranularityPoint derive_granularity(std::size_t d_ff, std::size_t k) {
  if (k == 0 || d_ff % k != 0) {
    throw std::invalid_argument("granularity: d_ff=" + std::to_string(d_ff) + " is not divisible by k=" +
                                std::to_string(k));
  }
  const std::size_t d_expert = d_ff / k;
  return {k, 8 * k, d_expert, static_cast<double>(d_ff) / static_cast<double>(d_expert)};
}

Preset granularity_preset(const std::string& name) {
  if (name == "paper") return {"paper", 4096, 8192, 30 * 2048};
  if (name == "desk") return {"desk", 256, 512, 256};
  throw std::invalid_argument("unknown preset '" + name + "'");
}

AttentionPreset attention_preset(const std::string& name) {
  if (name == "paper") return {"paper", 4096, 128, 32, 2048, 16};
  if (name == "desk") return {"desk", 128, 16, 8, 64, 2};
  throw std::invalid_argument("unknown preset '" + name + "'");
}

AttentionPoint derive_attention(std::size_t heads, std::size_t k) {
  if (k == 0 || heads % k != 0) {
    throw std::invalid_argument("attention: h=" + std::to_string(heads) + " is not divisible by k=" +
                                std::to_string(k));
  }
  return {k, 8 * k, heads / k};
}

std::vector<std::size_t> default_granularity_ks() { return {1, 2, 4, 8, 16}; }
std::vector<std::size_t> default_sparsity_ks() { return {1, 2, 4, 8, 16, 32, 64}; }
std::vector<std::size_t> default_attention_ks() { return {1, 2, 4, 8}; }

std::size_t default_workers() {
  if (const char* env = std::getenv("SCATTERMLP_WORKERS")) {
    char* end = nullptr;
    const unsigned long value = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && value > 0) return value;
  }
  return TileConfig::default_worker_count();
}

namespace {

TileConfig tile_for(std::size_t workers) {
  TileConfig tile;
  tile.worker_count = std::max<std::size_t>(workers, 1);
  return tile;
}

BenchRecord record_for(const BenchSpec& spec) {
  BenchRecord rec;
  rec.spec = spec;
  return rec;
}

double tokens_per_second(std::size_t tokens, double median_ns) {
  return median_ns > 0.0 ? static_cast<double>(tokens) * 1e9 / median_ns : 0.0;
}

// Records MACs for one run, then times it.
void measure(BenchRecord& rec, const std::function<void()>& fn) {
  {
    const mac_counter::Scope scope;
    fn();
    rec.macs = scope.count();
  }
  rec.timing = time_runs(fn, rec.spec.warmup, rec.spec.repeats);
  rec.tokens_per_s = tokens_per_second(rec.spec.tokens, rec.timing.median_ns);
}

struct MlpProblem {
  Matrix x;
  ExpertTensor w1;
  ExpertTensor w2;
  RoutingResult routing;
  GroupedOrder order;
};

MlpProblem make_mlp_problem(const BenchSpec& spec) {
  MlpProblem p;
  p.x = seeded_random_matrix(spec.tokens, spec.d_model, spec.seed);
  p.w1 = seeded_random_experts(spec.experts, spec.d_model, spec.d_expert, spec.seed + 1, 0.1f);
  p.w2 = seeded_random_experts(spec.experts, spec.d_expert, spec.d_model, spec.seed + 2, 0.1f);
  const Matrix logits = seeded_random_matrix(spec.tokens, spec.experts, spec.seed + 3);
  p.routing = topk_select(softmax_rows(logits), spec.k);
  p.order = compute_grouped_order(p.routing, spec.experts);
  return p;
}

BenchRecord run_fused_mlp(const BenchSpec& spec) {
  const MlpProblem p = make_mlp_problem(spec);
  const SmoeMlpConfig cfg{spec.d_model, spec.d_expert, spec.experts, spec.k, Activation::kGelu};
  const TileConfig tile = tile_for(spec.workers);
  const bool train = spec.phase == BenchPhase::kTrain;
  const Matrix dy = seeded_random_matrix(spec.tokens, spec.d_model, spec.seed + 4);

  auto run = [&](AllocationLedger* ledger) {
    LayerOptions opts{tile, ledger, train ? Mode::kTrain : Mode::kInference};
    auto result = smoe_mlp_forward(cfg, p.x, p.w1, p.w2, p.routing, p.order, opts);
    if (train) smoe_mlp_backward(*result.ctx, dy, p.w1, p.w2, {tile, ledger});
  };
  BenchRecord rec = record_for(spec);
  AllocationLedger ledger;
  run(&ledger);
  rec.peak_bytes = ledger.peak_bytes();
  measure(rec, [&] { run(nullptr); });
  return rec;
}

BenchRecord run_baseline_mlp(const BenchSpec& spec) {
  const MlpProblem p = make_mlp_problem(spec);
  const oracle::BaselineConfig cfg{spec.block_size, true};
  BenchRecord rec = record_for(spec);
  AllocationLedger ledger;
  oracle::baseline_grouped_pipeline(p.x, p.w1, p.w2, p.routing, p.order, Activation::kGelu, cfg, &ledger);
  rec.peak_bytes = ledger.peak_bytes();
  measure(rec, [&] {
    oracle::baseline_grouped_pipeline(p.x, p.w1, p.w2, p.routing, p.order, Activation::kGelu, cfg, nullptr);
  });
  return rec;
}

// Dense MLP of width d_ff = spec.d_expert * spec.k; spec.experts is echoed only.
BenchRecord run_dense_mlp(const BenchSpec& spec, std::size_t d_ff) {
  const Matrix x = seeded_random_matrix(spec.tokens, spec.d_model, spec.seed);
  const WeightMatrix w1 = seeded_random_weights(spec.d_model, d_ff, spec.seed + 1, 0.1f);
  const WeightMatrix w2 = seeded_random_weights(d_ff, spec.d_model, spec.seed + 2, 0.1f);
  const Matrix dy = seeded_random_matrix(spec.tokens, spec.d_model, spec.seed + 4);
  const bool train = spec.phase == BenchPhase::kTrain;

  auto run = [&](AllocationLedger* ledger) {
    Matrix pre = matmul(x, w1);
    ledger_allocate(ledger, "dense.hidden", pre.rows(), pre.cols(), Phase::kForward);
    Matrix hidden = pre;
    activate_inplace(Activation::kGelu, hidden.data());
    if (train) ledger_allocate(ledger, "dense.activation", hidden.rows(), hidden.cols(), Phase::kBackward);
    const Matrix y = matmul(hidden, w2);
    ledger_allocate(ledger, "dense.output", y.rows(), y.cols(), Phase::kForward);
    if (!train) return;
    const WeightMatrix dw2 = matmul_at_b(hidden, dy);
    Matrix dh = matmul_transposed(dy, w2);
    ledger_allocate(ledger, "dense.grad_hidden", dh.rows(), dh.cols(), Phase::kBackward);
    for (std::size_t i = 0; i < dh.size(); ++i) {
      dh.data()[i] = static_cast<float>(dh.data()[i] * activate_derivative(Activation::kGelu, pre.data()[i]));
    }
    const WeightMatrix dw1 = matmul_at_b(x, dh);
    const Matrix dx = matmul_transposed(dh, w1);
    ledger_allocate(ledger, "dense.dx", dx.rows(), dx.cols(), Phase::kBackward);
  };
  BenchRecord rec = record_for(spec);
  AllocationLedger ledger;
  run(&ledger);
  rec.peak_bytes = ledger.peak_bytes();
  measure(rec, [&] { run(nullptr); });
  return rec;
}

// Closed-form counts for dry runs.
std::uint64_t mlp_forward_macs(std::size_t rows, std::size_t d_model, std::size_t width) {
  return 2ull * rows * d_model * width;
}

void write_timing(std::ostream& os, const BenchRecord& r) {
  os << std::fixed << std::setprecision(0) << r.timing.median_ns << ',' << r.timing.p5_ns << ','
     << r.timing.p95_ns << ',' << r.macs << ',' << r.peak_bytes << ',' << std::setprecision(1) << r.tokens_per_s;
  os.unsetf(std::ios::floatfield);
  os << std::setprecision(6);
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<GranularityRow> sweep_granularity(const SweepOptions& options) {
  const Preset& preset = options.preset;
  const std::vector<std::size_t> ks = options.ks.empty() ? default_granularity_ks() : options.ks;
  std::vector<GranularityRow> rows;

  BenchSpec base;
  base.d_model = preset.d_model;
  base.tokens = preset.tokens;
  base.seed = options.seed;
  base.repeats = options.repeats;
  base.warmup = options.warmup;
  base.workers = options.workers;
  base.block_size = options.block_size;
  base.phase = options.phase;

  BenchSpec dense_spec = base;
  dense_spec.mode = "dense";
  dense_spec.d_expert = preset.d_ff;
  dense_spec.experts = 1;
  dense_spec.k = 1;
  BenchRecord dense = record_for(dense_spec);
  if (options.dry_run) {
    dense.macs = mlp_forward_macs(preset.tokens, preset.d_model, preset.d_ff);
    dense.peak_bytes = (preset.tokens * preset.d_ff + preset.tokens * preset.d_model) * sizeof(float);
  } else {
    dense = run_dense_mlp(dense_spec, preset.d_ff);
  }

  for (const std::size_t k : ks) {
    const GranularityPoint pt = derive_granularity(preset.d_ff, k);
    BenchSpec spec = base;
    spec.k = k;
    spec.experts = pt.experts;
    spec.d_expert = pt.d_expert;

    std::vector<std::string> modes{"mlp"};
    if (options.phase == BenchPhase::kForward && !options.dry_run) modes.push_back("baseline");
    for (const auto& mode : modes) {
      spec.mode = mode;
      GranularityRow row;
      row.d_ff = preset.d_ff;
      row.g = pt.g;
      if (options.dry_run) {
        row.record.spec = spec;
        if (mode == "mlp") {
          row.record.macs = mlp_forward_macs(spec.tokens * k, spec.d_model, spec.d_expert);
          row.record.peak_bytes = (spec.tokens * k * spec.d_expert + spec.tokens * spec.d_model) * sizeof(float);
        }
      } else {
        row.record = mode == "mlp" ? run_fused_mlp(spec) : run_baseline_mlp(spec);
        row.dense_normalized =
            row.record.timing.median_ns > 0.0 ? dense.timing.median_ns / row.record.timing.median_ns : 0.0;
      }
      rows.push_back(std::move(row));
    }
  }
  GranularityRow dense_row;
  dense_row.record = dense;
  dense_row.d_ff = preset.d_ff;
  dense_row.g = 1.0;
  dense_row.dense_normalized = options.dry_run ? 0.0 : 1.0;
  rows.push_back(std::move(dense_row));
  return rows;
}

void write_granularity_csv(std::ostream& os, const std::vector<GranularityRow>& rows) {
  os << "mode,phase,k,E,d_model,d_ff,d_expert,G,T,median_ns,p5_ns,p95_ns,macs,peak_bytes,tokens_per_s,"
        "dense_normalized\n";
  for (const auto& row : rows) {
    const BenchSpec& s = row.record.spec;
    os << s.mode << ',' << phase_name(s.phase) << ',' << s.k << ',' << s.experts << ',' << s.d_model << ','
       << row.d_ff << ',' << s.d_expert << ',' << row.g << ',' << s.tokens << ',';
    write_timing(os, row.record);
    os << ',' << std::setprecision(4) << row.dense_normalized << std::setprecision(6) << '\n';
  }
}

std::vector<BenchRecord> sweep_sparsity(const SparsityOptions& options) {
  const std::vector<std::size_t> ks = options.ks.empty() ? default_sparsity_ks() : options.ks;
  std::vector<BenchRecord> rows;
  BenchSpec base;
  base.d_model = options.d_model;
  base.d_expert = options.d_expert;
  base.experts = kSparsityExperts;
  base.tokens = options.tokens;
  base.seed = options.seed;
  base.repeats = options.repeats;
  base.warmup = options.warmup;
  base.workers = options.workers;
  base.phase = options.phase;

  for (const std::size_t k : ks) {
    if (k == 0 || k > kSparsityExperts) {
      throw std::invalid_argument("sparsity: k=" + std::to_string(k) + " outside [1, 64]");
    }
    BenchSpec spec = base;
    spec.mode = "mlp";
    spec.k = k;
    if (options.dry_run) {
      BenchRecord rec = record_for(spec);
      rec.macs = mlp_forward_macs(spec.tokens * k, spec.d_model, spec.d_expert);
      rows.push_back(rec);
    } else {
      rows.push_back(run_fused_mlp(spec));
    }
  }
  // Dense comparator with d_ff = E * d_expert; echoed as k = E.
  BenchSpec dense = base;
  dense.mode = "dense";
  dense.k = kSparsityExperts;
  const std::size_t d_ff = kSparsityExperts * options.d_expert;
  if (options.dry_run) {
    BenchRecord rec = record_for(dense);
    rec.macs = mlp_forward_macs(dense.tokens, dense.d_model, d_ff);
    rows.push_back(rec);
  } else {
    rows.push_back(run_dense_mlp(dense, d_ff));
  }
  return rows;
}

void write_sparsity_csv(std::ostream& os, const std::vector<BenchRecord>& rows) {
  os << "mode,k,E,d_model,d_expert,T,median_ns,p5_ns,p95_ns,macs,peak_bytes,tokens_per_s\n";
  for (const auto& r : rows) {
    const BenchSpec& s = r.spec;
    os << s.mode << ',' << s.k << ',' << s.experts << ',' << s.d_model << ',' << s.d_expert << ',' << s.tokens
       << ',';
    write_timing(os, r);
    os << '\n';
  }
}

// ---------------------------------------------------------------------------

namespace {

struct MomhaProblem {
  MomhaConfig cfg;
  Matrix x;
  MomhaWeights w;
  RoutingResult routing;
  GroupedOrder order;
};

MomhaProblem make_momha_problem(const AttentionPreset& preset, std::size_t k, std::uint64_t seed) {
  const AttentionPoint pt = derive_attention(preset.heads, k);
  MomhaProblem p;
  p.cfg = {preset.d_model, preset.d_head, preset.heads, pt.heads_per_expert, pt.experts, k, preset.seq_len, true};
  const std::size_t tokens = preset.batch * preset.seq_len;
  const std::size_t d_attn = p.cfg.d_attn();
  p.x = seeded_random_matrix(tokens, preset.d_model, seed);
  p.w = {seeded_random_weights(preset.d_model, d_attn, seed + 1, 0.1f),
         seeded_random_weights(preset.d_model, d_attn, seed + 2, 0.1f),
         seeded_random_experts(pt.experts, preset.d_model, d_attn, seed + 3, 0.1f),
         seeded_random_experts(pt.experts, d_attn, preset.d_model, seed + 4, 0.1f)};
  const Matrix logits = seeded_random_matrix(tokens, pt.experts, seed + 5);
  p.routing = topk_select(softmax_rows(logits), k);
  p.order = compute_grouped_order(p.routing, pt.experts);
  return p;
}

// Routing with explicit grouped copies: X is grouped before the query
// projection and the attention output is grouped before the output
// projection, each result scattered back afterwards.
Matrix baseline_momha(const MomhaProblem& p, const TileConfig& tile, AllocationLedger* ledger) {
  const std::size_t k = p.cfg.k;
  const Matrix keys = matmul(p.x, p.w.w_k);
  ledger_allocate(ledger, "baseline.k", keys.rows(), keys.cols(), Phase::kForward);
  const Matrix values = matmul(p.x, p.w.w_v);
  ledger_allocate(ledger, "baseline.v", values.rows(), values.cols(), Phase::kForward);

  const Matrix xg = group(p.x, p.order, {}, k);
  const auto xg_id = ledger_allocate(ledger, "baseline.grouped_x", xg.rows(), xg.cols(), Phase::kForward);
  const Matrix qg = scatter2scatter(xg, p.w.w_q, p.order, 1, {true, true}, tile);
  const auto qg_id = ledger_allocate(ledger, "baseline.grouped_q", qg.rows(), qg.cols(), Phase::kForward);
  ledger_release(ledger, xg_id);
  const Matrix q = scatter(qg, p.order);
  const auto q_id = ledger_allocate(ledger, "baseline.q", q.rows(), q.cols(), Phase::kForward);
  ledger_release(ledger, qg_id);

  std::vector<std::size_t> slot_token(p.order.slots());
  for (std::size_t s = 0; s < slot_token.size(); ++s) slot_token[s] = s / k;
  const Matrix mixed = attention(q, keys, values, slot_token, {p.cfg.d_head, p.cfg.seq_len, p.cfg.causal}, tile);
  const auto mixed_id = ledger_allocate(ledger, "baseline.mixed", mixed.rows(), mixed.cols(), Phase::kForward);
  ledger_release(ledger, q_id);

  const Matrix mg = group(mixed, p.order, {}, 1);
  const auto mg_id = ledger_allocate(ledger, "baseline.grouped_mixed", mg.rows(), mg.cols(), Phase::kForward);
  ledger_release(ledger, mixed_id);
  const Matrix og = scatter2scatter(mg, p.w.w_o, p.order, 1, {true, true}, tile);
  const auto og_id = ledger_allocate(ledger, "baseline.grouped_o", og.rows(), og.cols(), Phase::kForward);
  ledger_release(ledger, mg_id);
  const Matrix slots = scatter(og, p.order);
  const auto slots_id = ledger_allocate(ledger, "baseline.slot_o", slots.rows(), slots.cols(), Phase::kForward);
  ledger_release(ledger, og_id);

  Matrix y(p.x.rows(), slots.cols());
  std::vector<double> acc(slots.cols());
  for (std::size_t t = 0; t < y.rows(); ++t) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const double weight = p.routing.p(t, j);
      const auto src = slots.row(t * k + j);
      for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += weight * src[c];
    }
    for (std::size_t c = 0; c < acc.size(); ++c) y(t, c) = static_cast<float>(acc[c]);
  }
  ledger_allocate(ledger, "baseline.output", y.rows(), y.cols(), Phase::kForward);
  ledger_release(ledger, slots_id);
  return y;
}

}  // namespace

std::vector<AttentionRow> bench_attention(const AttentionOptions& options) {
  const AttentionPreset& preset = options.preset;
  const std::vector<std::size_t> ks = options.ks.empty() ? default_attention_ks() : options.ks;
  const TileConfig tile = tile_for(options.workers);
  const std::size_t tokens = preset.batch * preset.seq_len;
  std::vector<AttentionRow> rows;

  for (const std::size_t k : ks) {
    const AttentionPoint pt = derive_attention(preset.heads, k);
    BenchSpec spec;
    spec.d_model = preset.d_model;
    spec.d_expert = pt.heads_per_expert * preset.d_head;
    spec.experts = pt.experts;
    spec.k = k;
    spec.tokens = tokens;
    spec.seed = options.seed;
    spec.repeats = options.repeats;
    spec.warmup = options.warmup;
    spec.workers = options.workers;

    AttentionRow fused_row;
    fused_row.heads = preset.heads;
    fused_row.heads_per_expert = pt.heads_per_expert;
    fused_row.d_head = preset.d_head;
    AttentionRow baseline_row = fused_row;
    fused_row.record.spec = spec;
    fused_row.record.spec.mode = "momha";
    baseline_row.record.spec = spec;
    baseline_row.record.spec.mode = "momha_baseline";

    if (options.dry_run) {
      // K, V and the two routed projections.
      const std::uint64_t macs = 2ull * tokens * preset.d_model * spec.d_expert * (1 + k);
      fused_row.record.macs = baseline_row.record.macs = macs;
    } else {
      const MomhaProblem p = make_momha_problem(preset, k, options.seed);
      AllocationLedger fused_ledger;
      const Matrix fused =
          momha_forward(p.cfg, p.x, p.w, p.routing, p.order, {tile, &fused_ledger, Mode::kInference}).o;
      AllocationLedger baseline_ledger;
      const Matrix base = baseline_momha(p, tile, &baseline_ledger);
      const double diff = max_abs_diff(fused.data(), base.data());
      fused_row.max_abs_diff = baseline_row.max_abs_diff = diff;
      fused_row.record.peak_bytes = fused_ledger.peak_bytes();
      baseline_row.record.peak_bytes = baseline_ledger.peak_bytes();
      measure(fused_row.record,
              [&] { momha_forward(p.cfg, p.x, p.w, p.routing, p.order, {tile, nullptr, Mode::kInference}); });
      measure(baseline_row.record, [&] { baseline_momha(p, tile, nullptr); });
    }
    rows.push_back(std::move(fused_row));
    rows.push_back(std::move(baseline_row));
  }
  return rows;
}

void write_attention_csv(std::ostream& os, const std::vector<AttentionRow>& rows) {
  os << "mode,k,E,h,h_expert,d_head,d_model,T,median_ns,p5_ns,p95_ns,macs,peak_bytes,tokens_per_s,max_abs_diff\n";
  for (const auto& row : rows) {
    const BenchSpec& s = row.record.spec;
    os << s.mode << ',' << s.k << ',' << s.experts << ',' << row.heads << ',' << row.heads_per_expert << ','
       << row.d_head << ',' << s.d_model << ',' << s.tokens << ',';
    write_timing(os, row.record);
    os << ',' << std::scientific << std::setprecision(3) << row.max_abs_diff << std::defaultfloat
       << std::setprecision(6) << '\n';
  }
}

void print_table(std::ostream& os, const std::string& csv) {
  std::vector<std::vector<std::string>> cells;
  std::istringstream lines(csv);
  std::string line;
  while (std::getline(lines, line)) {
    std::vector<std::string> row;
    std::istringstream fields(line);
    std::string field;
    while (std::getline(fields, field, ',')) row.push_back(field);
    cells.push_back(std::move(row));
  }
  std::vector<std::size_t> widths;
  for (const auto& row : cells) {
    widths.resize(std::max(widths.size(), row.size()), 0);
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  }
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      os << std::setw(static_cast<int>(widths[c])) << row[c] << (c + 1 < row.size() ? "  " : "\n");
    }
  }
}

}  // namespace scattermoe::bench
