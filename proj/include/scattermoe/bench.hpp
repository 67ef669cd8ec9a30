// SPDX-License-Identifier: Apache-2.0
//
// Timing harness and the granularity, sparsity and attention sweeps.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace scattermoe::bench {

enum class BenchPhase { kForward, kTrain };

const char* phase_name(BenchPhase phase);
BenchPhase parse_phase(const std::string& name);

struct TimingStats {
  double median_ns = 0.0;
  double p5_ns = 0.0;
  double p95_ns = 0.0;
};

/// Nearest-rank percentiles of the samples. Empty input gives zeros.
TimingStats summarize(std::vector<double> samples_ns);

/// Runs `fn` `warmup` times untimed, then `repeats` timed runs.
TimingStats time_runs(const std::function<void()>& fn, std::size_t warmup, std::size_t repeats);

struct BenchSpec {
  /// "mlp", "baseline", "dense", "momha" or "momha_baseline".
  std::string mode = "mlp";
  std::size_t d_model = 0;
  std::size_t d_expert = 0;
  std::size_t experts = 0;
  std::size_t k = 0;
  std::size_t tokens = 0;
  std::uint64_t seed = 0;
  std::size_t repeats = 20;
  std::size_t warmup = 10;
  std::size_t workers = 1;
  std::size_t block_size = 128;
  BenchPhase phase = BenchPhase::kForward;
};

struct BenchRecord {
  BenchSpec spec;
  TimingStats timing;
  std::uint64_t macs = 0;
  std::size_t peak_bytes = 0;
  double tokens_per_s = 0.0;
};

/// Expert shape for a fixed dense width: d_expert = d_ff / k, E = 8k, G = d_ff / d_expert.
struct GranularityPoint {
  std::size_t k = 0;
  std::size_t experts = 0;
  std::size_t d_expert = 0;
  double g = 0.0;
};
GranularityPoint derive_granularity(std::size_t d_ff, std::size_t k);

struct Preset {
  std::string name;
  std::size_t d_model = 0;
  std::size_t d_ff = 0;
  std::size_t tokens = 0;
};
/// "paper" (d_model 4096, d_ff 8192) or "desk" (d_model 256, d_ff 512).
Preset granularity_preset(const std::string& name);

struct SweepOptions {
  Preset preset;
  std::vector<std::size_t> ks;
  std::uint64_t seed = 0;
  std::size_t repeats = 20;
  std::size_t warmup = 10;
  std::size_t workers = 1;
  std::size_t block_size = 128;
  BenchPhase phase = BenchPhase::kForward;
  /// Emit derived rows with closed-form MAC counts but run nothing.
  bool dry_run = false;
};

// ---------------------------------------------------------------------------
// Granularity: fixed d_ff, k varies, E = 8k.

struct GranularityRow {
  BenchRecord record;
  std::size_t d_ff = 0;
  double g = 0.0;
  /// Dense median time divided by this row's median time.
  double dense_normalized = 0.0;
};

std::vector<std::size_t> default_granularity_ks();
std::vector<GranularityRow> sweep_granularity(const SweepOptions& options);
void write_granularity_csv(std::ostream& os, const std::vector<GranularityRow>& rows);

// ---------------------------------------------------------------------------
// Sparsity: E fixed at 64, k varies, dense comparator of width E * d_expert.

inline constexpr std::size_t kSparsityExperts = 64;

struct SparsityOptions {
  std::size_t d_model = 64;
  std::size_t d_expert = 16;
  std::size_t tokens = 128;
  std::vector<std::size_t> ks;
  std::uint64_t seed = 0;
  std::size_t repeats = 20;
  std::size_t warmup = 10;
  std::size_t workers = 1;
  BenchPhase phase = BenchPhase::kForward;
  bool dry_run = false;
};

std::vector<std::size_t> default_sparsity_ks();
std::vector<BenchRecord> sweep_sparsity(const SparsityOptions& options);
/// Header `mode,k,E,d_model,d_expert,T,median_ns,p5_ns,p95_ns,macs,peak_bytes,tokens_per_s`.
void write_sparsity_csv(std::ostream& os, const std::vector<BenchRecord>& rows);

// ---------------------------------------------------------------------------
// Attention: h fixed, h_expert = h / k, E = 8k.

struct AttentionPreset {
  std::string name;
  std::size_t d_model = 0;
  std::size_t d_head = 0;
  std::size_t heads = 0;
  std::size_t seq_len = 0;
  std::size_t batch = 0;
};
/// "paper" (d_model 4096, d_head 128, h 32) or "desk" (d_model 128, d_head 16, h 8).
AttentionPreset attention_preset(const std::string& name);

struct AttentionPoint {
  std::size_t k = 0;
  std::size_t experts = 0;
  std::size_t heads_per_expert = 0;
};
AttentionPoint derive_attention(std::size_t heads, std::size_t k);

struct AttentionOptions {
  AttentionPreset preset;
  std::vector<std::size_t> ks;
  std::uint64_t seed = 0;
  std::size_t repeats = 20;
  std::size_t warmup = 10;
  std::size_t workers = 1;
  bool dry_run = false;
};

struct AttentionRow {
  BenchRecord record;
  std::size_t heads = 0;
  std::size_t heads_per_expert = 0;
  std::size_t d_head = 0;
  /// Largest |fused - baseline| over the outputs.
  double max_abs_diff = 0.0;
};

std::vector<std::size_t> default_attention_ks();
std::vector<AttentionRow> bench_attention(const AttentionOptions& options);
void write_attention_csv(std::ostream& os, const std::vector<AttentionRow>& rows);

// ---------------------------------------------------------------------------

/// Human-readable table of any CSV text produced above.
void print_table(std::ostream& os, const std::string& csv);

/// Worker count from SCATTERMLP_WORKERS, else the hardware default.
std::size_t default_workers();

}  // namespace scattermoe::bench
