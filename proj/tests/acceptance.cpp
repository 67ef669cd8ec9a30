// SPDX-License-Identifier: Apache-2.0
//
// Acceptance report: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>

#include "scattermoe/verify.hpp"

#ifndef SMOE_BENCH_PATH
#error "SMOE_BENCH_PATH must name the smoe_bench executable"
#endif

namespace {

namespace verify = scattermoe::verify;

struct Line {
  bool ok;
  std::string what;
};

Line suite_line(const verify::SuiteResult& r, std::size_t min_cases, double max_seconds) {
  std::ostringstream os;
  os << r.name << ' ' << r.passed << '/' << r.total;
  if (r.worst_ratio > 0.0) os << " worst error/tolerance " << r.worst_ratio;
  os << ' ' << r.seconds << " s";
  bool ok = r.ok();
  if (r.total < min_cases) {
    os << " (needs at least " << min_cases << " cases)";
    ok = false;
  }
  if (max_seconds > 0.0 && r.seconds >= max_seconds) {
    os << " (limit " << max_seconds << " s)";
    ok = false;
  }
  if (!r.detail.empty()) os << " first failure: " << r.detail;
  return {ok, os.str()};
}

Line cli_verify_line() {
  const std::string cmd = std::string("\"") + SMOE_BENCH_PATH + "\" verify > /dev/null";
  const auto start = std::chrono::steady_clock::now();
  const int status = std::system(cmd.c_str());
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ostringstream os;
  os << "smoe_bench verify status " << status << ' ' << seconds << " s";
  return {status == 0 && seconds < 300.0, os.str()};
}

}  // namespace

int main() {
  verify::VerifyOptions opts;
  opts.trials = 100;

  const Line lines[] = {
      suite_line(verify::oracle_equivalence(opts), 100, 60.0),
      suite_line(verify::gradients(opts), 2, 120.0),
      suite_line(verify::padding_free(opts), 1, 0.0),
      suite_line(verify::memory_footprint(opts), 1, 0.0),
      suite_line(verify::buffer_reuse(opts), 1, 0.0),
      suite_line(verify::layout_consistency(opts), 50, 0.0),
      suite_line(verify::reductions(opts), 3, 0.0),
      suite_line(verify::sweep_structure(opts), 1, 0.0),
      cli_verify_line(),
  };

  int failures = 0;
  int n = 1;
  for (const Line& line : lines) {
    std::cout << "Criterion " << n++ << ": " << (line.ok ? "PASS" : "FAIL") << "  " << line.what << '\n';
    if (!line.ok) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
