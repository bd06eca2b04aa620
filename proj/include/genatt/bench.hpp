#pragma once

#include <string>
#include <vector>

#include "genatt/data.hpp"

namespace genatt {

struct BenchOptions {
  std::vector<int> n_grid = {20, 30, 50, 100, 200};
  std::vector<int> t_grid = {10, 25, 50};
  int fixed_T = 20;  // diffusion steps for the n sweep
  int t_sweep_n = 50;
  int d = 16;
  int max_users = 32;
  int batch = 32;
  int reps = 2;
  std::uint64_t seed = 7;
};

struct BenchRow {
  std::string mode;
  int n = 0;
  int T = 0;
  double seconds_per_epoch = 0.0;
  std::string complexity;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  bool diffusion_monotone_in_T = false;
};

// Measures one-epoch wall time per (mode, n) and, for diffusion, across T.
// Times are hardware-dependent and report-only; the only asserted property is
// that diffusion epoch time is non-decreasing in T.
BenchReport run_bench(const InteractionLog& log, const BenchOptions& opts);

void write_bench_csv(const BenchReport& report, const std::string& path);

}  // namespace genatt
