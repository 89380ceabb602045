#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "bcm/analysis.hpp"
#include "bcm/imputation.hpp"
#include "bcm/inference.hpp"
#include "bcm/sim.hpp"
#include "bcm/trial_data.hpp"

namespace bcm {

// One estimator with its settings. Recognized names: bcm, bcm-cmi-jk,
// bcm-cmi-bs, bcm-mi-bs, rd, rbi-j2r, rbi-cir, ancova-complete.
struct MethodConfig {
  std::string name;
  PriorSpec prior;
  int bootstrap = 100;    // B for bootstrap-based methods
  int imputations = 25;   // M for rd / bcm-mi-bs
  int rbi_imputations = 50;
  McmcSettings mcmc;      // bcm posterior settings
  RbiSettings rbi;

  std::string label() const;
  void apply_paper_scale();
};

MethodConfig method_from_name(const std::string& name);
bool method_needs_complete_data(const std::string& name);

// Runs one estimator on one replication. ancova-complete consumes the
// complete view; everything else consumes the masked view.
EstimateReport run_method(const MethodConfig& method,
                          const TrialDataset& masked,
                          const TrialDataset& complete, std::uint64_t seed);

struct BenchmarkConfig {
  SimScenario scenario;
  std::vector<MethodConfig> methods;
  int n_reps = 500;
  std::uint64_t master_seed = 1;
  int jobs = 0;  // <= 0: hardware concurrency
  long truth_n_mc = 2000000;
  std::string log_path;    // optional per-replication log CSV
  bool resume = false;     // reuse rows already present in log_path
  std::ostream* progress = nullptr;
};

struct RepResult {
  int rep = 0;
  std::string method;
  EstimateReport report;
  bool ok = false;
  std::string error;
};

struct BenchmarkRow {
  std::string method;
  std::string prior;
  double pct_missing = 0.0;
  double mean_est = 0.0;
  double emp_se = 0.0;
  double est_se = 0.0;
  double coverage = 0.0;  // percent
  double mcse_mean = 0.0;
  int n_reps = 0;
  int n_fail = 0;
};

struct BenchmarkTable {
  double truth = 0.0;
  std::string scenario;
  int n_reps = 0;
  std::uint64_t master_seed = 0;
  std::vector<BenchmarkRow> rows;

  std::string to_csv() const;
  std::string pretty() const;
};

BenchmarkTable run_benchmark(const BenchmarkConfig& cfg);

// Aggregates per-replication rows into the table; exposed so the log can be
// re-aggregated independently.
BenchmarkTable aggregate_results(const BenchmarkConfig& cfg,
                                 const std::vector<RepResult>& results,
                                 double truth);

std::string rep_results_to_csv(const std::vector<RepResult>& results);
std::vector<RepResult> rep_results_from_csv(const std::string& text);

// Full benchmark configuration from a JSON config file (scenario + priors +
// methods + reps/seed).
BenchmarkConfig benchmark_config_from_json(const std::string& text);

}  // namespace bcm
