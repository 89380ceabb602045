#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bcm/analysis.hpp"
#include "bcm/causal_model.hpp"
#include "bcm/inference.hpp"
#include "bcm/rng.hpp"
#include "bcm/trial_data.hpp"

namespace bcm {

enum class Provenance {
  conditional_mean,
  stochastic_draw,
  rd,
  rbi_j2r,
  rbi_cir,
};

const char* provenance_name(Provenance p);

// A dataset with every outcome filled in. Pre-existing observed cells are
// preserved bit-exactly by every imputation routine.
struct CompletedDataset {
  TrialDataset data;
  Provenance provenance = Provenance::conditional_mean;
};

void write_completed_csv(const CompletedDataset& cds, const std::string& path);

// Deterministic fill: active-arm missing post-ICE blocks take the causal
// conditional mean; control-arm missing cells take the MAR conditional mean
// given that patient's observed outcomes.
CompletedDataset conditional_mean_impute(const TrialDataset& ds,
                                         const CausalParams& p);

// Stochastic version of conditional_mean_impute.
CompletedDataset draw_imputation(const TrialDataset& ds, const CausalParams& p,
                                 RngStream& rng);

struct RdSettings {
  bool use_pattern_covariate = true;  // include weeks-since-discontinuation
};

// Retrieved-dropout sequential imputation: per visit, a normal linear
// regression of the outcome on treatment, time since discontinuation,
// baseline and all earlier outcomes, fit jointly across arms on rows with the
// visit observed; parameters are drawn from the standard Bayesian linear
// regression posterior for each imputation.
std::vector<CompletedDataset> rd_impute(const TrialDataset& ds, int m,
                                        RngStream& rng,
                                        const RdSettings& settings = {});

enum class RbiVariant { j2r, cir };

struct RbiSettings {
  int warmup = 200;
  int thin = 50;
  int chains = 1;
};

// Classical reference-based imputation: the imputation model is fitted
// without the active-arm post-ICE observations and with k0 fixed (0 for J2R,
// 1 for CIR); each retained posterior draw imputes the missing blocks from
// the causal conditional distribution given all observed data.
std::vector<CompletedDataset> rbi_impute(const TrialDataset& ds,
                                         RbiVariant variant, int m,
                                         const PriorSpec& prior,
                                         const RbiSettings& settings,
                                         std::uint64_t seed);

struct PooledResult {
  double estimate = 0.0;
  double within_var = 0.0;
  double between_var = 0.0;
  double total_var = 0.0;
  double df = 0.0;  // Barnard-Rubin
  int m = 0;
};

PooledResult rubins_rules(const std::vector<double>& points,
                          const std::vector<double>& variances,
                          double complete_df);

// ANCOVA on each completed dataset pooled with Rubin's rules.
EstimateReport pooled_ancova(const std::vector<CompletedDataset>& sets,
                             const std::string& method);

// Multiple imputation with bootstrap standard errors: each stratified
// patient-level resample is MAP-fitted, imputed m times and analysed; the
// point estimate applies the same procedure to the original data.
EstimateReport bcm_mi_bootstrap(const TrialDataset& ds, const PriorSpec& prior,
                                int n_bootstrap, int m, std::uint64_t seed);

enum class SeMethod { jackknife, bootstrap };

// Conditional-mean imputation with jackknife or bootstrap standard errors.
EstimateReport bcm_cmi(const TrialDataset& ds, const PriorSpec& prior,
                       SeMethod se_method, int n_bootstrap, std::uint64_t seed);

}  // namespace bcm
