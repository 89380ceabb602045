#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "bcm/causal_model.hpp"
#include "bcm/trial_data.hpp"

namespace bcm {

// Logistic discontinuation hazard walked at post-baseline visits 2..j_max:
// a success at visit w makes w the first post-ICE visit, so d = w - 1.
// Coefficient index h corresponds to visit w = h + 2; the linear predictor is
// intercept + beta_base * baseline + beta_prev * (outcome at visit w - 1).
struct HazardSpec {
  std::vector<double> beta_base_active;
  std::vector<double> beta_prev_active;
  std::vector<double> beta_base_control;
  std::vector<double> beta_prev_control;
  double intercept = -15.0;
};

struct SimScenario {
  std::string name;
  VisitSchedule schedule;       // weeks including baseline
  Eigen::VectorXd mean_active;  // per-visit means including baseline
  Eigen::VectorXd mean_control;
  Eigen::VectorXd variances;    // per-visit, including baseline
  double rho = 0.8;
  int n_per_arm = 500;
  HazardSpec hazard;
  double true_k0 = 0.0;
  double miss_prob = 0.0;

  int j_max() const { return schedule.j_max(); }
  void validate() const;
};

// Model-scale parameters implied by the generator: the joint covariance over
// all visits is conditioned on baseline, which yields the per-visit baseline
// coefficients, the residual covariance and the baseline-free intercepts.
CausalParams true_params(const SimScenario& sc);

// One simulated trial; outcomes after an ICE in the active arm follow the
// causal conditional with k0 = true_k0, control outcomes are unchanged, and
// whole post-ICE blocks go missing with probability miss_prob (MCAR).
TrialDataset simulate_trial(const SimScenario& sc, std::uint64_t seed);

// The same replication with and without the missingness mask (identical
// outcome draws); the complete view feeds complete-data analyses.
std::pair<TrialDataset, TrialDataset> simulate_trial_views(
    const SimScenario& sc, std::uint64_t seed);

// Monte Carlo oracle for the treatment-policy effect at the final visit:
// difference in mean final-visit outcome over n_mc generated patients per
// arm with no missingness.
double true_policy_effect(const SimScenario& sc, long n_mc);

const std::vector<std::string>& preset_names();
SimScenario preset_scenario(const std::string& name);

SimScenario scenario_from_json(const std::string& text);
std::string scenario_to_json(const SimScenario& sc);

}  // namespace bcm
