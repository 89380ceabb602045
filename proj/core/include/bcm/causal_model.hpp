#pragma once

#include <string>

#include <Eigen/Core>

#include "bcm/gaussian.hpp"

namespace bcm {

// Parameters of the single-parameter reference-based causal model for a
// trial with j_max post-baseline visits. Baseline is a covariate: the
// mean intercepts and the covariance cover the post-baseline visits only,
// and alpha carries the per-visit baseline coefficient shared across arms.
// pi is the probability vector of the last-on-treatment visit d in 1..j_max
// (completers counted at j_max); it may be left empty when not needed.
struct CausalParams {
  Eigen::VectorXd mu_active;   // on-treatment mean intercepts, length j_max
  Eigen::VectorXd mu_control;  // control mean intercepts, length j_max
  Eigen::VectorXd alpha;       // baseline coefficients, length j_max
  CovMatrix sigma;             // shared across arms and discontinuation times
  double k0 = 0.0;             // maintained-effect fraction
  Eigen::VectorXd pi;          // length j_max or empty

  int j_max() const { return static_cast<int>(mu_active.size()); }
  void validate() const;
};

struct PatientMeans {
  Eigen::VectorXd active_profile;
  Eigen::VectorXd control_profile;
};

PatientMeans patient_means(const CausalParams& p, double baseline);

// Conditional distribution of the post-ICE outcomes Y_{d+1..j_max} given the
// fully observed pre-ICE outcomes y_pre (visits 1..d) for a patient who was
// last on treatment at visit d. The mean shifts the control profile by
// k0 * (treatment effect at visit d) and regresses on the pre-ICE residuals;
// the covariance is the Schur complement of sigma.
ConditionalGaussian post_ice_conditional(const CausalParams& p,
                                         double baseline,
                                         const Eigen::VectorXd& y_pre, int d);

// Expectation of post_ice_conditional over the on-treatment distribution of
// the pre-ICE outcomes: control profile plus a constant k0 shift.
Eigen::VectorXd marginal_post_ice_mean(const CausalParams& p, double baseline,
                                       int d);

// Treatment-policy effect at the final visit:
//   pi[j_max]*(mu_a[j_max]-mu_c[j_max]) + sum_{j<j_max} pi[j]*k0*(mu_a[j]-mu_c[j])
// The baseline terms cancel between arms; mean_baseline is accepted for API
// symmetry only.
double policy_effect(const CausalParams& p, double mean_baseline);

std::string causal_params_to_json(const CausalParams& p);
CausalParams causal_params_from_json(const std::string& text);

}  // namespace bcm
