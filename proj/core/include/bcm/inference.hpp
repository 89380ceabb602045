#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "bcm/analysis.hpp"
#include "bcm/causal_model.hpp"
#include "bcm/rng.hpp"
#include "bcm/trial_data.hpp"

namespace bcm {

// Hyperparameters for every prior in the model. Normal priors on the mean
// intercepts, baseline coefficients and k0; half-normal on the marginal
// standard deviations; an LKJ-style shape on the correlation matrix; a
// Dirichlet concentration for the discontinuation proportions.
struct PriorSpec {
  double k0_mean = 0.0;
  double k0_sd = 100.0;
  double mu_sd = 100.0;
  double alpha_sd = 100.0;
  double dirichlet_alpha = 1.0;
  double sd_scale = 5.0;
  double corr_eta = 1.0;

  void validate() const;
  std::string describe_k0() const;  // e.g. "k0~N(0,100^2)"
};

PriorSpec prior_from_json(const std::string& text);
std::string prior_to_json(const PriorSpec& prior);

// Layout of the unconstrained sampling/optimization vector:
//   [mu_active (J), mu_control (J), alpha (J), k0 (if free),
//    log marginal SDs (J), correlation coordinates (J(J-1)/2)]
// The correlation block stores atanh of the canonical partial correlations
// of the correlation Cholesky factor; the map to CausalParams (minus pi)
// is a bijection.
class ParamLayout {
 public:
  ParamLayout() = default;
  ParamLayout(int j_max, bool k0_free);

  int j_max() const { return j_; }
  bool k0_free() const { return k0_free_; }
  int dim() const { return dim_; }
  int mu_active_offset() const { return 0; }
  int mu_control_offset() const { return j_; }
  int alpha_offset() const { return 2 * j_; }
  int k0_offset() const { return 3 * j_; }  // valid only when k0_free()
  int log_sd_offset() const { return 3 * j_ + (k0_free_ ? 1 : 0); }
  int corr_offset() const { return log_sd_offset() + j_; }
  int n_corr() const { return j_ * (j_ - 1) / 2; }

  std::string param_name(int i) const;

  // fixed_k0 is substituted when the layout holds no k0 coordinate.
  CausalParams unpack(const Eigen::VectorXd& v, double fixed_k0 = 0.0) const;
  Eigen::VectorXd pack(const CausalParams& p) const;

 private:
  int j_ = 0;
  bool k0_free_ = true;
  int dim_ = 0;
};

using UnconstrainedVector = Eigen::VectorXd;

// Sufficient statistics of a dataset for the model log-posterior, grouped by
// observation pattern so that evaluations cost O(#patterns), not O(n).
class ModelData {
 public:
  static ModelData build(const TrialDataset& ds, bool include_post_ice,
                         int exclude_patient = -1);

  int j_max() const { return j_; }
  bool include_post_ice() const { return include_post_ice_; }
  int n_patients() const { return n_patients_; }
  int n_active() const { return n_active_; }
  double mean_baseline() const { return mean_baseline_; }
  bool any_post_ice_observed() const { return any_post_ice_observed_; }
  const Eigen::VectorXd& active_d_counts() const { return d_counts_; }

  struct Group {
    std::vector<int> obs;    // observed visit indices, 0-based
    std::vector<int> role;   // 0 = control, 1 = active pre-ICE, 2 = active post-ICE
    int d = 0;               // last on-treatment visit (active groups)
    double n = 0.0;
    double sum_x = 0.0;
    double sum_xx = 0.0;
    Eigen::VectorXd sum_v;
    Eigen::VectorXd sum_vx;
    Eigen::MatrixXd sum_vv;
    std::vector<int> patient_rows;
  };
  const std::vector<Group>& groups() const { return groups_; }

 private:
  int j_ = 0;
  bool include_post_ice_ = false;
  int n_patients_ = 0;
  int n_active_ = 0;
  double mean_baseline_ = 0.0;
  bool any_post_ice_observed_ = false;
  Eigen::VectorXd d_counts_;
  std::vector<Group> groups_;
};

// Log-posterior of the causal model given grouped data, including the
// log-Jacobian of the unconstrained transform. Evaluations that leave the
// numerically valid region return -inf rather than throwing. Each instance
// carries reusable scratch buffers, so a given instance must not be
// evaluated from two threads at once.
class LogPosterior {
 public:
  LogPosterior(const ModelData& md, const PriorSpec& prior,
               std::optional<double> fixed_k0 = std::nullopt);
  ~LogPosterior();
  LogPosterior(LogPosterior&&) noexcept;
  LogPosterior& operator=(LogPosterior&&) noexcept;

  const ParamLayout& layout() const { return layout_; }
  double fixed_k0_value() const { return fixed_k0_.value_or(0.0); }

  double value(const UnconstrainedVector& v) const;
  double value_grad(const UnconstrainedVector& v, Eigen::VectorXd& grad) const;

 private:
  struct Workspace;

  template <bool WithGrad>
  double eval(const UnconstrainedVector& v, Eigen::VectorXd* grad) const;

  const ModelData* md_;
  PriorSpec prior_;
  std::optional<double> fixed_k0_;
  ParamLayout layout_;
  std::unique_ptr<Workspace> work_;
};

// Spec-level entry point: assembles the model for a dataset and evaluates
// the log-posterior. Throws numerical_error naming a patient whose
// contribution is non-finite.
double log_posterior(const UnconstrainedVector& v, const TrialDataset& ds,
                     const PriorSpec& prior, bool include_post_ice);

struct MapOptions {
  double grad_tol = 1e-6;
  int max_iterations = 500;
  int history = 8;
};

struct MapResult {
  CausalParams params;  // pi left empty
  UnconstrainedVector v;
  double log_posterior = 0.0;
  double grad_sup_norm = 0.0;
  bool converged = false;
  int iterations = 0;
  int starts_converged = 0;
  Eigen::MatrixXd neg_hessian;  // at the mode (empty for warm refits)
};

// Quasi-Newton maximization from three deterministic starts (moment-based,
// zero-effect, perturbed).
MapResult fit_map(const TrialDataset& ds, const PriorSpec& prior,
                  bool include_post_ice,
                  std::optional<double> fixed_k0 = std::nullopt,
                  const MapOptions& opts = {});
MapResult fit_map(const ModelData& md, const PriorSpec& prior,
                  std::optional<double> fixed_k0 = std::nullopt,
                  const MapOptions& opts = {});
// Warm-started refinement from a single initial point; a negative-Hessian
// hint from a nearby fit makes refits cost only gradient evaluations.
MapResult fit_map_from(const ModelData& md, const PriorSpec& prior,
                       const UnconstrainedVector& v0,
                       std::optional<double> fixed_k0 = std::nullopt,
                       const MapOptions& opts = {},
                       const Eigen::MatrixXd* neg_hess_hint = nullptr);

struct McmcSettings {
  int chains = 2;
  int warmup = 300;
  int keep = 1000;
  int thin = 1;
  double target_accept = 0.8;
  int max_depth = 10;
};

struct PosteriorDraws {
  std::vector<CausalParams> draws;  // chain-major order
  Eigen::MatrixXd flat;             // one row per draw, layout order
  std::vector<std::string> param_names;
  std::map<std::string, double> rhat;
  std::map<std::string, double> ess;
  bool diagnostics_ok = true;
  std::vector<std::string> warnings;
  int chains = 0;
  int warmup = 0;
  int kept_per_chain = 0;
  std::uint64_t seed = 0;
};

// NUTS over the unconstrained vector; pi is handled conjugately elsewhere.
// Fixed seeds give bit-identical draw sequences.
PosteriorDraws sample_posterior(const TrialDataset& ds, const PriorSpec& prior,
                                bool include_post_ice,
                                const McmcSettings& settings,
                                std::uint64_t seed,
                                std::optional<double> fixed_k0 = std::nullopt);

void draws_to_csv(const PosteriorDraws& draws, const std::string& path);

// Conjugate Dirichlet(alpha + counts of d) draws over the active arm.
std::vector<Eigen::VectorXd> sample_pi(const TrialDataset& ds,
                                       double dirichlet_alpha, int n_draws,
                                       RngStream& rng);

// Posterior mean / SD / quantile interval of the policy effect, pairing
// draw l with pi-draw l.
EstimateReport estimate_effect_bcm(const PosteriorDraws& draws,
                                   const std::vector<Eigen::VectorXd>& pi_draws,
                                   double mean_baseline);

}  // namespace bcm
