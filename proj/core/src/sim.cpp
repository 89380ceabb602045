#include "bcm/sim.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Cholesky>
#include <json.hpp>

#include "bcm/errors.hpp"
#include "bcm/rng.hpp"

namespace bcm {

void SimScenario::validate() const {
  schedule.validate();
  const int v = j_max() + 1;
  if (mean_active.size() != v || mean_control.size() != v ||
      variances.size() != v)
    throw config_error("scenario: mean/variance vectors must cover all visits");
  if (mean_active[0] != mean_control[0])
    throw config_error("scenario: baseline means must be equal across arms");
  for (int i = 0; i < v; ++i)
    if (!(variances[i] > 0.0))
      throw config_error("scenario: variances must be positive");
  if (!(rho > 0.0 && rho < 1.0))
    throw config_error("scenario: rho must be in (0,1)");
  if (n_per_arm < 1) throw config_error("scenario: n_per_arm must be >= 1");
  if (!(miss_prob >= 0.0 && miss_prob <= 1.0))
    throw config_error("scenario: miss_prob must be in [0,1]");
  const std::size_t h = static_cast<std::size_t>(j_max() - 1);
  if (hazard.beta_base_active.size() != h ||
      hazard.beta_prev_active.size() != h ||
      hazard.beta_base_control.size() != h ||
      hazard.beta_prev_control.size() != h)
    throw config_error("scenario: hazard coefficients must cover visits 2..j_max");
}

namespace {

Eigen::VectorXd to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<int>(v.size()));
}

// Joint covariance across all visits (baseline included).
CovMatrix joint_cov(const SimScenario& sc) {
  return spatial_power_cov(sc.variances, to_vec(sc.schedule.weeks), sc.rho);
}

struct GenContext {
  SimScenario sc;
  CausalParams params;       // model-scale truth (baseline conditioned out)
  Eigen::MatrixXd chol_joint;
  // per-d conditionals of the model covariance given visits 1..d
  std::vector<Eigen::MatrixXd> beta_d;   // (j_max-d) x d
  std::vector<Eigen::MatrixXd> chol_d;   // Schur complement factors

  explicit GenContext(const SimScenario& scenario) : sc(scenario) {
    sc.validate();
    params = true_params(sc);
    chol_joint = joint_cov(sc).chol_lower();
    const int jmax = sc.j_max();
    const Eigen::MatrixXd& s = params.sigma.mat();
    beta_d.resize(jmax);
    chol_d.resize(jmax);
    for (int d = 1; d < jmax; ++d) {
      const Eigen::MatrixXd s_pp = s.topLeftCorner(d, d);
      const Eigen::MatrixXd s_fp = s.bottomLeftCorner(jmax - d, d);
      const Eigen::MatrixXd s_ff = s.bottomRightCorner(jmax - d, jmax - d);
      Eigen::LLT<Eigen::MatrixXd> llt(s_pp);
      if (llt.info() != Eigen::Success)
        throw numerical_error("scenario: pre-ICE covariance block not PD");
      beta_d[d] = llt.solve(s_fp.transpose()).transpose();
      Eigen::MatrixXd schur = s_ff - beta_d[d] * s_fp.transpose();
      Eigen::LLT<Eigen::MatrixXd> llt2(0.5 * (schur + schur.transpose()));
      if (llt2.info() != Eigen::Success)
        throw numerical_error("scenario: post-ICE residual covariance not PD");
      chol_d[d] = llt2.matrixL();
    }
  }
};

struct GenPatient {
  double baseline = 0.0;
  Eigen::VectorXd y;  // final policy outcomes, length j_max
  int d = 0;
  bool block_missing = false;
};

inline double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

GenPatient generate_patient(const GenContext& ctx, Arm arm, RngStream& rng) {
  const int jmax = ctx.sc.j_max();
  const Eigen::VectorXd& mu6 =
      (arm == Arm::active) ? ctx.sc.mean_active : ctx.sc.mean_control;

  // hypothetical on-treatment outcomes for every visit
  const Eigen::VectorXd z = rng.normal_vector(jmax + 1);
  const Eigen::VectorXd y6 = mu6 + ctx.chol_joint * z;

  GenPatient out;
  out.baseline = y6[0];
  out.y = y6.tail(jmax);

  // hazard walk over visits 2..j_max; first success at visit w sets d = w-1
  out.d = jmax;
  const auto& bb = (arm == Arm::active) ? ctx.sc.hazard.beta_base_active
                                        : ctx.sc.hazard.beta_base_control;
  const auto& bp = (arm == Arm::active) ? ctx.sc.hazard.beta_prev_active
                                        : ctx.sc.hazard.beta_prev_control;
  for (int w = 2; w <= jmax; ++w) {
    const double prev = out.y[w - 2];
    const double lp =
        ctx.sc.hazard.intercept + bb[w - 2] * out.baseline + bp[w - 2] * prev;
    if (rng.unif01() < expit(lp)) {
      out.d = w - 1;
      break;
    }
  }

  if (arm == Arm::active && out.d < jmax) {
    // replace the post-ICE visits with a draw from the causal conditional
    const int d = out.d;
    const PatientMeans pm = patient_means(ctx.params, out.baseline);
    const double delta = pm.active_profile[d - 1] - pm.control_profile[d - 1];
    Eigen::VectorXd mean = pm.control_profile.tail(jmax - d).array() +
                           ctx.sc.true_k0 * delta;
    mean += ctx.beta_d[d] * (out.y.head(d) - pm.active_profile.head(d));
    out.y.tail(jmax - d) =
        mean + ctx.chol_d[d] * rng.normal_vector(jmax - d);
  }

  if (out.d < jmax) out.block_missing = rng.unif01() < ctx.sc.miss_prob;
  return out;
}

}  // namespace

CausalParams true_params(const SimScenario& sc) {
  sc.validate();
  const int jmax = sc.j_max();
  const Eigen::MatrixXd joint = joint_cov(sc).mat();
  const double var0 = joint(0, 0);

  CausalParams p;
  p.alpha = joint.block(1, 0, jmax, 1) / var0;
  p.mu_active = sc.mean_active.tail(jmax) - p.alpha * sc.mean_active[0];
  p.mu_control = sc.mean_control.tail(jmax) - p.alpha * sc.mean_control[0];
  Eigen::MatrixXd resid = joint.bottomRightCorner(jmax, jmax) -
                          joint.block(1, 0, jmax, 1) *
                              joint.block(0, 1, 1, jmax) / var0;
  p.sigma = CovMatrix(std::move(resid));
  p.k0 = sc.true_k0;
  return p;
}

std::pair<TrialDataset, TrialDataset> simulate_trial_views(
    const SimScenario& sc, std::uint64_t seed) {
  const GenContext ctx(sc);
  const int jmax = sc.j_max();

  TrialDataset complete;
  complete.schedule = sc.schedule;
  TrialDataset masked;
  masked.schedule = sc.schedule;

  for (int arm_code = 0; arm_code < 2; ++arm_code) {
    const Arm arm = (arm_code == 0) ? Arm::control : Arm::active;
    for (int i = 0; i < sc.n_per_arm; ++i) {
      RngStream rng = derive_stream(seed, 0x9A7, arm_code,
                                    static_cast<std::uint64_t>(i));
      const GenPatient g = generate_patient(ctx, arm, rng);
      PatientRecord rec;
      rec.id = (arm == Arm::control ? "c" : "a") + std::to_string(i + 1);
      rec.arm = arm;
      rec.baseline = g.baseline;
      rec.d = g.d;
      rec.y.assign(g.y.data(), g.y.data() + jmax);
      complete.patients.push_back(rec);
      if (g.block_missing)
        for (int j = g.d; j < jmax; ++j) rec.y[j] = kMissing;
      masked.patients.push_back(std::move(rec));
    }
  }
  return {std::move(complete), std::move(masked)};
}

TrialDataset simulate_trial(const SimScenario& sc, std::uint64_t seed) {
  return simulate_trial_views(sc, seed).second;
}

double true_policy_effect(const SimScenario& sc, long n_mc) {
  if (n_mc < 1) throw config_error("true_policy_effect: n_mc must be >= 1");
  SimScenario oracle = sc;
  oracle.miss_prob = 0.0;
  const GenContext ctx(oracle);
  const int jmax = oracle.j_max();

  double sums[2] = {0.0, 0.0};
  for (int arm_code = 0; arm_code < 2; ++arm_code) {
    const Arm arm = (arm_code == 0) ? Arm::control : Arm::active;
    RngStream rng = derive_stream(0x7121775u, 0x0E, arm_code);
    for (long i = 0; i < n_mc; ++i) {
      const GenPatient g = generate_patient(ctx, arm, rng);
      sums[arm_code] += g.y[jmax - 1];
    }
  }
  return (sums[1] - sums[0]) / static_cast<double>(n_mc);
}

// ---------------------------------------------------------------------------
// Presets and JSON configuration

namespace {

SimScenario base_scenario() {
  SimScenario sc;
  sc.schedule.weeks = {0, 4, 8, 14, 20, 26};
  sc.mean_active = to_vec({7.92, 7.55, 7.20, 7.10, 7.05, 7.05});
  sc.mean_control = to_vec({7.92, 7.82, 7.80, 7.80, 7.78, 7.78});
  sc.variances = to_vec({0.48, 0.80, 1.10, 1.40, 1.23, 1.48});
  sc.rho = 0.8;
  sc.n_per_arm = 500;
  sc.hazard.beta_base_active = {0.30, 0.10, 0.05, 0.00};
  sc.hazard.beta_prev_active = {1.14, 1.47, 1.48, 1.40};
  sc.hazard.beta_base_control = {0.30, 0.10, 0.05, 0.00};
  sc.hazard.beta_prev_control = {1.14, 1.33, 1.51, 1.46};
  return sc;
}

}  // namespace

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {
      "ld-lm-k0_0", "ld-lm-k0_1", "ld-hm-k0_0", "ld-hm-k0_1",
      "hd-lm-k0_0", "hd-lm-k0_1", "hd-hm-k0_0", "hd-hm-k0_1"};
  return names;
}

SimScenario preset_scenario(const std::string& name) {
  const auto& names = preset_names();
  if (std::find(names.begin(), names.end(), name) == names.end()) {
    std::string known;
    for (const auto& n : names) known += n + " ";
    throw config_error("unknown preset '" + name + "'; available: " + known);
  }
  SimScenario sc = base_scenario();
  sc.name = name;
  const bool high_disc = name.substr(0, 2) == "hd";
  const bool high_miss = name.substr(3, 2) == "hm";
  sc.hazard.intercept = high_disc ? -13.0 : -15.0;
  sc.miss_prob = high_miss ? 0.9 : 0.2;
  sc.true_k0 = (name.back() == '1') ? 1.0 : 0.0;
  return sc;
}

SimScenario scenario_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw config_error(std::string("scenario JSON: ") + e.what());
  }
  SimScenario sc;
  if (j.contains("preset"))
    sc = preset_scenario(j["preset"].get<std::string>());
  else
    sc = base_scenario();
  try {
    if (j.contains("name")) sc.name = j["name"].get<std::string>();
    if (j.contains("weeks"))
      sc.schedule.weeks = j["weeks"].get<std::vector<double>>();
    if (j.contains("mean_active"))
      sc.mean_active = to_vec(j["mean_active"].get<std::vector<double>>());
    if (j.contains("mean_control"))
      sc.mean_control = to_vec(j["mean_control"].get<std::vector<double>>());
    if (j.contains("variances"))
      sc.variances = to_vec(j["variances"].get<std::vector<double>>());
    if (j.contains("rho")) sc.rho = j["rho"].get<double>();
    if (j.contains("n_per_arm")) sc.n_per_arm = j["n_per_arm"].get<int>();
    if (j.contains("true_k0")) sc.true_k0 = j["true_k0"].get<double>();
    if (j.contains("miss_prob")) sc.miss_prob = j["miss_prob"].get<double>();
    if (j.contains("hazard")) {
      const auto& h = j["hazard"];
      if (h.contains("intercept"))
        sc.hazard.intercept = h["intercept"].get<double>();
      if (h.contains("beta_base_active"))
        sc.hazard.beta_base_active =
            h["beta_base_active"].get<std::vector<double>>();
      if (h.contains("beta_prev_active"))
        sc.hazard.beta_prev_active =
            h["beta_prev_active"].get<std::vector<double>>();
      if (h.contains("beta_base_control"))
        sc.hazard.beta_base_control =
            h["beta_base_control"].get<std::vector<double>>();
      if (h.contains("beta_prev_control"))
        sc.hazard.beta_prev_control =
            h["beta_prev_control"].get<std::vector<double>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("scenario JSON: ") + e.what());
  }
  sc.validate();
  return sc;
}

std::string scenario_to_json(const SimScenario& sc) {
  nlohmann::json j;
  j["name"] = sc.name;
  j["weeks"] = sc.schedule.weeks;
  auto vec = [](const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  };
  j["mean_active"] = vec(sc.mean_active);
  j["mean_control"] = vec(sc.mean_control);
  j["variances"] = vec(sc.variances);
  j["rho"] = sc.rho;
  j["n_per_arm"] = sc.n_per_arm;
  j["true_k0"] = sc.true_k0;
  j["miss_prob"] = sc.miss_prob;
  j["hazard"] = {{"intercept", sc.hazard.intercept},
                 {"beta_base_active", sc.hazard.beta_base_active},
                 {"beta_prev_active", sc.hazard.beta_prev_active},
                 {"beta_base_control", sc.hazard.beta_base_control},
                 {"beta_prev_control", sc.hazard.beta_prev_control}};
  return j.dump(2);
}

}  // namespace bcm
