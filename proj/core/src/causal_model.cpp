#include "bcm/causal_model.hpp"

#include <cmath>

#include <json.hpp>

#include "bcm/errors.hpp"

namespace bcm {

void CausalParams::validate() const {
  const int jmax = j_max();
  if (jmax < 1) throw numerical_error("CausalParams: j_max must be >= 1");
  if (mu_control.size() != jmax || alpha.size() != jmax)
    throw numerical_error("CausalParams: vector length mismatch");
  if (sigma.dim() != jmax)
    throw numerical_error("CausalParams: sigma dimension mismatch");
  if (!std::isfinite(k0)) throw numerical_error("CausalParams: k0 not finite");
  if (pi.size() != 0) {
    if (pi.size() != jmax)
      throw numerical_error("CausalParams: pi length mismatch");
    double total = 0.0;
    for (int j = 0; j < jmax; ++j) {
      if (pi[j] < 0.0) throw numerical_error("CausalParams: pi must be >= 0");
      total += pi[j];
    }
    if (std::fabs(total - 1.0) > 1e-10)
      throw numerical_error("CausalParams: pi must sum to 1");
  }
}

PatientMeans patient_means(const CausalParams& p, double baseline) {
  PatientMeans m;
  m.active_profile = p.mu_active + baseline * p.alpha;
  m.control_profile = p.mu_control + baseline * p.alpha;
  return m;
}

ConditionalGaussian post_ice_conditional(const CausalParams& p,
                                         double baseline,
                                         const Eigen::VectorXd& y_pre, int d) {
  const int jmax = p.j_max();
  if (d < 1 || d >= jmax)
    throw numerical_error("post_ice_conditional: d must be in 1..j_max-1");
  if (y_pre.size() != d)
    throw numerical_error("post_ice_conditional: y_pre must have length d");

  const PatientMeans m = patient_means(p, baseline);
  const double delta_d = m.active_profile[d - 1] - m.control_profile[d - 1];

  // joint mean: on-treatment profile before the ICE, shifted control after
  Eigen::VectorXd joint_mean(jmax);
  for (int j = 0; j < d; ++j) joint_mean[j] = m.active_profile[j];
  for (int j = d; j < jmax; ++j)
    joint_mean[j] = m.control_profile[j] + p.k0 * delta_d;

  std::vector<int> obs_idx(d);
  for (int j = 0; j < d; ++j) obs_idx[j] = j;
  return mvn_condition(joint_mean, p.sigma, obs_idx, y_pre);
}

Eigen::VectorXd marginal_post_ice_mean(const CausalParams& p, double baseline,
                                       int d) {
  const int jmax = p.j_max();
  if (d < 1 || d >= jmax)
    throw numerical_error("marginal_post_ice_mean: d must be in 1..j_max-1");
  const PatientMeans m = patient_means(p, baseline);
  const double delta_d = m.active_profile[d - 1] - m.control_profile[d - 1];
  Eigen::VectorXd out(jmax - d);
  for (int j = d; j < jmax; ++j)
    out[j - d] = m.control_profile[j] + p.k0 * delta_d;
  return out;
}

double policy_effect(const CausalParams& p, double mean_baseline) {
  (void)mean_baseline;  // baseline coefficients cancel between arms
  p.validate();
  const int jmax = p.j_max();
  if (p.pi.size() != jmax)
    throw numerical_error("policy_effect: pi must be set");
  double effect = p.pi[jmax - 1] * (p.mu_active[jmax - 1] - p.mu_control[jmax - 1]);
  for (int j = 0; j + 1 < jmax; ++j)
    effect += p.pi[j] * p.k0 * (p.mu_active[j] - p.mu_control[j]);
  return effect;
}

namespace {

nlohmann::json vec_to_json(const Eigen::VectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Eigen::VectorXd vec_from_json(const nlohmann::json& a) {
  Eigen::VectorXd v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<int>(i)] = a[i].get<double>();
  return v;
}

}  // namespace

std::string causal_params_to_json(const CausalParams& p) {
  nlohmann::json j;
  j["mu_active"] = vec_to_json(p.mu_active);
  j["mu_control"] = vec_to_json(p.mu_control);
  j["alpha"] = vec_to_json(p.alpha);
  j["k0"] = p.k0;
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < p.sigma.dim(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < p.sigma.dim(); ++c) row.push_back(p.sigma.mat()(r, c));
    rows.push_back(row);
  }
  j["sigma"] = rows;
  if (p.pi.size() > 0) j["pi"] = vec_to_json(p.pi);
  return j.dump(2);
}

CausalParams causal_params_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw config_error(std::string("CausalParams JSON: ") + e.what());
  }
  CausalParams p;
  try {
    p.mu_active = vec_from_json(j.at("mu_active"));
    p.mu_control = vec_from_json(j.at("mu_control"));
    p.alpha = vec_from_json(j.at("alpha"));
    p.k0 = j.at("k0").get<double>();
    const auto& rows = j.at("sigma");
    const int d = static_cast<int>(rows.size());
    Eigen::MatrixXd m(d, d);
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < d; ++c) m(r, c) = rows[r][c].get<double>();
    p.sigma = CovMatrix(m);
    if (j.contains("pi")) p.pi = vec_from_json(j["pi"]);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("CausalParams JSON: ") + e.what());
  }
  p.validate();
  return p;
}

}  // namespace bcm
