#include "bcm/imputation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "bcm/errors.hpp"
#include "bcm/stats.hpp"

namespace bcm {

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::conditional_mean: return "conditional_mean";
    case Provenance::stochastic_draw: return "stochastic_draw";
    case Provenance::rd: return "rd";
    case Provenance::rbi_j2r: return "rbi_j2r";
    default: return "rbi_cir";
  }
}

void write_completed_csv(const CompletedDataset& cds, const std::string& path) {
  cds.data.validate();
  const std::string body_path = path + ".tmp";
  write_csv(cds.data, body_path);
  std::ifstream body(body_path);
  std::ofstream out(path);
  if (!out) throw data_error("cannot open '" + path + "' for writing");
  out << "# provenance: " << provenance_name(cds.provenance) << '\n';
  out << body.rdbuf();
  body.close();
  std::remove(body_path.c_str());
}

namespace {

// Joint mean of a patient's outcome vector under the causal model: the
// on-treatment profile before the ICE, the k0-shifted control profile after;
// control-arm patients follow the control profile throughout.
Eigen::VectorXd joint_patient_mean(const CausalParams& p,
                                   const PatientRecord& rec) {
  const PatientMeans m = patient_means(p, rec.baseline);
  const int jmax = p.j_max();
  Eigen::VectorXd mean(jmax);
  if (rec.arm == Arm::control) {
    mean = m.control_profile;
  } else {
    const int d = rec.d;
    for (int j = 0; j < d; ++j) mean[j] = m.active_profile[j];
    if (d < jmax) {
      const double delta = m.active_profile[d - 1] - m.control_profile[d - 1];
      for (int j = d; j < jmax; ++j)
        mean[j] = m.control_profile[j] + p.k0 * delta;
    }
  }
  return mean;
}

// Per-pattern conditioning cache: patients sharing (arm, d, missingness
// mask) share the regression matrix and residual Cholesky factor.
class PatternImputer {
 public:
  explicit PatternImputer(const CausalParams& p) : p_(p) {}

  // Fills rec's missing cells in place; draws when rng is non-null.
  void impute(PatientRecord& rec, RngStream* rng) {
    const int jmax = p_.j_max();
    std::uint64_t mask = 0;
    for (int j = 0; j < jmax; ++j)
      if (is_missing(rec.y[j])) mask |= (1ull << j);
    if (mask == 0) return;

    const std::uint64_t key = (rec.arm == Arm::active ? 1ull : 0ull) |
                              (static_cast<std::uint64_t>(rec.d) << 1) |
                              (mask << 8);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, build(rec, mask)).first;
    const Pattern& pat = it->second;

    const Eigen::VectorXd mean = joint_patient_mean(p_, rec);
    Eigen::VectorXd cond(pat.miss.size());
    for (std::size_t t = 0; t < pat.miss.size(); ++t)
      cond[static_cast<int>(t)] = mean[pat.miss[t]];
    if (!pat.obs.empty()) {
      Eigen::VectorXd resid(pat.obs.size());
      for (std::size_t t = 0; t < pat.obs.size(); ++t)
        resid[static_cast<int>(t)] = rec.y[pat.obs[t]] - mean[pat.obs[t]];
      cond.noalias() += pat.beta * resid;
    }
    if (rng)
      cond.noalias() += pat.chol * rng->normal_vector(static_cast<int>(pat.miss.size()));
    for (std::size_t t = 0; t < pat.miss.size(); ++t)
      rec.y[pat.miss[t]] = cond[static_cast<int>(t)];
  }

 private:
  struct Pattern {
    std::vector<int> obs, miss;
    Eigen::MatrixXd beta;  // regression of missing on observed
    Eigen::MatrixXd chol;  // of the conditional covariance
  };

  Pattern build(const PatientRecord& rec, std::uint64_t mask) const {
    const int jmax = p_.j_max();
    Pattern pat;
    for (int j = 0; j < jmax; ++j) {
      if (mask & (1ull << j))
        pat.miss.push_back(j);
      else
        pat.obs.push_back(j);
    }
    const auto& s = p_.sigma.mat();
    const int nm = static_cast<int>(pat.miss.size());
    const int no = static_cast<int>(pat.obs.size());
    Eigen::MatrixXd s_mm(nm, nm);
    for (int a = 0; a < nm; ++a)
      for (int b = 0; b < nm; ++b) s_mm(a, b) = s(pat.miss[a], pat.miss[b]);
    Eigen::MatrixXd cond_cov;
    if (no == 0) {
      pat.beta.resize(nm, 0);
      cond_cov = s_mm;
    } else {
      Eigen::MatrixXd s_oo(no, no), s_mo(nm, no);
      for (int a = 0; a < no; ++a)
        for (int b = 0; b < no; ++b) s_oo(a, b) = s(pat.obs[a], pat.obs[b]);
      for (int a = 0; a < nm; ++a)
        for (int b = 0; b < no; ++b) s_mo(a, b) = s(pat.miss[a], pat.obs[b]);
      Eigen::LLT<Eigen::MatrixXd> llt(s_oo);
      if (llt.info() != Eigen::Success)
        throw numerical_error("impute: observed block not positive definite");
      pat.beta = llt.solve(s_mo.transpose()).transpose();
      cond_cov = s_mm - pat.beta * s_mo.transpose();
    }
    cond_cov = 0.5 * (cond_cov + cond_cov.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt_c(cond_cov);
    if (llt_c.info() == Eigen::Success) {
      pat.chol = llt_c.matrixL();
    } else {
      (void)rec;
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cond_cov);
      Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
      pat.chol = es.eigenvectors() * ev.cwiseSqrt().asDiagonal();
    }
    return pat;
  }

  const CausalParams& p_;
  std::map<std::uint64_t, Pattern> cache_;
};

CompletedDataset impute_all(const TrialDataset& ds, const CausalParams& p,
                            RngStream* rng, Provenance tag) {
  ds.validate();
  if (p.j_max() != ds.j_max())
    throw numerical_error("impute: parameter dimension mismatch");
  CompletedDataset out;
  out.data = ds;
  out.provenance = tag;
  PatternImputer imputer(p);
  for (auto& rec : out.data.patients) imputer.impute(rec, rng);
  return out;
}

}  // namespace

CompletedDataset conditional_mean_impute(const TrialDataset& ds,
                                         const CausalParams& p) {
  return impute_all(ds, p, nullptr, Provenance::conditional_mean);
}

CompletedDataset draw_imputation(const TrialDataset& ds, const CausalParams& p,
                                 RngStream& rng) {
  return impute_all(ds, p, &rng, Provenance::stochastic_draw);
}

// ---------------------------------------------------------------------------
// Retrieved-dropout sequential imputation

std::vector<CompletedDataset> rd_impute(const TrialDataset& ds, int m,
                                        RngStream& rng,
                                        const RdSettings& settings) {
  ds.validate();
  if (m < 1) throw config_error("rd_impute: m must be >= 1");
  const int jmax = ds.j_max();
  const int n = static_cast<int>(ds.patients.size());

  std::vector<CompletedDataset> out;
  out.reserve(m);
  for (int imp = 0; imp < m; ++imp) {
    CompletedDataset cds;
    cds.data = ds;
    cds.provenance = Provenance::rd;
    auto& patients = cds.data.patients;

    for (int j = 1; j <= jmax; ++j) {
      std::vector<int> to_fill;
      for (int i = 0; i < n; ++i)
        if (is_missing(ds.patients[i].y[j - 1])) to_fill.push_back(i);
      if (to_fill.empty()) continue;

      // design: intercept, treatment, [weeks since active-treatment
      // discontinuation], baseline, earlier outcomes. The pattern covariate
      // stays 0 in the control arm, whose post-ICE distribution the
      // imputation model treats as unchanged.
      const int p_cols = 3 + (j - 1) + (settings.use_pattern_covariate ? 1 : 0);
      auto design_row = [&](int i) {
        const auto& rec = patients[i];
        Eigen::VectorXd x(p_cols);
        int c = 0;
        x[c++] = 1.0;
        x[c++] = (rec.arm == Arm::active) ? 1.0 : 0.0;
        if (settings.use_pattern_covariate) {
          x[c++] = (rec.arm == Arm::active && j > rec.d)
                       ? ds.schedule.week_of_visit(j) -
                             ds.schedule.week_of_visit(rec.d)
                       : 0.0;
        }
        x[c++] = rec.baseline;
        for (int k = 1; k < j; ++k) x[c++] = rec.y[k - 1];
        return x;
      };

      std::vector<int> fit_rows;
      for (int i = 0; i < n; ++i)
        if (!is_missing(ds.patients[i].y[j - 1])) fit_rows.push_back(i);
      const int n_fit = static_cast<int>(fit_rows.size());
      if (n_fit < p_cols + 2)
        throw non_estimable_error(
            "rd_impute: visit " + std::to_string(j) + " has " +
            std::to_string(n_fit) + " complete cases for " +
            std::to_string(p_cols) + " regressors");

      Eigen::MatrixXd x(n_fit, p_cols);
      Eigen::VectorXd yv(n_fit);
      for (int r = 0; r < n_fit; ++r) {
        x.row(r) = design_row(fit_rows[r]).transpose();
        yv[r] = patients[fit_rows[r]].y[j - 1];
      }
      const Eigen::MatrixXd xtx = x.transpose() * x;
      Eigen::FullPivLU<Eigen::MatrixXd> lu(xtx);
      lu.setThreshold(1e-10);
      if (lu.rank() < p_cols)
        throw non_estimable_error(
            "rd_impute: imputation model at visit " + std::to_string(j) +
            " is non-estimable (rank-deficient design)");
      const Eigen::MatrixXd xtx_inv = lu.inverse();
      const Eigen::VectorXd beta_hat = xtx_inv * (x.transpose() * yv);
      const double sse = (yv - x * beta_hat).squaredNorm();
      const double df = static_cast<double>(n_fit - p_cols);

      // posterior draw: sigma^2 from the scaled inverse chi-square, then
      // beta from its conditional normal
      const double sigma2 = sse / rng.chi_square(df);
      Eigen::LLT<Eigen::MatrixXd> llt(xtx_inv);
      if (llt.info() != Eigen::Success)
        throw non_estimable_error("rd_impute: singular posterior covariance at visit " +
                                  std::to_string(j));
      const Eigen::VectorXd beta =
          beta_hat + std::sqrt(sigma2) * (Eigen::MatrixXd(llt.matrixL()) *
                                          rng.normal_vector(p_cols));

      for (int i : to_fill) {
        const Eigen::VectorXd xi = design_row(i);
        patients[i].y[j - 1] = xi.dot(beta) + std::sqrt(sigma2) * rng.normal();
      }
    }
    out.push_back(std::move(cds));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reference-based imputation

std::vector<CompletedDataset> rbi_impute(const TrialDataset& ds,
                                         RbiVariant variant, int m,
                                         const PriorSpec& prior,
                                         const RbiSettings& settings,
                                         std::uint64_t seed) {
  ds.validate();
  if (m < 1) throw config_error("rbi_impute: m must be >= 1");
  const double k0 = (variant == RbiVariant::j2r) ? 0.0 : 1.0;

  McmcSettings mcmc;
  mcmc.chains = settings.chains;
  mcmc.warmup = settings.warmup;
  mcmc.thin = settings.thin;
  mcmc.keep = (m + settings.chains - 1) / settings.chains;

  const PosteriorDraws draws =
      sample_posterior(ds, prior, /*include_post_ice=*/false, mcmc, seed, k0);

  const Provenance tag =
      (variant == RbiVariant::j2r) ? Provenance::rbi_j2r : Provenance::rbi_cir;
  std::vector<CompletedDataset> out;
  out.reserve(m);
  for (int l = 0; l < m; ++l) {
    RngStream rng = derive_stream(seed, 0x1337, static_cast<std::uint64_t>(l));
    out.push_back(impute_all(ds, draws.draws[l], &rng, tag));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling

PooledResult rubins_rules(const std::vector<double>& points,
                          const std::vector<double>& variances,
                          double complete_df) {
  const int m = static_cast<int>(points.size());
  if (m < 2) throw numerical_error("rubins_rules: need at least 2 imputations");
  if (variances.size() != points.size())
    throw numerical_error("rubins_rules: size mismatch");
  if (!(complete_df > 0.0))
    throw numerical_error("rubins_rules: complete_df must be > 0");

  PooledResult r;
  r.m = m;
  r.estimate = mean(points);
  r.within_var = mean(variances);
  double b = 0.0;
  for (double q : points) b += (q - r.estimate) * (q - r.estimate);
  r.between_var = b / static_cast<double>(m - 1);
  r.total_var = r.within_var + (1.0 + 1.0 / m) * r.between_var;

  // Barnard-Rubin small-sample degrees of freedom
  const double lambda = (1.0 + 1.0 / m) * r.between_var / r.total_var;
  const double nu_obs =
      (complete_df + 1.0) / (complete_df + 3.0) * complete_df * (1.0 - lambda);
  if (lambda < 1e-12) {
    r.df = nu_obs;
  } else {
    const double nu_old = (m - 1.0) / (lambda * lambda);
    r.df = nu_old * nu_obs / (nu_old + nu_obs);
  }
  return r;
}

EstimateReport pooled_ancova(const std::vector<CompletedDataset>& sets,
                             const std::string& method) {
  if (sets.empty()) throw numerical_error("pooled_ancova: no datasets");
  std::vector<double> points, variances;
  double complete_df = 0.0;
  for (const auto& cds : sets) {
    const AncovaFit fit = ancova(cds.data);
    points.push_back(fit.estimate);
    variances.push_back(fit.se * fit.se);
    complete_df = fit.df;
  }
  const PooledResult pooled = rubins_rules(points, variances, complete_df);

  EstimateReport r;
  r.method = method;
  r.point = pooled.estimate;
  r.se = std::sqrt(pooled.total_var);
  r.df = pooled.df;
  const auto ci = interval(r.point, r.se, r.df);
  r.ci_low = ci.first;
  r.ci_high = ci.second;
  r.aux["within_var"] = pooled.within_var;
  r.aux["between_var"] = pooled.between_var;
  r.aux["m"] = pooled.m;
  return r;
}

// ---------------------------------------------------------------------------
// BCM imputation estimators

namespace {

TrialDataset resample_by_arm(const TrialDataset& ds, RngStream& rng) {
  TrialDataset out;
  out.schedule = ds.schedule;
  std::vector<int> control_rows, active_rows;
  for (int i = 0; i < static_cast<int>(ds.patients.size()); ++i) {
    if (ds.patients[i].arm == Arm::control)
      control_rows.push_back(i);
    else
      active_rows.push_back(i);
  }
  for (const auto* rows : {&control_rows, &active_rows}) {
    const auto size = static_cast<std::uint64_t>(rows->size());
    for (std::size_t k = 0; k < rows->size(); ++k) {
      const auto pick = static_cast<std::size_t>(rng.next_u64() % size);
      out.patients.push_back(ds.patients[(*rows)[pick]]);
    }
  }
  return out;
}

TrialDataset drop_patient(const TrialDataset& ds, int row) {
  TrialDataset out;
  out.schedule = ds.schedule;
  out.patients.reserve(ds.patients.size() - 1);
  for (int i = 0; i < static_cast<int>(ds.patients.size()); ++i)
    if (i != row) out.patients.push_back(ds.patients[i]);
  return out;
}

double cmi_point(const TrialDataset& ds, const CausalParams& params) {
  return ancova(conditional_mean_impute(ds, params).data).estimate;
}

}  // namespace

EstimateReport bcm_mi_bootstrap(const TrialDataset& ds, const PriorSpec& prior,
                                int n_bootstrap, int m, std::uint64_t seed) {
  ds.validate();
  if (n_bootstrap < 2 || m < 1)
    throw config_error("bcm_mi_bootstrap: need B >= 2 and m >= 1");

  const auto mi_estimate = [&](const TrialDataset& data, const MapResult& map,
                               std::uint64_t draw_key) {
    double sum = 0.0;
    for (int l = 0; l < m; ++l) {
      RngStream rng = derive_stream(seed, draw_key, static_cast<std::uint64_t>(l));
      sum += ancova(draw_imputation(data, map.params, rng).data).estimate;
    }
    return sum / static_cast<double>(m);
  };

  const MapResult map_full = fit_map(ds, prior, /*include_post_ice=*/true);
  const double point = mi_estimate(ds, map_full, 0xA11);

  std::vector<double> boot;
  boot.reserve(n_bootstrap);
  for (int b = 0; b < n_bootstrap; ++b) {
    double estimate = 0.0;
    bool done = false;
    for (int attempt = 0; attempt < 2 && !done; ++attempt) {
      RngStream rs = derive_stream(seed, 0xB007, static_cast<std::uint64_t>(b),
                                   static_cast<std::uint64_t>(attempt));
      const TrialDataset resampled = resample_by_arm(ds, rs);
      try {
        const MapResult map_b =
            fit_map_from(ModelData::build(resampled, true), prior, map_full.v,
                         std::nullopt, MapOptions{}, &map_full.neg_hessian);
        estimate = mi_estimate(resampled, map_b,
                               0xD0 + static_cast<std::uint64_t>(b) * 2 + attempt);
        done = true;
      } catch (const numerical_error&) {
        if (attempt == 1) throw;
      }
    }
    boot.push_back(estimate);
  }

  EstimateReport r;
  r.method = "bcm-mi-bs";
  r.point = point;
  r.se = sample_sd(boot);
  r.df = std::numeric_limits<double>::infinity();
  const auto ci = interval(r.point, r.se, r.df);
  r.ci_low = ci.first;
  r.ci_high = ci.second;
  r.aux["bootstrap_mean"] = mean(boot);
  r.aux["b"] = n_bootstrap;
  r.aux["m"] = m;
  return r;
}

EstimateReport bcm_cmi(const TrialDataset& ds, const PriorSpec& prior,
                       SeMethod se_method, int n_bootstrap, std::uint64_t seed) {
  ds.validate();
  const MapResult map_full = fit_map(ds, prior, /*include_post_ice=*/true);
  const double point = cmi_point(ds, map_full.params);

  EstimateReport r;
  r.point = point;
  r.df = std::numeric_limits<double>::infinity();

  if (se_method == SeMethod::jackknife) {
    const int n = static_cast<int>(ds.patients.size());
    std::vector<double> loo(n);
    for (int i = 0; i < n; ++i) {
      const TrialDataset reduced = drop_patient(ds, i);
      const MapResult map_i =
          fit_map_from(ModelData::build(reduced, true), prior, map_full.v,
                       std::nullopt, MapOptions{}, &map_full.neg_hessian);
      loo[i] = cmi_point(reduced, map_i.params);
    }
    const double loo_mean = mean(loo);
    double ss = 0.0;
    for (double v : loo) ss += (v - loo_mean) * (v - loo_mean);
    r.se = std::sqrt((n - 1.0) / n * ss);
    r.method = "bcm-cmi-jk";
  } else {
    if (n_bootstrap < 2) throw config_error("bcm_cmi: need B >= 2");
    std::vector<double> boot;
    boot.reserve(n_bootstrap);
    for (int b = 0; b < n_bootstrap; ++b) {
      double estimate = 0.0;
      bool done = false;
      for (int attempt = 0; attempt < 2 && !done; ++attempt) {
        RngStream rs = derive_stream(seed, 0xCB5, static_cast<std::uint64_t>(b),
                                     static_cast<std::uint64_t>(attempt));
        const TrialDataset resampled = resample_by_arm(ds, rs);
        try {
          const MapResult map_b =
              fit_map_from(ModelData::build(resampled, true), prior, map_full.v,
                           std::nullopt, MapOptions{}, &map_full.neg_hessian);
          estimate = cmi_point(resampled, map_b.params);
          done = true;
        } catch (const numerical_error&) {
          if (attempt == 1) throw;
        }
      }
      boot.push_back(estimate);
    }
    r.se = sample_sd(boot);
    r.method = "bcm-cmi-bs";
    r.aux["b"] = n_bootstrap;
  }

  const auto ci = interval(r.point, r.se, r.df);
  r.ci_low = ci.first;
  r.ci_high = ci.second;
  return r;
}

}  // namespace bcm
