#include "bcm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <Eigen/Cholesky>
#include <json.hpp>

#include "bcm/diagnostics.hpp"
#include "bcm/errors.hpp"
#include "bcm/sampler.hpp"
#include "bcm/stats.hpp"

namespace bcm {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.8378770664093454836;
}  // namespace

// ---------------------------------------------------------------------------
// PriorSpec

void PriorSpec::validate() const {
  if (!(k0_sd > 0.0 && mu_sd > 0.0 && alpha_sd > 0.0 && sd_scale > 0.0))
    throw config_error("PriorSpec: standard deviations and scales must be > 0");
  if (!(dirichlet_alpha > 0.0))
    throw config_error("PriorSpec: dirichlet_alpha must be > 0");
  if (!(corr_eta >= 1.0)) throw config_error("PriorSpec: corr_eta must be >= 1");
}

std::string PriorSpec::describe_k0() const {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "k0~N(%g,%g^2)", k0_mean, k0_sd);
  return buf;
}

PriorSpec prior_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw config_error(std::string("prior JSON: ") + e.what());
  }
  PriorSpec p;
  if (j.contains("k0_mean")) p.k0_mean = j["k0_mean"].get<double>();
  if (j.contains("k0_sd")) p.k0_sd = j["k0_sd"].get<double>();
  if (j.contains("mu_sd")) p.mu_sd = j["mu_sd"].get<double>();
  if (j.contains("alpha_sd")) p.alpha_sd = j["alpha_sd"].get<double>();
  if (j.contains("dirichlet_alpha"))
    p.dirichlet_alpha = j["dirichlet_alpha"].get<double>();
  if (j.contains("sd_scale")) p.sd_scale = j["sd_scale"].get<double>();
  if (j.contains("corr_eta")) p.corr_eta = j["corr_eta"].get<double>();
  p.validate();
  return p;
}

std::string prior_to_json(const PriorSpec& prior) {
  nlohmann::json j;
  j["k0_mean"] = prior.k0_mean;
  j["k0_sd"] = prior.k0_sd;
  j["mu_sd"] = prior.mu_sd;
  j["alpha_sd"] = prior.alpha_sd;
  j["dirichlet_alpha"] = prior.dirichlet_alpha;
  j["sd_scale"] = prior.sd_scale;
  j["corr_eta"] = prior.corr_eta;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Unconstrained transform

ParamLayout::ParamLayout(int j_max, bool k0_free) : j_(j_max), k0_free_(k0_free) {
  if (j_ < 1) throw numerical_error("ParamLayout: j_max must be >= 1");
  dim_ = 3 * j_ + (k0_free_ ? 1 : 0) + j_ + n_corr();
}

std::string ParamLayout::param_name(int i) const {
  if (i < j_) return "mu_active[" + std::to_string(i + 1) + "]";
  if (i < 2 * j_) return "mu_control[" + std::to_string(i - j_ + 1) + "]";
  if (i < 3 * j_) return "alpha[" + std::to_string(i - 2 * j_ + 1) + "]";
  int k = i - 3 * j_;
  if (k0_free_) {
    if (k == 0) return "k0";
    --k;
  }
  if (k < j_) return "log_sd[" + std::to_string(k + 1) + "]";
  k -= j_;
  for (int col = 0, flat = 0; col < j_ - 1; ++col)
    for (int row = col + 1; row < j_; ++row, ++flat)
      if (flat == k)
        return "cpc[" + std::to_string(row + 1) + "," +
               std::to_string(col + 1) + "]";
  throw numerical_error("ParamLayout: index out of range");
}

namespace {

// Correlation Cholesky factor from canonical partial correlations, with the
// per-row prefix products kept for reverse-mode passes.
struct CorrChol {
  Eigen::MatrixXd z;     // lower triangle, tanh of the coordinates
  Eigen::MatrixXd l;     // Cholesky factor of the correlation matrix
  Eigen::MatrixXd pref;  // pref(i,j) = prod_{k<j} sqrt(1 - z_ik^2)
};

CorrChol corr_chol_from_cpc(const Eigen::VectorXd& y, int j_max) {
  CorrChol cc;
  cc.z = Eigen::MatrixXd::Zero(j_max, j_max);
  cc.l = Eigen::MatrixXd::Zero(j_max, j_max);
  cc.pref = Eigen::MatrixXd::Zero(j_max, j_max);
  int flat = 0;
  for (int col = 0; col < j_max - 1; ++col)
    for (int row = col + 1; row < j_max; ++row, ++flat) {
      double z = std::tanh(y[flat]);
      z = std::clamp(z, -1.0 + 1e-12, 1.0 - 1e-12);
      cc.z(row, col) = z;
    }
  for (int i = 0; i < j_max; ++i) {
    double s = 1.0;
    for (int j = 0; j < i; ++j) {
      cc.pref(i, j) = s;
      cc.l(i, j) = cc.z(i, j) * s;
      s *= std::sqrt(1.0 - cc.z(i, j) * cc.z(i, j));
    }
    cc.pref(i, i) = s;
    cc.l(i, i) = s;
  }
  return cc;
}

// Reverse pass: gradient with respect to the unconstrained coordinates given
// the gradient with respect to L.
Eigen::VectorXd corr_chol_backprop(const CorrChol& cc,
                                   const Eigen::MatrixXd& dl, int j_max) {
  Eigen::VectorXd dy(j_max * (j_max - 1) / 2);
  Eigen::MatrixXd dz = Eigen::MatrixXd::Zero(j_max, j_max);
  for (int i = 1; i < j_max; ++i) {
    double ds = dl(i, i);  // gradient wrt the running prefix product
    for (int j = i - 1; j >= 0; --j) {
      const double z = cc.z(i, j);
      const double c = std::sqrt(1.0 - z * z);
      // s_{j+1} = s_j * c and L(i,j) = z * s_j
      const double dc = ds * cc.pref(i, j);
      double dz_ij = dl(i, j) * cc.pref(i, j) - dc * z / c;
      ds = ds * c + dl(i, j) * z;
      dz(i, j) = dz_ij;
    }
  }
  int flat = 0;
  for (int col = 0; col < j_max - 1; ++col)
    for (int row = col + 1; row < j_max; ++row, ++flat) {
      const double z = cc.z(row, col);
      dy[flat] = dz(row, col) * (1.0 - z * z);
    }
  return dy;
}

}  // namespace

CausalParams ParamLayout::unpack(const Eigen::VectorXd& v, double fixed_k0) const {
  if (v.size() != dim_) throw numerical_error("unpack: dimension mismatch");
  CausalParams p;
  p.mu_active = v.segment(mu_active_offset(), j_);
  p.mu_control = v.segment(mu_control_offset(), j_);
  p.alpha = v.segment(alpha_offset(), j_);
  p.k0 = k0_free_ ? v[k0_offset()] : fixed_k0;
  const Eigen::VectorXd sd = v.segment(log_sd_offset(), j_).array().exp();
  const CorrChol cc = corr_chol_from_cpc(v.segment(corr_offset(), n_corr()), j_);
  Eigen::MatrixXd corr = cc.l * cc.l.transpose();
  Eigen::MatrixXd sigma = sd.asDiagonal() * corr * sd.asDiagonal();
  p.sigma = CovMatrix(std::move(sigma));
  return p;
}

Eigen::VectorXd ParamLayout::pack(const CausalParams& p) const {
  if (p.j_max() != j_) throw numerical_error("pack: dimension mismatch");
  Eigen::VectorXd v(dim_);
  v.segment(mu_active_offset(), j_) = p.mu_active;
  v.segment(mu_control_offset(), j_) = p.mu_control;
  v.segment(alpha_offset(), j_) = p.alpha;
  if (k0_free_) v[k0_offset()] = p.k0;
  const Eigen::VectorXd sd = p.sigma.mat().diagonal().cwiseSqrt();
  v.segment(log_sd_offset(), j_) = sd.array().log();
  Eigen::MatrixXd corr =
      sd.cwiseInverse().asDiagonal() * p.sigma.mat() * sd.cwiseInverse().asDiagonal();
  Eigen::LLT<Eigen::MatrixXd> llt(corr);
  if (llt.info() != Eigen::Success)
    throw numerical_error("pack: correlation matrix not positive definite");
  Eigen::MatrixXd l = llt.matrixL();
  int flat = 0;
  Eigen::VectorXd y(n_corr());
  // invert the CPC construction row by row
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(j_, j_);
  for (int i = 1; i < j_; ++i) {
    double s = 1.0;
    for (int j = 0; j < i; ++j) {
      const double zij = std::clamp(l(i, j) / s, -1.0 + 1e-12, 1.0 - 1e-12);
      z(i, j) = zij;
      s *= std::sqrt(1.0 - zij * zij);
    }
  }
  for (int col = 0; col < j_ - 1; ++col)
    for (int row = col + 1; row < j_; ++row, ++flat) y[flat] = std::atanh(z(row, col));
  v.segment(corr_offset(), n_corr()) = y;
  return v;
}

// ---------------------------------------------------------------------------
// ModelData

ModelData ModelData::build(const TrialDataset& ds, bool include_post_ice,
                           int exclude_patient) {
  const int jmax = ds.j_max();
  if (jmax > 50) throw data_error("ModelData: too many visits");
  ModelData md;
  md.j_ = jmax;
  md.include_post_ice_ = include_post_ice;
  md.d_counts_ = Eigen::VectorXd::Zero(jmax);

  std::map<std::uint64_t, std::size_t> index_of;
  double sum_base = 0.0;
  int n = 0;

  for (std::size_t row = 0; row < ds.patients.size(); ++row) {
    if (static_cast<int>(row) == exclude_patient) continue;
    const auto& pat = ds.patients[row];
    ++n;
    sum_base += pat.baseline;
    if (pat.arm == Arm::active) {
      ++md.n_active_;
      md.d_counts_[pat.d - 1] += 1.0;
    }

    std::vector<int> obs;
    std::vector<int> role;
    int d_key = 0;
    if (pat.arm == Arm::control) {
      for (int j = 0; j < jmax; ++j) {
        if (!is_missing(pat.y[j])) {
          obs.push_back(j);
          role.push_back(0);
        }
      }
    } else {
      for (int j = 0; j < pat.d; ++j) {
        obs.push_back(j);
        role.push_back(1);
      }
      if (pat.post_ice_observed()) {
        md.any_post_ice_observed_ = true;
        if (include_post_ice) {
          for (int j = pat.d; j < jmax; ++j) {
            obs.push_back(j);
            role.push_back(2);
          }
        }
      }
      d_key = pat.d;
    }
    if (obs.empty()) continue;

    std::uint64_t mask = 0;
    for (int j : obs) mask |= (1ull << j);
    const std::uint64_t key = (pat.arm == Arm::active ? 1ull : 0ull) |
                              (static_cast<std::uint64_t>(d_key) << 1) |
                              (mask << 8);
    auto it = index_of.find(key);
    if (it == index_of.end()) {
      Group g;
      g.obs = obs;
      g.role = role;
      g.d = d_key;
      const int k = static_cast<int>(obs.size());
      g.sum_v = Eigen::VectorXd::Zero(k);
      g.sum_vx = Eigen::VectorXd::Zero(k);
      g.sum_vv = Eigen::MatrixXd::Zero(k, k);
      it = index_of.emplace(key, md.groups_.size()).first;
      md.groups_.push_back(std::move(g));
    }
    Group& g = md.groups_[it->second];
    const int k = static_cast<int>(g.obs.size());
    Eigen::VectorXd val(k);
    for (int t = 0; t < k; ++t) val[t] = pat.y[g.obs[t]];
    g.n += 1.0;
    g.sum_x += pat.baseline;
    g.sum_xx += pat.baseline * pat.baseline;
    g.sum_v += val;
    g.sum_vx += val * pat.baseline;
    g.sum_vv += val * val.transpose();
    g.patient_rows.push_back(static_cast<int>(row));
  }

  md.n_patients_ = n;
  md.mean_baseline_ = (n > 0) ? sum_base / static_cast<double>(n) : 0.0;
  return md;
}

// ---------------------------------------------------------------------------
// LogPosterior

struct LogPosterior::Workspace {
  struct GroupWork {
    Eigen::MatrixXd s_g, s_inv, s2, gs, tmp;
    Eigen::VectorXd a, b, r1, rx, g1, gx;
    Eigen::LLT<Eigen::MatrixXd> llt;
    explicit GroupWork(int k)
        : s_g(k, k), s_inv(k, k), s2(k, k), gs(k, k), tmp(k, k), a(k), b(k),
          r1(k), rx(k), g1(k), gx(k), llt(k) {}
  };
  std::vector<GroupWork> groups;
  Eigen::VectorXd d_mu_a, d_mu_c, d_alpha, d_log_sd, d_y;
  Eigen::MatrixXd g_sigma, g_corr, dl;

  Workspace(const ModelData& md, int j_max) {
    groups.reserve(md.groups().size());
    for (const auto& g : md.groups())
      groups.emplace_back(static_cast<int>(g.obs.size()));
    d_mu_a.resize(j_max);
    d_mu_c.resize(j_max);
    d_alpha.resize(j_max);
    d_log_sd.resize(j_max);
    d_y.resize(j_max * (j_max - 1) / 2);
    g_sigma.resize(j_max, j_max);
    g_corr.resize(j_max, j_max);
    dl.resize(j_max, j_max);
  }
};

LogPosterior::LogPosterior(const ModelData& md, const PriorSpec& prior,
                           std::optional<double> fixed_k0)
    : md_(&md), prior_(prior), fixed_k0_(fixed_k0),
      layout_(md.j_max(), !fixed_k0.has_value()),
      work_(std::make_unique<Workspace>(md, md.j_max())) {
  prior_.validate();
}

LogPosterior::~LogPosterior() = default;
LogPosterior::LogPosterior(LogPosterior&&) noexcept = default;
LogPosterior& LogPosterior::operator=(LogPosterior&&) noexcept = default;

double LogPosterior::value(const UnconstrainedVector& v) const {
  return eval<false>(v, nullptr);
}

double LogPosterior::value_grad(const UnconstrainedVector& v,
                                Eigen::VectorXd& grad) const {
  grad.resize(layout_.dim());
  return eval<true>(v, &grad);
}

template <bool WithGrad>
double LogPosterior::eval(const UnconstrainedVector& v,
                          Eigen::VectorXd* grad) const {
  const int J = layout_.j_max();
  if (v.size() != layout_.dim())
    throw numerical_error("log_posterior: dimension mismatch");
  for (int i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i])) return kNegInf;

  const auto mu_a = v.segment(layout_.mu_active_offset(), J);
  const auto mu_c = v.segment(layout_.mu_control_offset(), J);
  const auto alpha = v.segment(layout_.alpha_offset(), J);
  const double k0 =
      layout_.k0_free() ? v[layout_.k0_offset()] : fixed_k0_.value();
  const auto log_sd = v.segment(layout_.log_sd_offset(), J);
  const auto y_cpc = v.segment(layout_.corr_offset(), layout_.n_corr());

  const Eigen::VectorXd sd = log_sd.array().exp();
  const CorrChol cc = corr_chol_from_cpc(y_cpc, J);
  Eigen::MatrixXd sigma(J, J);
  sigma.noalias() = cc.l * cc.l.transpose();
  sigma = sd.asDiagonal() * sigma * sd.asDiagonal();

  double lp = 0.0;
  double d_k0 = 0.0;
  Workspace& ws = *work_;
  if constexpr (WithGrad) {
    ws.d_mu_a.setZero();
    ws.d_mu_c.setZero();
    ws.d_alpha.setZero();
    ws.g_sigma.setZero();
  }

  const auto& groups = md_->groups();
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    auto& w = ws.groups[gi];
    const int k = static_cast<int>(g.obs.size());
    for (int a = 0; a < k; ++a)
      for (int b = 0; b <= a; ++b)
        w.s_g(a, b) = w.s_g(b, a) = sigma(g.obs[a], g.obs[b]);
    w.llt.compute(w.s_g);
    if (w.llt.info() != Eigen::Success) return kNegInf;
    const double logdet =
        2.0 * w.llt.matrixLLT().diagonal().array().log().sum();

    const double delta_d =
        (g.d >= 1) ? (mu_a[g.d - 1] - mu_c[g.d - 1]) : 0.0;
    for (int t = 0; t < k; ++t) {
      const int c = g.obs[t];
      w.b[t] = alpha[c];
      switch (g.role[t]) {
        case 0: w.a[t] = mu_c[c]; break;
        case 1: w.a[t] = mu_a[c]; break;
        default: w.a[t] = mu_c[c] + k0 * delta_d; break;
      }
    }

    w.r1 = g.sum_v - g.n * w.a - g.sum_x * w.b;
    w.rx = g.sum_vx - g.sum_x * w.a - g.sum_xx * w.b;
    w.s2 = g.sum_vv;
    w.s2.noalias() -= w.a * g.sum_v.transpose();
    w.s2.noalias() -= g.sum_v * w.a.transpose();
    w.s2.noalias() -= w.b * g.sum_vx.transpose();
    w.s2.noalias() -= g.sum_vx * w.b.transpose();
    w.s2.noalias() += g.n * w.a * w.a.transpose();
    w.s2.noalias() += g.sum_x * w.a * w.b.transpose();
    w.s2.noalias() += g.sum_x * w.b * w.a.transpose();
    w.s2.noalias() += g.sum_xx * w.b * w.b.transpose();

    w.s_inv.setIdentity();
    w.llt.solveInPlace(w.s_inv);
    lp -= 0.5 * (g.n * (k * kLog2Pi + logdet) +
                 w.s_inv.cwiseProduct(w.s2).sum());

    if constexpr (WithGrad) {
      w.g1.noalias() = w.s_inv * w.r1;
      w.gx.noalias() = w.s_inv * w.rx;
      w.tmp.noalias() = w.s_inv * w.s2;
      w.gs.noalias() = w.tmp * w.s_inv;
      w.gs -= g.n * w.s_inv;
      w.gs *= 0.5;
      for (int t = 0; t < k; ++t) {
        const int c = g.obs[t];
        ws.d_alpha[c] += w.gx[t];
        switch (g.role[t]) {
          case 0:
            ws.d_mu_c[c] += w.g1[t];
            break;
          case 1:
            ws.d_mu_a[c] += w.g1[t];
            break;
          default:
            ws.d_mu_c[c] += w.g1[t];
            d_k0 += w.g1[t] * delta_d;
            ws.d_mu_a[g.d - 1] += w.g1[t] * k0;
            ws.d_mu_c[g.d - 1] -= w.g1[t] * k0;
            break;
        }
        for (int u = 0; u < k; ++u) ws.g_sigma(c, g.obs[u]) += w.gs(t, u);
      }
    }
  }

  // priors and transform Jacobians
  const auto normal_term = [&](double x, double m, double s) {
    return -0.5 * kLog2Pi - std::log(s) - 0.5 * (x - m) * (x - m) / (s * s);
  };
  for (int j = 0; j < J; ++j) {
    lp += normal_term(mu_a[j], 0.0, prior_.mu_sd);
    lp += normal_term(mu_c[j], 0.0, prior_.mu_sd);
    lp += normal_term(alpha[j], 0.0, prior_.alpha_sd);
    // half-normal on the marginal SD plus the log-scale Jacobian
    lp += 0.5 * std::log(2.0 / M_PI) - std::log(prior_.sd_scale) -
          0.5 * sd[j] * sd[j] / (prior_.sd_scale * prior_.sd_scale) + log_sd[j];
  }
  if (layout_.k0_free()) lp += normal_term(k0, prior_.k0_mean, prior_.k0_sd);
  {
    int flat = 0;
    for (int col = 0; col < J - 1; ++col) {
      const double beta = prior_.corr_eta + 0.5 * (J - 2 - col);
      const double log_norm = -((2.0 * beta - 1.0) * std::log(2.0) +
                                2.0 * std::lgamma(beta) - std::lgamma(2.0 * beta));
      for (int row = col + 1; row < J; ++row, ++flat) {
        const double z = cc.z(row, col);
        lp += beta * std::log1p(-z * z) + log_norm;
      }
    }
  }
  if (!std::isfinite(lp)) return kNegInf;

  if constexpr (WithGrad) {
    for (int j = 0; j < J; ++j) {
      ws.d_mu_a[j] += -mu_a[j] / (prior_.mu_sd * prior_.mu_sd);
      ws.d_mu_c[j] += -mu_c[j] / (prior_.mu_sd * prior_.mu_sd);
      ws.d_alpha[j] += -alpha[j] / (prior_.alpha_sd * prior_.alpha_sd);
    }
    if (layout_.k0_free())
      d_k0 += -(k0 - prior_.k0_mean) / (prior_.k0_sd * prior_.k0_sd);

    // backprop through Sigma = D C D
    for (int a = 0; a < J; ++a) {
      ws.d_log_sd[a] = 2.0 * ws.g_sigma.row(a).cwiseProduct(sigma.row(a)).sum();
      ws.d_log_sd[a] +=
          -sd[a] * sd[a] / (prior_.sd_scale * prior_.sd_scale) + 1.0;
    }
    ws.g_corr = ws.g_sigma.cwiseProduct(sd * sd.transpose());
    ws.dl.noalias() = 2.0 * ws.g_corr * cc.l;
    ws.d_y = corr_chol_backprop(cc, ws.dl, J);
    {
      int flat = 0;
      for (int col = 0; col < J - 1; ++col) {
        const double beta = prior_.corr_eta + 0.5 * (J - 2 - col);
        for (int row = col + 1; row < J; ++row, ++flat)
          ws.d_y[flat] += -2.0 * beta * cc.z(row, col);
      }
    }

    grad->segment(layout_.mu_active_offset(), J) = ws.d_mu_a;
    grad->segment(layout_.mu_control_offset(), J) = ws.d_mu_c;
    grad->segment(layout_.alpha_offset(), J) = ws.d_alpha;
    if (layout_.k0_free()) (*grad)[layout_.k0_offset()] = d_k0;
    grad->segment(layout_.log_sd_offset(), J) = ws.d_log_sd;
    grad->segment(layout_.corr_offset(), layout_.n_corr()) = ws.d_y;
    for (int i = 0; i < grad->size(); ++i)
      if (!std::isfinite((*grad)[i])) return kNegInf;
  }
  return lp;
}

double log_posterior(const UnconstrainedVector& v, const TrialDataset& ds,
                     const PriorSpec& prior, bool include_post_ice) {
  ds.validate();
  const ModelData md = ModelData::build(ds, include_post_ice);
  const LogPosterior lp(md, prior);
  const double value = lp.value(v);
  if (std::isfinite(value)) return value;

  // attribute the failure: re-evaluate one patient at a time
  for (std::size_t i = 0; i < ds.patients.size(); ++i) {
    TrialDataset one;
    one.schedule = ds.schedule;
    one.patients.push_back(ds.patients[i]);
    const ModelData md_one = ModelData::build(one, include_post_ice);
    const LogPosterior lp_one(md_one, prior);
    if (!std::isfinite(lp_one.value(v)))
      throw numerical_error("log_posterior is non-finite; first offending patient: " +
                            ds.patients[i].id);
  }
  throw numerical_error(
      "log_posterior is non-finite at the given point (prior or covariance term)");
}

// ---------------------------------------------------------------------------
// L-BFGS MAP optimization

namespace {

struct OptimOutcome {
  Eigen::VectorXd x;
  double f = kNegInf;  // log-posterior at x
  double grad_sup = std::numeric_limits<double>::infinity();
  bool converged = false;
  int iterations = 0;
};

// Central finite differences of the analytic gradient give the Hessian of
// the log-posterior to ~1e-7 relative; ample for Newton steps.
Eigen::MatrixXd fd_hessian(const LogPosterior& lp, const Eigen::VectorXd& x) {
  const int n = static_cast<int>(x.size());
  Eigen::MatrixXd h(n, n);
  Eigen::VectorXd gp(n), gm(n);
  for (int i = 0; i < n; ++i) {
    const double step = 1e-4 * std::max(1.0, std::fabs(x[i]));
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += step;
    xm[i] -= step;
    const double fp = lp.value_grad(xp, gp);
    const double fm = lp.value_grad(xm, gm);
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      h.col(i).setZero();
      h(i, i) = -1.0;
      continue;
    }
    h.col(i) = (gp - gm) / (2.0 * step);
  }
  return 0.5 * (h + h.transpose());
}

// Newton ascent with a ridge fallback; the mean block of this posterior is
// too ill-conditioned for limited-memory quasi-Newton methods. The Hessian
// is refreshed lazily: full steps keep the current factorization, so warm
// restarts near the mode (jackknife, bootstrap) cost only gradient calls.
OptimOutcome newton_maximize(const LogPosterior& lp, const Eigen::VectorXd& x0,
                             const MapOptions& opts,
                             const Eigen::MatrixXd* neg_hess_hint = nullptr) {
  const int n = static_cast<int>(x0.size());
  OptimOutcome out;
  Eigen::VectorXd x = x0;
  Eigen::VectorXd g(n);
  double fx = lp.value_grad(x, g);
  if (!std::isfinite(fx)) return out;

  Eigen::MatrixXd neg_hess;
  bool have_hess = false, hess_is_fresh = false, factored = false;
  if (neg_hess_hint && neg_hess_hint->rows() == n) {
    neg_hess = *neg_hess_hint;
    have_hess = true;
  }
  Eigen::LLT<Eigen::MatrixXd> llt;
  bool use_fallback = false;
  double diag_scale = 1.0;

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    out.iterations = iter;
    if (g.cwiseAbs().maxCoeff() < opts.grad_tol) {
      out.converged = true;
      break;
    }

    if (!have_hess) {
      neg_hess = -fd_hessian(lp, x);
      have_hess = true;
      hess_is_fresh = true;
      factored = false;
    }
    if (!factored) {
      diag_scale = std::max(neg_hess.diagonal().cwiseAbs().maxCoeff(), 1e-8);
      use_fallback = true;
      double ridge = 0.0;
      for (int attempt = 0; attempt < 12; ++attempt) {
        Eigen::MatrixXd h = neg_hess;
        h.diagonal().array() += ridge;
        llt.compute(h);
        if (llt.info() == Eigen::Success) {
          const Eigen::VectorXd probe = llt.solve(g);
          if (probe.allFinite() && g.dot(probe) > 0.0) {
            use_fallback = false;
            break;
          }
        }
        ridge = (ridge == 0.0) ? 1e-6 * diag_scale : ridge * 10.0;
      }
      factored = true;
    }

    Eigen::VectorXd dir =
        use_fallback ? Eigen::VectorXd(g / diag_scale) : llt.solve(g);
    const double gd = g.dot(dir);
    if (!(gd > 0.0) || !dir.allFinite()) {
      if (!hess_is_fresh) {
        have_hess = false;
        continue;
      }
      break;
    }

    // Within f-noise of the mode, Armijo comparisons are meaningless; take
    // the (positive-definite) Newton step as-is so quadratic convergence can
    // finish the job.
    const bool below_noise =
        !use_fallback && gd < 1e-10 * (1.0 + std::fabs(fx));

    double step = 1.0;
    bool accepted = false;
    Eigen::VectorXd x_new, g_new(n);
    double f_new = 0.0;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + step * dir;
      f_new = lp.value_grad(x_new, g_new);
      if (std::isfinite(f_new) &&
          (below_noise || f_new >= fx + 1e-4 * step * gd)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (!hess_is_fresh) {
        have_hess = false;  // retry from the same point with a fresh Hessian
        continue;
      }
      break;
    }
    const double g_sup_before = g.cwiseAbs().maxCoeff();
    x = std::move(x_new);
    g = g_new;
    fx = f_new;
    const bool stalled_grad =
        below_noise && g.cwiseAbs().maxCoeff() > 0.9 * g_sup_before;
    if (stalled_grad) {
      if (hess_is_fresh) break;  // at the attainable floor
      have_hess = false;
    } else if (step < 1.0 && !hess_is_fresh) {
      have_hess = false;  // stale curvature forced a backtrack
    }
    hess_is_fresh = false;
  }

  if (g.cwiseAbs().maxCoeff() < opts.grad_tol) out.converged = true;
  out.x = std::move(x);
  out.f = fx;
  out.grad_sup = g.cwiseAbs().maxCoeff();
  return out;
}

// Moment-style starting values computed from the grouped statistics.
CausalParams moment_start(const ModelData& md, double corr_base, double k0_start) {
  const int J = md.j_max();
  Eigen::VectorXd n0 = Eigen::VectorXd::Zero(J), n1 = Eigen::VectorXd::Zero(J);
  Eigen::VectorXd s0 = Eigen::VectorXd::Zero(J), s1 = Eigen::VectorXd::Zero(J);
  Eigen::VectorXd q0 = Eigen::VectorXd::Zero(J), q1 = Eigen::VectorXd::Zero(J);
  Eigen::VectorXd x0 = Eigen::VectorXd::Zero(J), x1 = Eigen::VectorXd::Zero(J);
  Eigen::VectorXd xx0 = Eigen::VectorXd::Zero(J), xx1 = Eigen::VectorXd::Zero(J);
  Eigen::VectorXd vx0 = Eigen::VectorXd::Zero(J), vx1 = Eigen::VectorXd::Zero(J);

  for (const auto& g : md.groups()) {
    for (std::size_t t = 0; t < g.obs.size(); ++t) {
      if (g.role[t] == 2) continue;  // exclude post-ICE values from starts
      const int c = g.obs[t];
      auto& nn = (g.role[t] == 0) ? n0 : n1;
      auto& ss = (g.role[t] == 0) ? s0 : s1;
      auto& qq = (g.role[t] == 0) ? q0 : q1;
      auto& xs = (g.role[t] == 0) ? x0 : x1;
      auto& xxs = (g.role[t] == 0) ? xx0 : xx1;
      auto& vxs = (g.role[t] == 0) ? vx0 : vx1;
      nn[c] += g.n;
      ss[c] += g.sum_v[t];
      qq[c] += g.sum_vv(t, t);
      xs[c] += g.sum_x;
      xxs[c] += g.sum_xx;
      vxs[c] += g.sum_vx[t];
    }
  }

  CausalParams p;
  p.mu_active.resize(J);
  p.mu_control.resize(J);
  p.alpha.resize(J);
  Eigen::VectorXd var(J);
  for (int j = 0; j < J; ++j) {
    double sxx = 0.0, sxy = 0.0;
    if (n0[j] > 1) {
      sxx += xx0[j] - x0[j] * x0[j] / n0[j];
      sxy += vx0[j] - s0[j] * x0[j] / n0[j];
    }
    if (n1[j] > 1) {
      sxx += xx1[j] - x1[j] * x1[j] / n1[j];
      sxy += vx1[j] - s1[j] * x1[j] / n1[j];
    }
    const double slope = (sxx > 1e-8) ? sxy / sxx : 0.0;
    p.alpha[j] = slope;
    const double mc = (n0[j] > 0) ? s0[j] / n0[j] - slope * x0[j] / n0[j] : 0.0;
    const double ma = (n1[j] > 0) ? s1[j] / n1[j] - slope * x1[j] / n1[j] : mc;
    p.mu_control[j] = mc;
    p.mu_active[j] = (n1[j] > 0) ? ma : mc;
    double vtot = 1.0, ntot = n0[j] + n1[j];
    if (ntot > 2) {
      double ssq = 0.0;
      if (n0[j] > 0) ssq += q0[j] - s0[j] * s0[j] / n0[j];
      if (n1[j] > 0) ssq += q1[j] - s1[j] * s1[j] / n1[j];
      vtot = std::max(ssq / ntot, 1e-4);
    }
    var[j] = vtot;
  }
  Eigen::MatrixXd corr(J, J);
  for (int i = 0; i < J; ++i)
    for (int j = 0; j < J; ++j)
      corr(i, j) = std::pow(corr_base, std::abs(i - j));
  Eigen::VectorXd sd = var.cwiseSqrt();
  p.sigma = CovMatrix(sd.asDiagonal() * corr * sd.asDiagonal());
  p.k0 = k0_start;
  return p;
}

}  // namespace

MapResult fit_map(const ModelData& md, const PriorSpec& prior,
                  std::optional<double> fixed_k0, const MapOptions& opts) {
  const LogPosterior lp(md, prior, fixed_k0);
  const ParamLayout& layout = lp.layout();

  std::vector<Eigen::VectorXd> starts;
  starts.push_back(layout.pack(moment_start(md, 0.5, fixed_k0 ? *fixed_k0 : 0.5)));
  {
    CausalParams null_start = moment_start(md, 0.3, fixed_k0 ? *fixed_k0 : 0.0);
    // zero-effect start: pool the arms
    Eigen::VectorXd pooled = 0.5 * (null_start.mu_active + null_start.mu_control);
    null_start.mu_active = pooled;
    null_start.mu_control = pooled;
    null_start.alpha.setZero();
    null_start.k0 = fixed_k0 ? *fixed_k0 : 0.0;
    starts.push_back(layout.pack(null_start));
  }
  {
    Eigen::VectorXd perturbed = starts[0];
    for (int i = 0; i < perturbed.size(); ++i)
      perturbed[i] += (i % 2 == 0 ? 0.05 : -0.05);
    starts.push_back(perturbed);
  }

  OptimOutcome best;
  int starts_converged = 0;
  for (const auto& s : starts) {
    OptimOutcome o = newton_maximize(lp, s, opts);
    if (o.converged) ++starts_converged;
    const bool better = std::isfinite(o.f) &&
                        (!std::isfinite(best.f) ||
                         (o.converged && !best.converged) ||
                         (o.converged == best.converged && o.f > best.f));
    if (better) best = std::move(o);
  }
  if (!std::isfinite(best.f))
    throw numerical_error("fit_map: all starts failed (non-finite posterior)");
  if (best.grad_sup > 1e-2)
    throw numerical_error("fit_map: optimization did not converge (grad sup-norm " +
                          std::to_string(best.grad_sup) + ")");

  MapResult res;
  res.v = best.x;
  res.params = layout.unpack(best.x, fixed_k0.value_or(0.0));
  res.log_posterior = best.f;
  res.grad_sup_norm = best.grad_sup;
  res.converged = best.converged;
  res.iterations = best.iterations;
  res.starts_converged = starts_converged;
  res.neg_hessian = -fd_hessian(lp, best.x);
  return res;
}

MapResult fit_map(const TrialDataset& ds, const PriorSpec& prior,
                  bool include_post_ice, std::optional<double> fixed_k0,
                  const MapOptions& opts) {
  ds.validate();
  const ModelData md = ModelData::build(ds, include_post_ice);
  return fit_map(md, prior, fixed_k0, opts);
}

MapResult fit_map_from(const ModelData& md, const PriorSpec& prior,
                       const UnconstrainedVector& v0,
                       std::optional<double> fixed_k0, const MapOptions& opts,
                       const Eigen::MatrixXd* neg_hess_hint) {
  const LogPosterior lp(md, prior, fixed_k0);
  OptimOutcome o = newton_maximize(lp, v0, opts, neg_hess_hint);
  if (!std::isfinite(o.f)) {
    // fall back to the deterministic starts
    return fit_map(md, prior, fixed_k0, opts);
  }
  MapResult res;
  res.v = o.x;
  res.params = lp.layout().unpack(o.x, fixed_k0.value_or(0.0));
  res.log_posterior = o.f;
  res.grad_sup_norm = o.grad_sup;
  res.converged = o.converged;
  res.iterations = o.iterations;
  res.starts_converged = o.converged ? 1 : 0;
  return res;
}

// ---------------------------------------------------------------------------
// Posterior sampling

PosteriorDraws sample_posterior(const TrialDataset& ds, const PriorSpec& prior,
                                bool include_post_ice,
                                const McmcSettings& settings,
                                std::uint64_t seed,
                                std::optional<double> fixed_k0) {
  ds.validate();
  prior.validate();
  if (settings.chains < 1 || settings.warmup < 0 || settings.keep < 1 ||
      settings.thin < 1)
    throw config_error("sample_posterior: invalid MCMC settings");

  const ModelData md = ModelData::build(ds, include_post_ice);
  const LogPosterior lp(md, prior, fixed_k0);
  const ParamLayout& layout = lp.layout();
  const int dim = layout.dim();

  // center the chains at the MAP; its negative Hessian doubles as a dense
  // mass matrix, which removes the intercept/slope ridge from the geometry
  MapOptions map_opts;
  map_opts.grad_tol = 1e-5;
  map_opts.max_iterations = 300;
  Eigen::VectorXd v_center;
  Eigen::MatrixXd neg_hess;
  try {
    MapResult map = fit_map(md, prior, fixed_k0, map_opts);
    v_center = std::move(map.v);
    neg_hess = std::move(map.neg_hessian);
  } catch (const numerical_error&) {
    v_center = layout.pack(moment_start(md, 0.5, fixed_k0 ? *fixed_k0 : 0.0));
    neg_hess = -fd_hessian(lp, v_center);
  }
  Eigen::VectorXd diag_metric(dim);
  for (int i = 0; i < dim; ++i)
    diag_metric[i] = (neg_hess(i, i) > 1e-8)
                         ? std::clamp(1.0 / neg_hess(i, i), 1e-8, 1e8)
                         : 1.0;

  NutsSampler::Options nuts_opts;
  nuts_opts.target_accept = settings.target_accept;
  nuts_opts.max_depth = settings.max_depth;

  auto target = [&lp](const Eigen::VectorXd& q, Eigen::VectorXd& grad) {
    return lp.value_grad(q, grad);
  };

  PosteriorDraws out;
  out.chains = settings.chains;
  out.warmup = settings.warmup;
  out.kept_per_chain = settings.keep;
  out.seed = seed;
  for (int i = 0; i < dim; ++i) out.param_names.push_back(layout.param_name(i));
  out.flat.resize(static_cast<Eigen::Index>(settings.chains) * settings.keep, dim);

  std::vector<Eigen::MatrixXd> chain_draws;
  int total_divergences = 0;
  for (int c = 0; c < settings.chains; ++c) {
    RngStream rng = derive_stream(seed, 0xC0DE, static_cast<std::uint64_t>(c));
    Eigen::VectorXd q0 = v_center;
    for (int i = 0; i < dim; ++i)
      q0[i] += std::sqrt(diag_metric[i]) * rng.normal();
    if (!std::isfinite(lp.value(q0))) q0 = v_center;

    NutsSampler sampler(target, dim, nuts_opts);
    if (!sampler.set_dense_metric(neg_hess)) sampler.set_inv_metric(diag_metric);
    NutsSampler::Result r =
        sampler.run(q0, settings.warmup, settings.keep, settings.thin, rng);
    total_divergences += r.divergences;
    out.flat.block(static_cast<Eigen::Index>(c) * settings.keep, 0,
                   settings.keep, dim) = r.draws;
    chain_draws.push_back(std::move(r.draws));
  }

  out.draws.reserve(static_cast<std::size_t>(settings.chains) * settings.keep);
  for (int c = 0; c < settings.chains; ++c)
    for (int i = 0; i < settings.keep; ++i)
      out.draws.push_back(
          layout.unpack(chain_draws[c].row(i).transpose(), lp.fixed_k0_value()));

  // diagnostics on every coordinate; contract thresholds on k0 and the mean
  // intercepts
  const Eigen::Index total_kept =
      static_cast<Eigen::Index>(settings.chains) * settings.keep;
  if (settings.keep >= 4) {
    for (int i = 0; i < dim; ++i) {
      std::vector<Eigen::VectorXd> per_chain;
      for (int c = 0; c < settings.chains; ++c)
        per_chain.push_back(chain_draws[c].col(i));
      const ChainDiagnostics diag = split_rhat_ess(per_chain);
      out.rhat[out.param_names[i]] = diag.rhat;
      out.ess[out.param_names[i]] = diag.ess;
    }
    const double ess_threshold =
        std::min(400.0, 0.5 * static_cast<double>(total_kept));
    for (int i = 0; i < dim; ++i) {
      const std::string& name = out.param_names[i];
      const bool tracked = name == "k0" || name.rfind("mu_", 0) == 0;
      if (!tracked) continue;
      const double rh = out.rhat[name];
      const double es = out.ess[name];
      if (!(rh < 1.01) || !(es >= ess_threshold)) {
        out.diagnostics_ok = false;
        out.warnings.push_back("diagnostics: " + name + " rhat=" +
                               std::to_string(rh) + " ess=" + std::to_string(es));
      }
    }
  }
  if (total_divergences > 0) {
    out.warnings.push_back("sampler reported " +
                           std::to_string(total_divergences) +
                           " post-warmup divergences");
    if (total_divergences > total_kept / 100) out.diagnostics_ok = false;
  }
  return out;
}

void draws_to_csv(const PosteriorDraws& draws, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open '" + path + "' for writing");
  for (std::size_t i = 0; i < draws.param_names.size(); ++i) {
    if (i) out << ',';
    out << draws.param_names[i];
  }
  out << '\n';
  char buf[40];
  for (Eigen::Index r = 0; r < draws.flat.rows(); ++r) {
    for (Eigen::Index c = 0; c < draws.flat.cols(); ++c) {
      if (c) out << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", draws.flat(r, c));
      out << buf;
    }
    out << '\n';
  }
}

std::vector<Eigen::VectorXd> sample_pi(const TrialDataset& ds,
                                       double dirichlet_alpha, int n_draws,
                                       RngStream& rng) {
  ds.validate();
  if (!(dirichlet_alpha > 0.0))
    throw config_error("sample_pi: dirichlet_alpha must be > 0");
  const int jmax = ds.j_max();
  Eigen::VectorXd alpha = Eigen::VectorXd::Constant(jmax, dirichlet_alpha);
  for (const auto& p : ds.patients)
    if (p.arm == Arm::active) alpha[p.d - 1] += 1.0;
  std::vector<Eigen::VectorXd> draws;
  draws.reserve(n_draws);
  for (int i = 0; i < n_draws; ++i) draws.push_back(rng.dirichlet(alpha));
  return draws;
}

EstimateReport estimate_effect_bcm(const PosteriorDraws& draws,
                                   const std::vector<Eigen::VectorXd>& pi_draws,
                                   double mean_baseline) {
  if (draws.draws.empty())
    throw numerical_error("estimate_effect_bcm: no posterior draws");
  if (draws.draws.size() != pi_draws.size())
    throw numerical_error("estimate_effect_bcm: draw-count mismatch");

  std::vector<double> effects(draws.draws.size());
  for (std::size_t l = 0; l < draws.draws.size(); ++l) {
    CausalParams p = draws.draws[l];
    p.pi = pi_draws[l];
    effects[l] = policy_effect(p, mean_baseline);
  }

  EstimateReport r;
  r.method = "bcm";
  r.point = mean(effects);
  r.se = (effects.size() > 1) ? sample_sd(effects) : 0.0;
  r.ci_low = quantile_type7(effects, 0.025);
  r.ci_high = quantile_type7(effects, 0.975);
  r.df = std::numeric_limits<double>::infinity();
  r.aux["ci_low_normal"] = r.point - 1.959963984540054 * r.se;
  r.aux["ci_high_normal"] = r.point + 1.959963984540054 * r.se;
  if (draws.rhat.count("k0")) {
    r.aux["rhat_k0"] = draws.rhat.at("k0");
    r.aux["ess_k0"] = draws.ess.at("k0");
  }
  if (!draws.diagnostics_ok) {
    r.warning = true;
    r.message = "chain diagnostics outside thresholds";
  }
  return r;
}

}  // namespace bcm
