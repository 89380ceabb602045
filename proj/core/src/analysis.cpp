#include "bcm/analysis.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include "bcm/errors.hpp"
#include "bcm/stats.hpp"

namespace bcm {

AncovaFit ancova(const TrialDataset& ds) {
  ds.validate();
  const int jmax = ds.j_max();
  const int n = static_cast<int>(ds.patients.size());
  if (n < 4) throw data_error("ancova: need at least 4 patients");
  Eigen::MatrixXd x(n, 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    const auto& p = ds.patients[i];
    if (!p.observed(jmax))
      throw data_error("ancova: patient " + p.id + " missing final visit");
    x(i, 0) = 1.0;
    x(i, 1) = p.baseline;
    x(i, 2) = (p.arm == Arm::active) ? 1.0 : 0.0;
    y[i] = p.y[jmax - 1];
  }
  Eigen::MatrixXd xtx = x.transpose() * x;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(xtx);
  if (lu.rank() < 3) throw numerical_error("ancova: rank-deficient design");
  Eigen::MatrixXd xtx_inv = lu.inverse();
  Eigen::VectorXd beta = xtx_inv * (x.transpose() * y);
  const double rss = (y - x * beta).squaredNorm();
  const double df = static_cast<double>(n - 3);
  const double sigma2 = rss / df;

  AncovaFit fit;
  fit.intercept = beta[0];
  fit.baseline_coef = beta[1];
  fit.estimate = beta[2];
  fit.se = std::sqrt(sigma2 * xtx_inv(2, 2));
  fit.df = df;
  return fit;
}

std::pair<double, double> interval(double point, double se, double df) {
  if (se < 0.0) throw numerical_error("interval: se must be >= 0");
  const double q = std::isfinite(df) ? student_t_quantile(0.975, df)
                                     : normal_quantile(0.975);
  return {point - q * se, point + q * se};
}

bool covered(const EstimateReport& r, double truth) {
  if (!(r.ci_low <= r.ci_high))
    throw numerical_error("covered: invalid interval");
  return r.ci_low <= truth && truth <= r.ci_high;
}

std::string report_to_json(const EstimateReport& r) {
  nlohmann::json j;
  j["method"] = r.method;
  j["point"] = r.point;
  j["se"] = r.se;
  j["ci_low"] = r.ci_low;
  j["ci_high"] = r.ci_high;
  if (std::isfinite(r.df)) j["df"] = r.df;
  if (!r.aux.empty()) j["aux"] = r.aux;
  if (r.warning) {
    j["warning"] = true;
    j["message"] = r.message;
  }
  return j.dump(2);
}

}  // namespace bcm
