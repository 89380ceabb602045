#include "bcm/gaussian.hpp"

#include <cmath>

#include <Eigen/Eigenvalues>

#include "bcm/errors.hpp"

namespace bcm {

CovMatrix::CovMatrix(Eigen::MatrixXd m) {
  if (m.rows() != m.cols() || m.rows() == 0)
    throw numerical_error("covariance matrix must be square and nonempty");
  const double scale = m.cwiseAbs().maxCoeff();
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-12 * std::max(scale, 1.0))
    throw numerical_error("covariance matrix is not symmetric");
  mat_ = 0.5 * (m + m.transpose());

  Eigen::LLT<Eigen::MatrixXd> llt(mat_);
  if (llt.info() != Eigen::Success) {
    const double jitter = 1e-10 * mat_.trace() / static_cast<double>(mat_.rows());
    mat_.diagonal().array() += jitter;
    llt.compute(mat_);
    if (llt.info() != Eigen::Success)
      throw numerical_error("covariance matrix is not positive definite");
  }
  chol_ = llt.matrixL();
}

double CovMatrix::log_det() const {
  return 2.0 * chol_.diagonal().array().log().sum();
}

Eigen::MatrixXd CovMatrix::submatrix(const std::vector<int>& idx) const {
  const int k = static_cast<int>(idx.size());
  Eigen::MatrixXd out(k, k);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b) out(a, b) = mat_(idx[a], idx[b]);
  return out;
}

CovMatrix spatial_power_cov(const Eigen::VectorXd& variances,
                            const Eigen::VectorXd& times, double rho) {
  const int n = static_cast<int>(variances.size());
  if (times.size() != n)
    throw numerical_error("spatial_power_cov: dimension mismatch");
  if (!(rho > 0.0 && rho < 1.0))
    throw numerical_error("spatial_power_cov: rho must be in (0,1)");
  for (int i = 0; i < n; ++i) {
    if (!(variances[i] > 0.0))
      throw numerical_error("spatial_power_cov: variances must be positive");
    if (i > 0 && !(times[i] > times[i - 1]))
      throw numerical_error("spatial_power_cov: times must be increasing");
  }
  Eigen::MatrixXd m(n, n);
  for (int i = 0; i < n; ++i) {
    m(i, i) = variances[i];
    for (int j = 0; j < i; ++j) {
      const double corr = std::pow(rho, std::fabs(times[i] - times[j]) / 4.0);
      m(i, j) = m(j, i) = corr * std::sqrt(variances[i] * variances[j]);
    }
  }
  return CovMatrix(std::move(m));
}

ConditionalGaussian mvn_condition(const Eigen::VectorXd& mean,
                                  const CovMatrix& cov,
                                  const std::vector<int>& obs_idx,
                                  const Eigen::VectorXd& obs_vals) {
  const int dim = cov.dim();
  const int no = static_cast<int>(obs_idx.size());
  if (no == 0 || no >= dim)
    throw numerical_error("mvn_condition: obs_idx must be a nonempty proper subset");
  if (obs_vals.size() != no)
    throw numerical_error("mvn_condition: obs_vals size mismatch");

  std::vector<char> observed(dim, 0);
  for (int i : obs_idx) {
    if (i < 0 || i >= dim) throw numerical_error("mvn_condition: index out of range");
    if (observed[i]) throw numerical_error("mvn_condition: duplicate index");
    observed[i] = 1;
  }
  std::vector<int> un_idx;
  un_idx.reserve(dim - no);
  for (int i = 0; i < dim; ++i)
    if (!observed[i]) un_idx.push_back(i);
  const int nu = static_cast<int>(un_idx.size());

  Eigen::MatrixXd s_oo(no, no), s_uo(nu, no), s_uu(nu, nu);
  for (int a = 0; a < no; ++a)
    for (int b = 0; b < no; ++b) s_oo(a, b) = cov.mat()(obs_idx[a], obs_idx[b]);
  for (int a = 0; a < nu; ++a)
    for (int b = 0; b < no; ++b) s_uo(a, b) = cov.mat()(un_idx[a], obs_idx[b]);
  for (int a = 0; a < nu; ++a)
    for (int b = 0; b < nu; ++b) s_uu(a, b) = cov.mat()(un_idx[a], un_idx[b]);

  Eigen::LLT<Eigen::MatrixXd> llt(s_oo);
  if (llt.info() != Eigen::Success)
    throw numerical_error("mvn_condition: observed block is not positive definite");
  if (llt.rcond() < 1e-12)
    throw numerical_error("mvn_condition: observed block is numerically singular");

  // regression coefficients of unobserved on observed
  Eigen::MatrixXd beta = llt.solve(s_uo.transpose()).transpose();

  Eigen::VectorXd mean_o(no), mean_u(nu);
  for (int a = 0; a < no; ++a) mean_o[a] = mean[obs_idx[a]];
  for (int a = 0; a < nu; ++a) mean_u[a] = mean[un_idx[a]];

  ConditionalGaussian g;
  g.mean = mean_u + beta * (obs_vals - mean_o);
  g.cov = s_uu - beta * s_uo.transpose();
  g.cov = 0.5 * (g.cov + g.cov.transpose());
  return g;
}

double mvn_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                  const CovMatrix& cov) {
  const int d = cov.dim();
  if (x.size() != d || mean.size() != d)
    throw numerical_error("mvn_logpdf: dimension mismatch");
  const Eigen::VectorXd z =
      cov.chol_lower().triangularView<Eigen::Lower>().solve(x - mean);
  return -0.5 * (d * std::log(2.0 * M_PI) + cov.log_det() + z.squaredNorm());
}

Eigen::VectorXd mvn_sample(const ConditionalGaussian& g, RngStream& rng) {
  const int d = static_cast<int>(g.mean.size());
  const Eigen::VectorXd z = rng.normal_vector(d);
  const double scale = g.cov.cwiseAbs().maxCoeff();
  if (scale == 0.0) return g.mean;

  Eigen::LLT<Eigen::MatrixXd> llt(g.cov);
  if (llt.info() == Eigen::Success) {
    return g.mean + Eigen::MatrixXd(llt.matrixL()) * z;
  }
  // semi-definite conditional covariances: factor via eigenvalues
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g.cov);
  Eigen::VectorXd ev = es.eigenvalues();
  const double largest = ev.cwiseAbs().maxCoeff();
  for (int i = 0; i < d; ++i) {
    if (ev[i] < -1e-10 * largest)
      throw numerical_error("mvn_sample: covariance is not positive semi-definite");
    ev[i] = std::max(ev[i], 0.0);
  }
  return g.mean + es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * z;
}

}  // namespace bcm
