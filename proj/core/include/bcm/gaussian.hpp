#pragma once

#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "bcm/rng.hpp"

namespace bcm {

// Symmetric positive-definite covariance matrix. Construction validates
// symmetry (1e-12 relative) and factorizes once; a single jitter of
// 1e-10 * trace/dim is applied if the first Cholesky fails.
class CovMatrix {
 public:
  CovMatrix() = default;
  explicit CovMatrix(Eigen::MatrixXd m);

  int dim() const { return static_cast<int>(mat_.rows()); }
  const Eigen::MatrixXd& mat() const { return mat_; }
  const Eigen::MatrixXd& chol_lower() const { return chol_; }
  double log_det() const;

  Eigen::MatrixXd submatrix(const std::vector<int>& idx) const;

 private:
  Eigen::MatrixXd mat_;
  Eigen::MatrixXd chol_;
};

struct ConditionalGaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // positive semi-definite
};

// First-order spatial power covariance: entry (i,j) =
// rho^{|t_i - t_j|/4} * sqrt(v_i * v_j).
CovMatrix spatial_power_cov(const Eigen::VectorXd& variances,
                            const Eigen::VectorXd& times, double rho);

// Distribution of the unobserved components given cov(obs_idx) = obs_vals.
// obs_idx must be a nonempty proper subset of 0..dim-1.
ConditionalGaussian mvn_condition(const Eigen::VectorXd& mean,
                                  const CovMatrix& cov,
                                  const std::vector<int>& obs_idx,
                                  const Eigen::VectorXd& obs_vals);

double mvn_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                  const CovMatrix& cov);

// Draws from a (possibly semi-definite) conditional Gaussian. Consumes
// exactly dim standard normals from the stream.
Eigen::VectorXd mvn_sample(const ConditionalGaussian& g, RngStream& rng);

}  // namespace bcm
