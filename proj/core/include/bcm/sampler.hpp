#pragma once

#include <functional>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "bcm/rng.hpp"

namespace bcm {

// No-U-Turn sampler with multinomial trajectory sampling and dual-averaging
// step-size adaptation (Hoffman & Gelman 2014; Betancourt 2017). The mass
// matrix is either a windowed-adaptive diagonal or a fixed dense matrix
// supplied by the caller (typically the negative Hessian at the mode).
class NutsSampler {
 public:
  // Returns log density and fills the gradient; may return -inf outside the
  // valid region (the gradient is then ignored).
  using LogDensityGrad =
      std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

  struct Options {
    double target_accept = 0.8;
    int max_depth = 10;
    double max_energy_error = 1000.0;
  };

  struct Result {
    Eigen::MatrixXd draws;  // keep x dim
    double step_size = 0.0;
    int divergences = 0;       // post-warmup
    double mean_accept = 0.0;  // post-warmup
  };

  NutsSampler(LogDensityGrad target, int dim, Options opts);
  NutsSampler(LogDensityGrad target, int dim)
      : NutsSampler(std::move(target), dim, Options{}) {}

  void set_inv_metric(Eigen::VectorXd inv_metric);
  // Fixed dense mass matrix; returns false (keeping the current metric) when
  // the matrix is not positive definite.
  bool set_dense_metric(const Eigen::MatrixXd& metric);

  Result run(const Eigen::VectorXd& q0, int warmup, int keep, int thin,
             RngStream& rng);

 private:
  struct Point {
    Eigen::VectorXd q;
    Eigen::VectorXd p;
    Eigen::VectorXd grad;
    double logp = 0.0;
  };

  struct Tree {
    Point left, right, proposal;
    Eigen::VectorXd rho;
    double log_w = 0.0;
    double sum_accept = 0.0;
    int n_leapfrog = 0;
    bool ok = true;
    bool divergent = false;
  };

  Eigen::VectorXd velocity(const Eigen::VectorXd& p) const;
  Eigen::VectorXd draw_momentum(RngStream& rng) const;
  double hamiltonian(const Point& z) const;
  void leapfrog(Point& z, double eps) const;
  bool no_uturn(const Point& left, const Point& right,
                const Eigen::VectorXd& rho) const;
  Tree build_tree(int depth, const Point& from, int dir, double h0, double eps,
                  RngStream& rng) const;
  double find_initial_step(const Point& z0, RngStream& rng) const;

  LogDensityGrad target_;
  int dim_;
  Options opts_;
  bool dense_ = false;
  Eigen::VectorXd inv_metric_;          // diagonal mode
  Eigen::LLT<Eigen::MatrixXd> metric_llt_;  // dense mode
};

}  // namespace bcm
