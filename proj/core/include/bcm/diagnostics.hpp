#pragma once

#include <vector>

#include <Eigen/Core>

namespace bcm {

struct ChainDiagnostics {
  double rhat = 0.0;  // NaN when undefined (constant chains)
  double ess = 0.0;
};

// Split-Rhat on the raw draws and rank-normalized effective sample size
// (Vehtari et al. 2021). Input: one vector of draws per chain, all of equal
// length >= 4.
ChainDiagnostics split_rhat_ess(const std::vector<Eigen::VectorXd>& chains);

}  // namespace bcm
