#include "bcm/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "bcm/errors.hpp"
#include "bcm/stats.hpp"

namespace bcm {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Splits every chain in half; odd middles are dropped.
std::vector<Eigen::VectorXd> split_chains(
    const std::vector<Eigen::VectorXd>& chains) {
  std::vector<Eigen::VectorXd> out;
  const auto half = static_cast<Eigen::Index>(chains.front().size() / 2);
  for (const auto& c : chains) {
    out.push_back(c.head(half));
    out.push_back(c.tail(half));
  }
  return out;
}

double chain_mean(const Eigen::VectorXd& c) { return c.mean(); }

double chain_var(const Eigen::VectorXd& c) {
  const double m = c.mean();
  return (c.array() - m).square().sum() / static_cast<double>(c.size() - 1);
}

// Average ranks across the pooled draws, mapped through the normal quantile.
std::vector<Eigen::VectorXd> rank_normalize(
    const std::vector<Eigen::VectorXd>& chains) {
  const auto n = chains.front().size();
  const std::size_t total = chains.size() * static_cast<std::size_t>(n);
  std::vector<std::pair<double, std::size_t>> vals;
  vals.reserve(total);
  for (std::size_t c = 0; c < chains.size(); ++c)
    for (Eigen::Index i = 0; i < n; ++i)
      vals.emplace_back(chains[c][i], c * static_cast<std::size_t>(n) +
                                          static_cast<std::size_t>(i));
  std::sort(vals.begin(), vals.end());

  std::vector<double> rank(total);
  std::size_t i = 0;
  while (i < total) {
    std::size_t j = i;
    while (j + 1 < total && vals[j + 1].first == vals[i].first) ++j;
    const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[vals[k].second] = avg;
    i = j + 1;
  }

  const double denom = static_cast<double>(total) + 0.25;
  std::vector<Eigen::VectorXd> out(chains.size(), Eigen::VectorXd(n));
  for (std::size_t c = 0; c < chains.size(); ++c)
    for (Eigen::Index k = 0; k < n; ++k) {
      const double p =
          (rank[c * static_cast<std::size_t>(n) + static_cast<std::size_t>(k)] -
           0.375) /
          denom;
      out[c][k] = normal_quantile(p);
    }
  return out;
}

// Biased (1/N) autocovariance at a given lag.
double autocovariance(const Eigen::VectorXd& c, Eigen::Index lag) {
  const double m = c.mean();
  const Eigen::Index n = c.size();
  double s = 0.0;
  for (Eigen::Index i = 0; i + lag < n; ++i)
    s += (c[i] - m) * (c[i + lag] - m);
  return s / static_cast<double>(n);
}

double compute_rhat(const std::vector<Eigen::VectorXd>& split) {
  const double n = static_cast<double>(split.front().size());
  const double m = static_cast<double>(split.size());
  std::vector<double> means, vars;
  for (const auto& c : split) {
    means.push_back(chain_mean(c));
    vars.push_back(chain_var(c));
  }
  const double w = mean(vars);
  if (!(w > 0.0)) return kNaN;
  const double mean_of_means = mean(means);
  double b = 0.0;
  for (double mu : means) b += (mu - mean_of_means) * (mu - mean_of_means);
  b *= n / (m - 1.0);
  const double var_plus = (n - 1.0) / n * w + b / n;
  return std::sqrt(var_plus / w);
}

double compute_ess(const std::vector<Eigen::VectorXd>& split) {
  const auto n = split.front().size();
  const double dn = static_cast<double>(n);
  const double dm = static_cast<double>(split.size());

  const auto z = rank_normalize(split);
  for (const auto& c : z)
    if (!std::isfinite(c[0])) return kNaN;

  std::vector<double> means, vars;
  for (const auto& c : z) {
    means.push_back(chain_mean(c));
    vars.push_back(chain_var(c));
  }
  const double w = mean(vars);
  if (!(w > 0.0)) return kNaN;
  const double mean_of_means = mean(means);
  double b_over_n = 0.0;
  for (double mu : means) b_over_n += (mu - mean_of_means) * (mu - mean_of_means);
  b_over_n /= (dm - 1.0);
  const double var_plus = (dn - 1.0) / dn * w + b_over_n;

  // Geyer initial monotone positive sequence on the combined correlations
  double tau_sum = 0.0;  // sum of paired correlations
  double prev_pair = std::numeric_limits<double>::infinity();
  for (Eigen::Index t = 0; t + 1 < n; t += 2) {
    double acov_t = 0.0, acov_t1 = 0.0;
    for (const auto& c : z) {
      acov_t += autocovariance(c, t);
      acov_t1 += autocovariance(c, t + 1);
    }
    acov_t /= dm;
    acov_t1 /= dm;
    const double rho_t = 1.0 - (w - acov_t * dn / (dn - 1.0)) / var_plus;
    const double rho_t1 = 1.0 - (w - acov_t1 * dn / (dn - 1.0)) / var_plus;
    double pair = rho_t + rho_t1;
    if (pair <= 0.0) break;
    pair = std::min(pair, prev_pair);
    prev_pair = pair;
    tau_sum += pair;
  }
  const double tau = std::max(2.0 * tau_sum - 1.0, 1.0 / (dm * dn));
  return dm * dn / tau;
}

}  // namespace

ChainDiagnostics split_rhat_ess(const std::vector<Eigen::VectorXd>& chains) {
  if (chains.empty()) throw numerical_error("diagnostics: no chains");
  const auto n = chains.front().size();
  if (n < 4) throw numerical_error("diagnostics: chain length must be >= 4");
  for (const auto& c : chains)
    if (c.size() != n)
      throw numerical_error("diagnostics: chains must have equal length");

  const auto split = split_chains(chains);
  double lo = chains.front()[0], hi = lo;
  for (const auto& c : chains) {
    lo = std::min(lo, c.minCoeff());
    hi = std::max(hi, c.maxCoeff());
  }
  ChainDiagnostics d;
  if (lo == hi) {
    d.rhat = kNaN;  // constant chains: undefined, reported rather than faked
    d.ess = kNaN;
    return d;
  }
  d.rhat = compute_rhat(split);
  d.ess = compute_ess(split);
  return d;
}

}  // namespace bcm
