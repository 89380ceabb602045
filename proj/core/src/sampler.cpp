#include "bcm/sampler.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace bcm {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// Welford accumulator for the diagonal metric windows.
struct RunningVariance {
  Eigen::VectorXd mean, m2;
  long n = 0;
  void reset(int dim) {
    mean = Eigen::VectorXd::Zero(dim);
    m2 = Eigen::VectorXd::Zero(dim);
    n = 0;
  }
  void add(const Eigen::VectorXd& x) {
    ++n;
    const Eigen::VectorXd delta = x - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta.cwiseProduct(x - mean);
  }
  Eigen::VectorXd regularized() const {
    const double dn = static_cast<double>(n);
    Eigen::VectorXd var = m2 / std::max(1.0, dn - 1.0);
    // shrink toward a small diagonal, as in windowed HMC adaptation
    return var * (dn / (dn + 5.0)) +
           Eigen::VectorXd::Constant(var.size(), 1e-3 * (5.0 / (dn + 5.0)));
  }
};

struct DualAveraging {
  double mu = 0.0;
  double log_eps = 0.0;
  double log_eps_bar = 0.0;
  double h_bar = 0.0;
  long m = 0;
  double target = 0.8;

  void restart(double eps) {
    mu = std::log(10.0 * eps);
    log_eps = std::log(eps);
    log_eps_bar = std::log(eps);
    h_bar = 0.0;
    m = 0;
  }
  void update(double accept_stat) {
    constexpr double kGamma = 0.05, kT0 = 10.0, kKappa = 0.75;
    ++m;
    const double md = static_cast<double>(m);
    const double eta = 1.0 / (md + kT0);
    h_bar = (1.0 - eta) * h_bar + eta * (target - accept_stat);
    log_eps = mu - std::sqrt(md) / kGamma * h_bar;
    const double w = std::pow(md, -kKappa);
    log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar;
  }
};

}  // namespace

NutsSampler::NutsSampler(LogDensityGrad target, int dim, Options opts)
    : target_(std::move(target)), dim_(dim), opts_(opts) {
  inv_metric_ = Eigen::VectorXd::Ones(dim_);
}

void NutsSampler::set_inv_metric(Eigen::VectorXd inv_metric) {
  if (inv_metric.size() != dim_)
    throw std::invalid_argument("inv_metric dimension mismatch");
  inv_metric_ = std::move(inv_metric);
  dense_ = false;
}

bool NutsSampler::set_dense_metric(const Eigen::MatrixXd& metric) {
  if (metric.rows() != dim_ || metric.cols() != dim_)
    throw std::invalid_argument("metric dimension mismatch");
  Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (metric + metric.transpose()));
  if (llt.info() != Eigen::Success) return false;
  metric_llt_ = std::move(llt);
  dense_ = true;
  return true;
}

Eigen::VectorXd NutsSampler::velocity(const Eigen::VectorXd& p) const {
  if (dense_) return metric_llt_.solve(p);
  return inv_metric_.cwiseProduct(p);
}

Eigen::VectorXd NutsSampler::draw_momentum(RngStream& rng) const {
  Eigen::VectorXd z(dim_);
  for (int i = 0; i < dim_; ++i) z[i] = rng.normal();
  if (dense_) return metric_llt_.matrixL() * z;
  return z.cwiseQuotient(inv_metric_.cwiseSqrt());
}

double NutsSampler::hamiltonian(const Point& z) const {
  return -z.logp + 0.5 * z.p.dot(velocity(z.p));
}

void NutsSampler::leapfrog(Point& z, double eps) const {
  z.p += 0.5 * eps * z.grad;
  z.q += eps * velocity(z.p);
  z.logp = target_(z.q, z.grad);
  if (!std::isfinite(z.logp)) {
    z.logp = kNegInf;
    z.grad.setZero();
  }
  z.p += 0.5 * eps * z.grad;
}

bool NutsSampler::no_uturn(const Point& left, const Point& right,
                           const Eigen::VectorXd& rho) const {
  return rho.dot(velocity(left.p)) > 0.0 && rho.dot(velocity(right.p)) > 0.0;
}

NutsSampler::Tree NutsSampler::build_tree(int depth, const Point& from,
                                          int dir, double h0, double eps,
                                          RngStream& rng) const {
  if (depth == 0) {
    Tree t;
    Point z = from;
    leapfrog(z, dir * eps);
    const double h = hamiltonian(z);
    const double dh = h0 - h;  // > 0 means energy decreased
    t.divergent = !(dh > -opts_.max_energy_error);
    t.ok = !t.divergent;
    t.log_w = std::isfinite(dh) ? dh : kNegInf;
    t.sum_accept = std::isfinite(dh) ? std::min(1.0, std::exp(dh)) : 0.0;
    t.n_leapfrog = 1;
    t.left = z;
    t.right = z;
    t.proposal = std::move(z);
    t.rho = t.proposal.p;
    return t;
  }

  Tree first = build_tree(depth - 1, from, dir, h0, eps, rng);
  if (!first.ok) return first;
  const Point& edge = (dir > 0) ? first.right : first.left;
  Tree second = build_tree(depth - 1, edge, dir, h0, eps, rng);

  Tree t;
  t.n_leapfrog = first.n_leapfrog + second.n_leapfrog;
  t.sum_accept = first.sum_accept + second.sum_accept;
  t.divergent = first.divergent || second.divergent;
  t.log_w = log_add_exp(first.log_w, second.log_w);
  // unbiased multinomial choice within the subtree
  const double p_second = std::exp(second.log_w - t.log_w);
  t.proposal = (rng.unif01() < p_second) ? second.proposal : first.proposal;
  t.rho = first.rho + second.rho;
  t.left = (dir > 0) ? first.left : second.left;
  t.right = (dir > 0) ? second.right : first.right;
  t.ok = second.ok && no_uturn(t.left, t.right, t.rho);
  return t;
}

double NutsSampler::find_initial_step(const Point& z0, RngStream& rng) const {
  double eps = 1.0;
  Point z = z0;
  z.p = draw_momentum(rng);
  const double h0 = hamiltonian(z);
  Point trial = z;
  leapfrog(trial, eps);
  double dh = h0 - hamiltonian(trial);
  if (!std::isfinite(dh)) dh = kNegInf;
  const double dir = (dh > std::log(0.5)) ? 1.0 : -1.0;
  for (int it = 0; it < 50; ++it) {
    eps = std::pow(2.0, dir) * eps;
    trial = z;
    leapfrog(trial, eps);
    dh = h0 - hamiltonian(trial);
    if (!std::isfinite(dh)) dh = kNegInf;
    if (dir > 0.0 ? (dh <= std::log(0.5)) : (dh > std::log(0.5))) break;
    if (eps > 1e7 || eps < 1e-10) break;
  }
  return std::clamp(eps, 1e-10, 1e7);
}

NutsSampler::Result NutsSampler::run(const Eigen::VectorXd& q0, int warmup,
                                     int keep, int thin, RngStream& rng) {
  if (q0.size() != dim_) throw std::invalid_argument("q0 dimension mismatch");
  if (keep < 1 || thin < 1 || warmup < 0)
    throw std::invalid_argument("invalid sampler schedule");

  Point cur;
  cur.q = q0;
  cur.grad.resize(dim_);
  cur.logp = target_(cur.q, cur.grad);
  if (!std::isfinite(cur.logp))
    throw std::runtime_error("sampler initial point has non-finite density");

  // adaptation window layout: settle, expanding variance windows, final
  // step-size polish; dense metrics stay fixed and only the step adapts
  int init_buf = 75, term_buf = 50, base_window = 25;
  if (warmup < 150 && warmup > 0) {
    init_buf = std::max(1, static_cast<int>(0.15 * warmup));
    term_buf = std::max(1, static_cast<int>(0.10 * warmup));
    base_window = warmup - init_buf - term_buf;
  }
  const bool adapt_metric = !dense_ && warmup >= 20 && base_window > 0;

  double eps = find_initial_step(cur, rng);
  DualAveraging da;
  da.target = opts_.target_accept;
  da.restart(eps);

  RunningVariance welford;
  welford.reset(dim_);
  int window_end = adapt_metric
                       ? std::min(warmup - term_buf, init_buf + base_window)
                       : -1;
  int window_size = base_window;

  Result out;
  out.draws.resize(keep, dim_);
  int kept = 0;
  long total_div = 0;
  double sum_accept_sampling = 0.0;
  long n_sampling = 0;

  const int total_iters = warmup + keep * thin;
  for (int m = 0; m < total_iters; ++m) {
    const bool in_warmup = m < warmup;

    Point z = cur;
    z.p = draw_momentum(rng);
    const double h0 = hamiltonian(z);

    Tree tree;
    tree.left = z;
    tree.right = z;
    tree.proposal = z;
    tree.rho = z.p;
    tree.log_w = 0.0;
    double sum_accept = 0.0;
    int n_leapfrog = 0;
    bool divergent = false;

    for (int depth = 0; depth < opts_.max_depth; ++depth) {
      const int dir = (rng.next_u64() >> 63) ? 1 : -1;
      const Point& edge = (dir > 0) ? tree.right : tree.left;
      Tree sub = build_tree(depth, edge, dir, h0, eps, rng);
      sum_accept += sub.sum_accept;
      n_leapfrog += sub.n_leapfrog;
      if (!sub.ok) {
        divergent = sub.divergent;
        break;
      }
      // biased progressive sampling favours the fresh subtree
      const double p_new = std::exp(std::min(0.0, sub.log_w - tree.log_w));
      if (rng.unif01() < p_new) tree.proposal = sub.proposal;
      tree.log_w = log_add_exp(tree.log_w, sub.log_w);
      tree.rho += sub.rho;
      if (dir > 0)
        tree.right = sub.right;
      else
        tree.left = sub.left;
      if (!no_uturn(tree.left, tree.right, tree.rho)) break;
    }

    cur = tree.proposal;
    const double accept_stat =
        (n_leapfrog > 0) ? sum_accept / static_cast<double>(n_leapfrog) : 0.0;

    if (in_warmup) {
      da.update(accept_stat);
      eps = std::exp(da.log_eps);
      if (adapt_metric && m >= init_buf && m < warmup - term_buf) {
        welford.add(cur.q);
        if (m + 1 == window_end) {
          if (welford.n >= 10) inv_metric_ = welford.regularized();
          welford.reset(dim_);
          eps = std::exp(da.log_eps_bar);
          da.restart(eps);
          window_size *= 2;
          window_end = std::min(warmup - term_buf, window_end + window_size);
        }
      }
      if (m + 1 == warmup) eps = std::exp(da.log_eps_bar);
    } else {
      if (divergent) ++total_div;
      sum_accept_sampling += accept_stat;
      ++n_sampling;
      const int post = m - warmup;
      if ((post + 1) % thin == 0) out.draws.row(kept++) = cur.q;
    }
  }

  out.step_size = eps;
  out.divergences = static_cast<int>(total_div);
  out.mean_accept =
      (n_sampling > 0) ? sum_accept_sampling / static_cast<double>(n_sampling)
                       : 0.0;
  return out;
}

}  // namespace bcm
