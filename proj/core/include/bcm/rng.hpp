#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

namespace bcm {

// Splittable pseudo-random stream (xoshiro256++ state, splitmix64 seeding).
// Every stochastic routine in the library takes an explicit stream; streams
// for independent work units are derived from (seed, index...) keys so that
// replications, resamples and imputations never share state.
class RngStream {
 public:
  RngStream() : RngStream(0x9E3779B97F4A7C15ull) {}
  explicit RngStream(std::uint64_t seed) { seed_from(seed); }

  std::uint64_t next_u64();

  // Uniform on the open interval (0,1); never returns 0 or 1.
  double unif01();

  // Standard normal via the inverse-CDF transform (one uniform per draw).
  double normal();

  // Gamma(shape, 1) by Marsaglia-Tsang squeeze; shape > 0.
  double gamma(double shape);

  double chi_square(double df) { return 2.0 * gamma(0.5 * df); }

  Eigen::VectorXd normal_vector(int n);

  // Dirichlet via normalized gammas.
  Eigen::VectorXd dirichlet(const Eigen::VectorXd& alpha);

 private:
  void seed_from(std::uint64_t seed);
  std::uint64_t s_[4];
};

// Deterministic stream derivation: hashes the key tuple into a fresh state.
RngStream derive_stream(std::uint64_t seed, std::uint64_t k1 = 0,
                        std::uint64_t k2 = 0, std::uint64_t k3 = 0);

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace bcm
