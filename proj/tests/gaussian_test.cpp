#include <doctest.h>

#include <cmath>

#include "bcm/errors.hpp"
#include "bcm/gaussian.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace bcm;

namespace {
Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<int>(v.size()));
  int i = 0;
  for (double x : v) out[i++] = x;
  return out;
}
}  // namespace

TEST_SUITE("gaussian") {

TEST_CASE("spatial power covariance entries") {
  SUBCASE("single time") {
    const CovMatrix c = spatial_power_cov(vec({0.48}), vec({0.0}), 0.8);
    CHECK(c.dim() == 1);
    CHECK(c.mat()(0, 0) == 0.48);
  }
  SUBCASE("two times") {
    const CovMatrix c = spatial_power_cov(vec({0.48, 0.80}), vec({0, 4}), 0.8);
    CHECK(c.mat()(0, 1) ==
          doctest::Approx(0.8 * std::sqrt(0.48 * 0.80)).epsilon(1e-12));
    CHECK(c.mat()(0, 1) == doctest::Approx(0.495742).epsilon(1e-6));
    CHECK(c.mat()(0, 0) == 0.48);
    CHECK(c.mat()(1, 1) == 0.80);
  }
  SUBCASE("full six-visit matrix factorizes") {
    const CovMatrix c =
        spatial_power_cov(vec({0.48, 0.80, 1.10, 1.40, 1.23, 1.48}),
                          vec({0, 4, 8, 14, 20, 26}), 0.8);
    CHECK(c.dim() == 6);
    CHECK(c.log_det() == c.log_det());  // finite: Cholesky succeeded
  }
  SUBCASE("argument validation") {
    CHECK_THROWS_AS(spatial_power_cov(vec({1.0, 1.0}), vec({0, 4}), 1.5),
                    numerical_error);
    CHECK_THROWS_AS(spatial_power_cov(vec({1.0, -1.0}), vec({0, 4}), 0.5),
                    numerical_error);
    CHECK_THROWS_AS(spatial_power_cov(vec({1.0, 1.0}), vec({4, 0}), 0.5),
                    numerical_error);
  }
  SUBCASE("correlation decays monotonically in time distance") {
    const CovMatrix c =
        spatial_power_cov(vec({1, 1, 1, 1, 1}), vec({0, 3, 7, 12, 20}), 0.7);
    for (int i = 0; i < 5; ++i)
      for (int j = i + 2; j < 5; ++j)
        CHECK(c.mat()(i, j) < c.mat()(i, j - 1));
  }
}

TEST_CASE("CovMatrix rejects asymmetric and indefinite input") {
  Eigen::MatrixXd bad(2, 2);
  bad << 1.0, 0.5, 0.2, 1.0;
  CHECK_THROWS_AS(CovMatrix{bad}, numerical_error);
  Eigen::MatrixXd indef(2, 2);
  indef << 1.0, 2.0, 2.0, 1.0;
  CHECK_THROWS_AS(CovMatrix{indef}, numerical_error);
}

TEST_CASE("conditioning on independent components leaves marginals") {
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(3, 3);
  d.diagonal() << 1.0, 2.0, 3.0;
  const CovMatrix cov(d);
  const ConditionalGaussian g =
      mvn_condition(vec({1, 2, 3}), cov, {1}, vec({5.0}));
  CHECK(g.mean[0] == doctest::Approx(1.0));
  CHECK(g.mean[1] == doctest::Approx(3.0));
  CHECK(g.cov(0, 0) == doctest::Approx(1.0));
  CHECK(g.cov(1, 1) == doctest::Approx(3.0));
  CHECK(g.cov(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("bivariate textbook conditioning") {
  const double rho = 0.6;
  Eigen::MatrixXd m(2, 2);
  m << 1.0, rho, rho, 1.0;
  const ConditionalGaussian g =
      mvn_condition(vec({0, 0}), CovMatrix(m), {0}, vec({1.0}));
  CHECK(g.mean[0] == doctest::Approx(rho).epsilon(1e-14));
  CHECK(g.cov(0, 0) == doctest::Approx(1.0 - rho * rho).epsilon(1e-14));
}

TEST_CASE("conditioning matches the direct-inversion oracle") {
  RngStream rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    const int n = 5;
    const CovMatrix cov(testutil::random_spd(n, rng));
    const Eigen::VectorXd mean = rng.normal_vector(n);
    const std::vector<int> obs = {1, 3};
    const Eigen::VectorXd vals = rng.normal_vector(2);
    const ConditionalGaussian g = mvn_condition(mean, cov, obs, vals);
    Eigen::VectorXd om;
    Eigen::MatrixXd oc;
    oracle::condition_mvn(mean, cov.mat(), obs, vals, om, oc);
    CHECK((g.mean - om).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((g.cov - oc).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("sequential conditioning equals joint conditioning") {
  RngStream rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 4;
    const CovMatrix cov(testutil::random_spd(n, rng));
    const Eigen::VectorXd mean = rng.normal_vector(n);
    const Eigen::VectorXd vals = rng.normal_vector(2);

    const ConditionalGaussian joint =
        mvn_condition(mean, cov, {0, 2}, vals);
    // condition on component 0 first, then on (old) component 2
    const ConditionalGaussian first =
        mvn_condition(mean, cov, {0}, vals.head(1));
    // remaining components are 1,2,3; old index 2 is now index 1
    const ConditionalGaussian second = mvn_condition(
        first.mean, CovMatrix(first.cov), {1}, vals.tail(1));
    CHECK((joint.mean - second.mean).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((joint.cov - second.cov).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("conditioning argument checks") {
  const CovMatrix cov(Eigen::MatrixXd::Identity(3, 3));
  CHECK_THROWS_AS(mvn_condition(vec({0, 0, 0}), cov, {}, Eigen::VectorXd()),
                  numerical_error);
  CHECK_THROWS_AS(
      mvn_condition(vec({0, 0, 0}), cov, {0, 1, 2}, vec({1, 2, 3})),
      numerical_error);
  // numerically singular observed block
  Eigen::MatrixXd near(3, 3);
  near << 1.0, 1.0 - 5e-14, 0.1, 1.0 - 5e-14, 1.0, 0.1, 0.1, 0.1, 1.0;
  CHECK_THROWS_AS(
      mvn_condition(vec({0, 0, 0}), CovMatrix(near), {0, 1}, vec({0, 0})),
      numerical_error);
}

TEST_CASE("log-density closed forms") {
  const CovMatrix one(Eigen::MatrixXd::Identity(1, 1));
  CHECK(mvn_logpdf(vec({0.0}), vec({0.0}), one) ==
        doctest::Approx(-0.5 * std::log(2.0 * M_PI)).epsilon(1e-14));

  RngStream rng(17);
  const CovMatrix cov(testutil::random_spd(4, rng));
  const Eigen::VectorXd mean = rng.normal_vector(4);
  CHECK(mvn_logpdf(mean, mean, cov) ==
        doctest::Approx(-0.5 * (4 * std::log(2.0 * M_PI) + cov.log_det()))
            .epsilon(1e-12));
}

TEST_CASE("log-density matches the eigendecomposition oracle") {
  RngStream rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    const CovMatrix cov(testutil::random_spd(4, rng));
    const Eigen::VectorXd mean = rng.normal_vector(4);
    const Eigen::VectorXd x = mean + rng.normal_vector(4);
    const double got = mvn_logpdf(x, mean, cov);
    const double want = oracle::mvn_logpdf_eigen(x, mean, cov.mat());
    CHECK(got == doctest::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("log-density integrates to one on a grid") {
  SUBCASE("one dimension") {
    const CovMatrix cov(Eigen::MatrixXd::Identity(1, 1) * 0.7);
    double total = 0.0;
    const double h = 0.01;
    for (double x = -8.0; x < 8.0; x += h)
      total += std::exp(mvn_logpdf(vec({x + h / 2}), vec({0.1}), cov)) * h;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-4));
  }
  SUBCASE("two dimensions") {
    Eigen::MatrixXd m(2, 2);
    m << 1.0, 0.4, 0.4, 0.8;
    const CovMatrix cov(m);
    double total = 0.0;
    const double h = 0.05;
    for (double x = -6.0; x < 6.0; x += h)
      for (double y = -6.0; y < 6.0; y += h)
        total +=
            std::exp(mvn_logpdf(vec({x + h / 2, y + h / 2}), vec({0, 0}), cov)) *
            h * h;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("sampling moments and determinism") {
  SUBCASE("zero covariance returns the mean exactly") {
    ConditionalGaussian g;
    g.mean = vec({1.5, -2.0});
    g.cov = Eigen::MatrixXd::Zero(2, 2);
    RngStream rng(3);
    CHECK(mvn_sample(g, rng) == g.mean);
  }
  SUBCASE("univariate standard normal mean bound") {
    ConditionalGaussian g;
    g.mean = vec({0.0});
    g.cov = Eigen::MatrixXd::Identity(1, 1);
    RngStream rng(5);
    double total = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) total += mvn_sample(g, rng)[0];
    CHECK(std::fabs(total / n) < 0.013);  // 4 sigma / sqrt(n)
  }
  SUBCASE("trivariate moments within Monte Carlo error") {
    RngStream spd_rng(23);
    const Eigen::MatrixXd cov = testutil::random_spd(3, spd_rng);
    ConditionalGaussian g;
    g.mean = vec({1.0, 2.0, 3.0});
    g.cov = cov;
    RngStream rng(29);
    const int n = 100000;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(3);
    Eigen::MatrixXd sum2 = Eigen::MatrixXd::Zero(3, 3);
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd x = mvn_sample(g, rng);
      sum += x;
      sum2 += (x - g.mean) * (x - g.mean).transpose();
    }
    const Eigen::VectorXd mean_hat = sum / n;
    for (int k = 0; k < 3; ++k)
      CHECK(std::fabs(mean_hat[k] - g.mean[k]) <
            4.0 * std::sqrt(cov(k, k) / n));
    const Eigen::MatrixXd cov_hat = sum2 / n;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        CHECK(std::fabs(cov_hat(a, b) - cov(a, b)) <
              0.05 * std::sqrt(cov(a, a) * cov(b, b)));
  }
  SUBCASE("fixed seed reproduces bit-exactly") {
    RngStream spd_rng(31);
    ConditionalGaussian g;
    g.mean = vec({0.0, 1.0});
    g.cov = testutil::random_spd(2, spd_rng);
    RngStream a(77), b(77);
    const Eigen::VectorXd x1 = mvn_sample(g, a);
    const Eigen::VectorXd x2 = mvn_sample(g, b);
    CHECK(x1 == x2);
  }
}

}  // TEST_SUITE
