#pragma once

#include <vector>

namespace bcm {

// Standard normal quantile function (Wichura's AS 241, double precision).
double normal_quantile(double p);

double normal_cdf(double x);

// Student-t distribution; df may be fractional (Barnard-Rubin degrees of
// freedom). df = +inf is accepted and falls back to the normal.
double student_t_cdf(double x, double df);
double student_t_quantile(double p, double df);

// Regularized incomplete beta function I_x(a, b).
double incomplete_beta(double a, double b, double x);

double mean(const std::vector<double>& x);
double sample_sd(const std::vector<double>& x);

// Empirical quantile with linear interpolation (R type 7); q in [0,1].
double quantile_type7(std::vector<double> x, double q);

}  // namespace bcm
