#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "bcm/trial_data.hpp"

namespace bcm {

struct EstimateReport {
  std::string method;
  double point = 0.0;
  double se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double df = std::numeric_limits<double>::infinity();  // inf = normal interval
  std::map<std::string, double> aux;
  bool warning = false;
  std::string message;
};

std::string report_to_json(const EstimateReport& r);

struct AncovaFit {
  double estimate = 0.0;  // treatment coefficient
  double se = 0.0;
  double df = 0.0;
  double intercept = 0.0;
  double baseline_coef = 0.0;
};

// OLS of the final-visit outcome on intercept, baseline and treatment
// indicator (active = 1). Requires a complete final visit.
AncovaFit ancova(const TrialDataset& complete);

// point +/- quantile * se; Student-t when df is finite, normal otherwise.
std::pair<double, double> interval(double point, double se, double df);

bool covered(const EstimateReport& r, double truth);

}  // namespace bcm
