#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace bcm {

enum class Arm { control, active };

inline const char* arm_name(Arm a) {
  return a == Arm::control ? "control" : "active";
}

// Visit times in weeks, including baseline at index 0. Post-baseline visits
// are numbered 1..j_max throughout the library.
struct VisitSchedule {
  std::vector<double> weeks;

  int j_max() const { return static_cast<int>(weeks.size()) - 1; }
  double week_of_visit(int j) const { return weeks.at(static_cast<std::size_t>(j)); }
  void validate() const;
};

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

inline bool is_missing(double v) { return std::isnan(v); }

// One patient: baseline outcome (a covariate in every analysis model),
// post-baseline outcomes y[0..j_max-1] (NaN = missing), and the last visit
// index d at which the patient was still on randomized treatment. d = j_max
// encodes "no ICE".
struct PatientRecord {
  std::string id;
  Arm arm = Arm::control;
  double baseline = 0.0;
  std::vector<double> y;
  int d = 0;

  int j_max() const { return static_cast<int>(y.size()); }
  bool had_ice() const { return d < j_max(); }
  bool observed(int visit_1based) const { return !is_missing(y[visit_1based - 1]); }
  // True when the patient had an ICE and the post-ICE block is observed.
  bool post_ice_observed() const {
    return had_ice() && !is_missing(y[static_cast<std::size_t>(d)]);
  }
};

struct TrialDataset {
  VisitSchedule schedule;
  std::vector<PatientRecord> patients;

  int j_max() const { return schedule.j_max(); }
  int n_arm(Arm a) const;
  double mean_baseline() const;

  // Checks every invariant; throws data_error naming the offending patient.
  void validate() const;
};

// Per-visit, per-arm classification counts: a visit is "pre-ICE" for a
// patient while on randomized treatment, and post-ICE observed/missing after.
struct VisitCounts {
  int pre = 0;
  int obs = 0;
  int miss = 0;
};

struct DatasetSummary {
  std::vector<VisitCounts> control;  // index j-1 for visit j
  std::vector<VisitCounts> active;
};

DatasetSummary summarize(const TrialDataset& ds);

// Wide CSV, one row per patient: id,arm,base,y1,...,yJ,d
// Missing outcomes are empty fields; d is 1..J or the literal "none".
TrialDataset read_csv(const std::string& path, const VisitSchedule& schedule);
void write_csv(const TrialDataset& ds, const std::string& path);

// Companion schedule file: JSON object {"weeks": [0, 4, ...]}.
VisitSchedule read_schedule(const std::string& path);
void write_schedule(const VisitSchedule& schedule, const std::string& path);

}  // namespace bcm
