#include "bcm/trial_data.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "bcm/errors.hpp"

namespace bcm {

void VisitSchedule::validate() const {
  if (weeks.size() < 2)
    throw data_error("schedule must contain baseline and at least one visit");
  if (weeks[0] != 0.0) throw data_error("schedule must start at week 0");
  for (std::size_t i = 1; i < weeks.size(); ++i) {
    if (!(weeks[i] > weeks[i - 1]))
      throw data_error("schedule weeks must be strictly increasing");
  }
}

int TrialDataset::n_arm(Arm a) const {
  int n = 0;
  for (const auto& p : patients) n += (p.arm == a);
  return n;
}

double TrialDataset::mean_baseline() const {
  if (patients.empty()) throw data_error("dataset has no patients");
  double s = 0.0;
  for (const auto& p : patients) s += p.baseline;
  return s / static_cast<double>(patients.size());
}

void TrialDataset::validate() const {
  schedule.validate();
  const int jmax = schedule.j_max();
  if (n_arm(Arm::control) == 0 || n_arm(Arm::active) == 0)
    throw data_error("dataset must contain at least one patient per arm");
  for (const auto& p : patients) {
    if (static_cast<int>(p.y.size()) != jmax)
      throw data_error("patient " + p.id + ": outcome vector length " +
                       std::to_string(p.y.size()) + " does not match schedule");
    if (is_missing(p.baseline) || !std::isfinite(p.baseline))
      throw data_error("patient " + p.id + ": baseline must be observed");
    if (p.d < 1 || p.d > jmax)
      throw data_error("patient " + p.id + ": d must be in 1.." +
                       std::to_string(jmax));
    if (p.arm == Arm::active) {
      for (int j = 1; j <= p.d; ++j) {
        if (!p.observed(j))
          throw data_error("patient " + p.id +
                           ": active-arm pre-ICE visit " + std::to_string(j) +
                           " is missing");
      }
      if (p.d < jmax) {
        const bool first = p.observed(p.d + 1);
        for (int j = p.d + 1; j <= jmax; ++j) {
          if (p.observed(j) != first)
            throw data_error("patient " + p.id +
                             ": post-ICE block must be entirely observed or "
                             "entirely missing");
        }
      }
    }
  }
}

DatasetSummary summarize(const TrialDataset& ds) {
  ds.validate();
  const int jmax = ds.j_max();
  DatasetSummary s;
  s.control.resize(jmax);
  s.active.resize(jmax);
  for (const auto& p : ds.patients) {
    auto& cols = (p.arm == Arm::control) ? s.control : s.active;
    for (int j = 1; j <= jmax; ++j) {
      if (j <= p.d)
        cols[j - 1].pre++;
      else if (p.observed(j))
        cols[j - 1].obs++;
      else
        cols[j - 1].miss++;
    }
  }
  return s;
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, int line_no) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw data_error("line " + std::to_string(line_no) +
                     ": cannot parse number '" + s + "'");
  return v;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

TrialDataset read_csv(const std::string& path, const VisitSchedule& schedule) {
  schedule.validate();
  std::ifstream in(path);
  if (!in) throw data_error("cannot open '" + path + "'");
  const int jmax = schedule.j_max();

  std::string line;
  int line_no = 0;
  std::string expected_header = "id,arm,base";
  for (int j = 1; j <= jmax; ++j) expected_header += ",y" + std::to_string(j);
  expected_header += ",d";

  // leading comment lines (e.g. imputation provenance) precede the header
  do {
    if (!std::getline(in, line)) throw data_error("'" + path + "' is empty");
    ++line_no;
  } while (!line.empty() && line[0] == '#');
  {
    auto fields = split_line(line);
    std::string got;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) got += ',';
      got += fields[i];
    }
    if (got != expected_header)
      throw data_error("line 1: header '" + got + "' does not match '" +
                       expected_header + "'");
  }

  TrialDataset ds;
  ds.schedule = schedule;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    // comment lines carry imputation provenance on export
    if (line[0] == '#') continue;
    auto fields = split_line(line);
    if (static_cast<int>(fields.size()) != jmax + 4)
      throw data_error("line " + std::to_string(line_no) + ": expected " +
                       std::to_string(jmax + 4) + " fields, got " +
                       std::to_string(fields.size()));
    PatientRecord p;
    p.id = fields[0];
    if (fields[1] == "control")
      p.arm = Arm::control;
    else if (fields[1] == "active")
      p.arm = Arm::active;
    else
      throw data_error("line " + std::to_string(line_no) + ": arm must be "
                       "'control' or 'active', got '" + fields[1] + "'");
    p.baseline = parse_double(fields[2], line_no);
    p.y.resize(jmax);
    for (int j = 0; j < jmax; ++j) {
      const std::string& f = fields[3 + j];
      p.y[j] = f.empty() ? kMissing : parse_double(f, line_no);
    }
    const std::string& dfield = fields[3 + jmax];
    if (dfield == "none") {
      p.d = jmax;
    } else {
      const double dv = parse_double(dfield, line_no);
      p.d = static_cast<int>(dv);
      if (static_cast<double>(p.d) != dv || p.d < 1 || p.d > jmax)
        throw data_error("line " + std::to_string(line_no) +
                         ": d must be an integer in 1.." +
                         std::to_string(jmax) + " or 'none'");
    }
    ds.patients.push_back(std::move(p));
  }
  ds.validate();
  return ds;
}

void write_csv(const TrialDataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path);
  if (!out) throw data_error("cannot open '" + path + "' for writing");
  const int jmax = ds.j_max();
  out << "id,arm,base";
  for (int j = 1; j <= jmax; ++j) out << ",y" << j;
  out << ",d\n";
  for (const auto& p : ds.patients) {
    out << p.id << ',' << arm_name(p.arm) << ',' << format_double(p.baseline);
    for (int j = 0; j < jmax; ++j) {
      out << ',';
      if (!is_missing(p.y[j])) out << format_double(p.y[j]);
    }
    if (p.d == jmax)
      out << ",none\n";
    else
      out << ',' << p.d << '\n';
  }
  if (!out) throw data_error("write to '" + path + "' failed");
}

VisitSchedule read_schedule(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw data_error("schedule '" + path + "': " + e.what());
  }
  if (!j.contains("weeks") || !j["weeks"].is_array())
    throw data_error("schedule '" + path + "': missing \"weeks\" array");
  VisitSchedule s;
  for (const auto& w : j["weeks"]) s.weeks.push_back(w.get<double>());
  s.validate();
  return s;
}

void write_schedule(const VisitSchedule& schedule, const std::string& path) {
  schedule.validate();
  std::ofstream out(path);
  if (!out) throw data_error("cannot open '" + path + "' for writing");
  nlohmann::json j;
  j["weeks"] = schedule.weeks;
  out << j.dump(2) << '\n';
}

}  // namespace bcm
