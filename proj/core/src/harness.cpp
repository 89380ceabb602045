#include "bcm/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "bcm/errors.hpp"
#include "bcm/stats.hpp"

namespace bcm {

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t k1,
                          std::uint64_t k2 = 0) {
  auto mix = [](std::uint64_t z) {
    std::uint64_t s = z;
    return splitmix64(s);
  };
  std::uint64_t h = mix(seed ^ 0x5851F42D4C957F2Dull);
  h = mix(h ^ (0x14057B7EF767814Full + k1));
  h = mix(h ^ (0x9E6C63D0876A9A62ull + k2));
  return h;
}

std::string fmt(double v) {
  // round-trip precision: logs re-aggregate to bit-identical tables
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::uint64_t hash_label(const std::string& label) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

std::string MethodConfig::label() const {
  if (name == "bcm" || name == "bcm-cmi-jk" || name == "bcm-cmi-bs" ||
      name == "bcm-mi-bs")
    return prior.describe_k0();
  return "---";
}

// Unique per-config identifiers so that the same estimator can appear twice
// with different priors (the log and the aggregation key off these).
std::vector<std::string> method_keys(const std::vector<MethodConfig>& methods) {
  std::vector<std::string> keys;
  for (const auto& m : methods) {
    std::string key = m.name;
    if (m.label() != "---") key += "[" + m.label() + "]";
    int suffix = 2;
    std::string base = key;
    while (std::find(keys.begin(), keys.end(), key) != keys.end())
      key = base + "#" + std::to_string(suffix++);
    keys.push_back(key);
  }
  return keys;
}

void MethodConfig::apply_paper_scale() {
  bootstrap = 200;
  imputations = (name == "rd") ? 100 : 50;
  rbi_imputations = 100;
}

MethodConfig method_from_name(const std::string& name) {
  static const std::vector<std::string> known = {
      "bcm",      "bcm-cmi-jk", "bcm-cmi-bs", "bcm-mi-bs",
      "rd",       "rbi-j2r",    "rbi-cir",    "ancova-complete"};
  if (std::find(known.begin(), known.end(), name) == known.end()) {
    std::string all;
    for (const auto& k : known) all += k + " ";
    throw config_error("unknown method '" + name + "'; available: " + all);
  }
  MethodConfig m;
  m.name = name;
  return m;
}

bool method_needs_complete_data(const std::string& name) {
  return name == "ancova-complete";
}

EstimateReport run_method(const MethodConfig& method,
                          const TrialDataset& masked,
                          const TrialDataset& complete, std::uint64_t seed) {
  if (method.name == "ancova-complete") {
    const AncovaFit fit = ancova(complete);
    EstimateReport r;
    r.method = method.name;
    r.point = fit.estimate;
    r.se = fit.se;
    r.df = fit.df;
    const auto ci = interval(r.point, r.se, r.df);
    r.ci_low = ci.first;
    r.ci_high = ci.second;
    return r;
  }
  if (method.name == "bcm") {
    const PosteriorDraws draws = sample_posterior(
        masked, method.prior, /*include_post_ice=*/true, method.mcmc, seed);
    const int total =
        static_cast<int>(draws.draws.size());
    RngStream pi_rng = derive_stream(seed, 0x9B1);
    const auto pi_draws =
        sample_pi(masked, method.prior.dirichlet_alpha, total, pi_rng);
    return estimate_effect_bcm(draws, pi_draws, masked.mean_baseline());
  }
  if (method.name == "bcm-cmi-jk")
    return bcm_cmi(masked, method.prior, SeMethod::jackknife, method.bootstrap,
                   seed);
  if (method.name == "bcm-cmi-bs")
    return bcm_cmi(masked, method.prior, SeMethod::bootstrap, method.bootstrap,
                   seed);
  if (method.name == "bcm-mi-bs")
    return bcm_mi_bootstrap(masked, method.prior, method.bootstrap,
                            method.imputations, seed);
  if (method.name == "rd") {
    RngStream rng = derive_stream(seed, 0x4D);
    const auto sets = rd_impute(masked, method.imputations, rng);
    return pooled_ancova(sets, "rd");
  }
  if (method.name == "rbi-j2r" || method.name == "rbi-cir") {
    const RbiVariant variant =
        (method.name == "rbi-j2r") ? RbiVariant::j2r : RbiVariant::cir;
    const auto sets = rbi_impute(masked, variant, method.rbi_imputations,
                                 method.prior, method.rbi, seed);
    return pooled_ancova(sets, method.name);
  }
  throw config_error("unknown method '" + method.name + "'");
}

// ---------------------------------------------------------------------------
// Replication log

std::string rep_results_to_csv(const std::vector<RepResult>& results) {
  std::string out = "rep,method,point,se,ci_low,ci_high,df,status,message\n";
  for (const auto& r : results) {
    out += std::to_string(r.rep) + ',' + r.method + ',';
    if (r.ok) {
      out += fmt(r.report.point) + ',' + fmt(r.report.se) + ',' +
             fmt(r.report.ci_low) + ',' + fmt(r.report.ci_high) + ',' +
             (std::isfinite(r.report.df) ? fmt(r.report.df) : "inf") + ",ok,";
      if (r.report.warning) out += "warn:" + r.report.message;
    } else {
      std::string msg = r.error;
      for (auto& c : msg)
        if (c == ',' || c == '\n') c = ';';
      out += ",,,,,failed," + msg;
    }
    out += '\n';
  }
  return out;
}

std::vector<RepResult> rep_results_from_csv(const std::string& text) {
  std::vector<RepResult> out;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cur;
    for (char c : line) {
      if (c == ',') {
        f.push_back(cur);
        cur.clear();
      } else if (c != '\r') {
        cur.push_back(c);
      }
    }
    f.push_back(cur);
    if (f.size() < 9) continue;
    RepResult r;
    r.rep = std::stoi(f[0]);
    r.method = f[1];
    r.ok = (f[7] == "ok");
    if (r.ok) {
      r.report.method = r.method;
      r.report.point = std::stod(f[2]);
      r.report.se = std::stod(f[3]);
      r.report.ci_low = std::stod(f[4]);
      r.report.ci_high = std::stod(f[5]);
      r.report.df = (f[6] == "inf")
                        ? std::numeric_limits<double>::infinity()
                        : std::stod(f[6]);
    } else {
      r.error = f[8];
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

BenchmarkTable aggregate_results(const BenchmarkConfig& cfg,
                                 const std::vector<RepResult>& results,
                                 double truth) {
  BenchmarkTable table;
  table.truth = truth;
  table.scenario = cfg.scenario.name;
  table.n_reps = cfg.n_reps;
  table.master_seed = cfg.master_seed;

  const std::vector<std::string> keys = method_keys(cfg.methods);
  for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
    const auto& method = cfg.methods[mi];
    std::vector<double> points, ses;
    int n_cover = 0, n_fail = 0;
    for (const auto& r : results) {
      if (r.method != keys[mi]) continue;
      if (!r.ok) {
        ++n_fail;
        continue;
      }
      points.push_back(r.report.point);
      ses.push_back(r.report.se);
      if (covered(r.report, truth)) ++n_cover;
    }
    BenchmarkRow row;
    row.method = method.name;
    row.prior = method.label();
    row.pct_missing = 100.0 * cfg.scenario.miss_prob;
    row.n_reps = static_cast<int>(points.size());
    row.n_fail = n_fail;
    if (!points.empty()) {
      row.mean_est = mean(points);
      row.emp_se = (points.size() > 1) ? sample_sd(points) : 0.0;
      row.est_se = mean(ses);
      row.coverage = 100.0 * n_cover / static_cast<double>(points.size());
      row.mcse_mean = row.emp_se / std::sqrt(static_cast<double>(points.size()));
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string BenchmarkTable::to_csv() const {
  std::string out =
      "method,prior,pct_missing,mean,emp_se,est_se,coverage,mcse_mean,n_reps,"
      "n_fail\n";
  for (const auto& r : rows) {
    out += r.method + ',' + r.prior + ',' + fmt(r.pct_missing) + ',' +
           fmt(r.mean_est) + ',' + fmt(r.emp_se) + ',' + fmt(r.est_se) + ',' +
           fmt(r.coverage) + ',' + fmt(r.mcse_mean) + ',' +
           std::to_string(r.n_reps) + ',' + std::to_string(r.n_fail) + '\n';
  }
  return out;
}

std::string BenchmarkTable::pretty() const {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof(buf),
                "scenario %s  (truth %.4f, %d replications, seed %llu)\n",
                scenario.c_str(), truth, n_reps,
                static_cast<unsigned long long>(master_seed));
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-16s %-16s %6s %9s %8s %8s %6s %6s\n",
                "method", "prior", "miss%", "mean", "emp.se", "est.se", "cov%",
                "fail");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf),
                  "%-16s %-16s %6.0f %9.4f %8.4f %8.4f %6.1f %6d\n",
                  r.method.c_str(), r.prior.c_str(), r.pct_missing, r.mean_est,
                  r.emp_se, r.est_se, r.coverage, r.n_fail);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark runner

BenchmarkTable run_benchmark(const BenchmarkConfig& cfg) {
  cfg.scenario.validate();
  if (cfg.n_reps < 1) throw config_error("benchmark: n_reps must be >= 1");
  if (cfg.methods.empty()) throw config_error("benchmark: no methods given");

  const double truth = true_policy_effect(cfg.scenario, cfg.truth_n_mc);

  const int n_methods = static_cast<int>(cfg.methods.size());
  std::vector<RepResult> results(
      static_cast<std::size_t>(cfg.n_reps) * n_methods);
  std::vector<char> have(results.size(), 0);

  const std::vector<std::string> keys = method_keys(cfg.methods);

  // resume from an existing log: identical (rep, method) cells are reused
  if (cfg.resume && !cfg.log_path.empty()) {
    std::ifstream in(cfg.log_path);
    if (in) {
      std::stringstream ss;
      ss << in.rdbuf();
      for (auto& r : rep_results_from_csv(ss.str())) {
        for (int m = 0; m < n_methods; ++m) {
          if (keys[m] == r.method && r.rep >= 0 &&
              r.rep < cfg.n_reps) {
            const std::size_t slot =
                static_cast<std::size_t>(r.rep) * n_methods + m;
            results[slot] = std::move(r);
            have[slot] = 1;
            break;
          }
        }
      }
    }
  }

  const bool any_complete = std::any_of(
      cfg.methods.begin(), cfg.methods.end(),
      [](const MethodConfig& m) { return method_needs_complete_data(m.name); });

  std::mutex io_mutex;
  std::ofstream log;
  if (!cfg.log_path.empty())
    log.open(cfg.log_path, cfg.resume ? std::ios::app : std::ios::trunc);
  if (log.is_open() && !cfg.resume)
    log << "rep,method,point,se,ci_low,ci_high,df,status,message\n";

  std::atomic<int> next_rep{0};
  std::atomic<int> done_reps{0};
  auto worker = [&]() {
    for (;;) {
      const int rep = next_rep.fetch_add(1);
      if (rep >= cfg.n_reps) return;

      bool all_have = true;
      for (int m = 0; m < n_methods; ++m)
        all_have = all_have && have[static_cast<std::size_t>(rep) * n_methods + m];
      if (!all_have) {
        const std::uint64_t rep_seed = derive_seed(cfg.master_seed, 0x5EED, rep);
        TrialDataset complete, masked;
        {
          auto views = simulate_trial_views(cfg.scenario, rep_seed);
          masked = std::move(views.second);
          complete = any_complete ? std::move(views.first) : TrialDataset{};
        }
        for (int m = 0; m < n_methods; ++m) {
          const std::size_t slot = static_cast<std::size_t>(rep) * n_methods + m;
          if (have[slot]) continue;
          RepResult r;
          r.rep = rep;
          r.method = keys[m];
          try {
            // seeded by the method key, so an unrelated config change never
            // perturbs another method's stream
            r.report = run_method(cfg.methods[m], masked, complete,
                                  derive_seed(cfg.master_seed,
                                              hash_label(keys[m]), rep));
            r.ok = true;
          } catch (const std::exception& e) {
            r.ok = false;
            r.error = e.what();
          }
          {
            std::lock_guard<std::mutex> lock(io_mutex);
            if (log.is_open()) {
              log << rep_results_to_csv({r}).substr(
                  std::string("rep,method,point,se,ci_low,ci_high,df,status,"
                              "message\n")
                      .size());
              log.flush();
            }
            results[slot] = std::move(r);
          }
        }
      }
      const int done = done_reps.fetch_add(1) + 1;
      if (cfg.progress && (done % 25 == 0 || done == cfg.n_reps)) {
        std::lock_guard<std::mutex> lock(io_mutex);
        (*cfg.progress) << "  " << done << "/" << cfg.n_reps
                        << " replications\n";
        cfg.progress->flush();
      }
    }
  };

  int jobs = cfg.jobs;
  if (jobs <= 0)
    jobs = std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min(jobs, cfg.n_reps);
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  // rewrite the log sorted by (rep, method) for deterministic content
  if (log.is_open()) {
    log.close();
    std::ofstream sorted(cfg.log_path, std::ios::trunc);
    sorted << rep_results_to_csv(results);
  }

  return aggregate_results(cfg, results, truth);
}

// ---------------------------------------------------------------------------
// Config file

BenchmarkConfig benchmark_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw config_error(std::string("benchmark config: ") + e.what());
  }
  BenchmarkConfig cfg;
  if (!j.contains("scenario"))
    throw config_error("benchmark config: missing \"scenario\"");
  cfg.scenario = scenario_from_json(j["scenario"].dump());

  PriorSpec base_prior;
  if (j.contains("priors")) base_prior = prior_from_json(j["priors"].dump());

  if (!j.contains("methods") || !j["methods"].is_array() ||
      j["methods"].empty())
    throw config_error("benchmark config: missing \"methods\" array");
  for (const auto& mj : j["methods"]) {
    MethodConfig m =
        method_from_name(mj.is_string() ? mj.get<std::string>()
                                        : mj.at("name").get<std::string>());
    m.prior = base_prior;
    if (mj.is_object()) {
      if (mj.contains("prior")) {
        PriorSpec p = prior_from_json(mj["prior"].dump());
        m.prior = p;
      }
      if (mj.contains("bootstrap")) m.bootstrap = mj["bootstrap"].get<int>();
      if (mj.contains("imputations"))
        m.imputations = mj["imputations"].get<int>();
      if (mj.contains("rbi_imputations"))
        m.rbi_imputations = mj["rbi_imputations"].get<int>();
      if (mj.contains("chains")) m.mcmc.chains = mj["chains"].get<int>();
      if (mj.contains("warmup")) m.mcmc.warmup = mj["warmup"].get<int>();
      if (mj.contains("keep")) m.mcmc.keep = mj["keep"].get<int>();
    }
    cfg.methods.push_back(std::move(m));
  }
  if (j.contains("reps")) cfg.n_reps = j["reps"].get<int>();
  if (j.contains("seed")) cfg.master_seed = j["seed"].get<std::uint64_t>();
  if (j.contains("jobs")) cfg.jobs = j["jobs"].get<int>();
  if (j.contains("truth_n_mc")) cfg.truth_n_mc = j["truth_n_mc"].get<long>();
  if (j.contains("paper_scale") && j["paper_scale"].get<bool>())
    for (auto& m : cfg.methods) m.apply_paper_scale();
  return cfg;
}

}  // namespace bcm
