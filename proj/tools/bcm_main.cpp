// Command-line front end: simulate trials, analyze datasets with any of the
// implemented estimators, run benchmark grids, and summarize observation
// patterns.
//
// Exit codes: 0 ok, 2 configuration error, 3 data validation error,
// 4 non-estimable imputation model, 5 numerical failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "bcm/analysis.hpp"
#include "bcm/errors.hpp"
#include "bcm/harness.hpp"
#include "bcm/imputation.hpp"
#include "bcm/inference.hpp"
#include "bcm/sim.hpp"
#include "bcm/trial_data.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw bcm::config_error("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bcm::SimScenario load_scenario(const std::string& preset,
                               const std::string& config_path) {
  if (!preset.empty() && !config_path.empty())
    throw bcm::config_error("give either --preset or --config, not both");
  if (!preset.empty()) return bcm::preset_scenario(preset);
  if (!config_path.empty()) {
    const std::string text = read_file(config_path);
    // accept either a bare scenario object or a config with a "scenario" key
    if (text.find("\"scenario\"") != std::string::npos)
      return bcm::benchmark_config_from_json(text).scenario;
    return bcm::scenario_from_json(text);
  }
  throw bcm::config_error("a scenario is required (--preset or --config)");
}

bcm::VisitSchedule schedule_for(const std::string& schedule_path,
                                const std::string& data_path) {
  if (!schedule_path.empty()) return bcm::read_schedule(schedule_path);
  // fall back to unit-spaced weeks with the visit count from the header
  std::ifstream in(data_path);
  if (!in) throw bcm::data_error("cannot open '" + data_path + "'");
  std::string header;
  std::getline(in, header);
  int jmax = 0;
  for (std::size_t pos = 0;
       (pos = header.find(",y", pos)) != std::string::npos; ++pos)
    ++jmax;
  if (jmax < 1)
    throw bcm::data_error("cannot infer visit count from '" + data_path + "'");
  bcm::VisitSchedule s;
  for (int j = 0; j <= jmax; ++j) s.weeks.push_back(static_cast<double>(j));
  return s;
}

struct MethodFlags {
  double prior_mean = 0.0;
  double prior_sd = 100.0;
  double dirichlet_alpha = 1.0;
  int bootstrap = 100;
  int imputations = 0;  // 0: method default
  int chains = 2;
  int warmup = 300;
  int keep = 1000;
  bool paper_scale = false;
};

bcm::MethodConfig make_method(const std::string& name, const MethodFlags& f) {
  bcm::MethodConfig m = bcm::method_from_name(name);
  m.prior.k0_mean = f.prior_mean;
  m.prior.k0_sd = f.prior_sd;
  m.prior.dirichlet_alpha = f.dirichlet_alpha;
  m.bootstrap = f.bootstrap;
  m.mcmc.chains = f.chains;
  m.mcmc.warmup = f.warmup;
  m.mcmc.keep = f.keep;
  if (f.paper_scale) m.apply_paper_scale();
  if (f.imputations > 0) {
    m.imputations = f.imputations;
    m.rbi_imputations = f.imputations;
  }
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reference-based Bayesian causal modelling of longitudinal "
               "trials with partially observed post-ICE data"};
  app.require_subcommand(1);

  auto* sim_cmd =
      app.add_subcommand("simulate", "Generate a trial dataset from a scenario");
  std::string sim_preset, sim_config, sim_out, sim_schedule_out;
  std::uint64_t sim_seed = 1;
  int sim_n = 0;
  bool sim_complete = false;
  sim_cmd->add_option("--preset", sim_preset, "Scenario preset name");
  sim_cmd->add_option("--config", sim_config, "Scenario/config JSON file");
  sim_cmd->add_option("--seed", sim_seed, "Replication seed");
  sim_cmd->add_option("--n", sim_n, "Override patients per arm");
  sim_cmd->add_option("--out", sim_out, "Output CSV path")->required();
  sim_cmd->add_option("--schedule-out", sim_schedule_out,
                      "Also write the visit schedule JSON here");
  sim_cmd->add_flag("--complete", sim_complete,
                    "Emit the fully observed view (no missingness)");

  auto* an_cmd = app.add_subcommand(
      "analyze", "Estimate the treatment-policy effect from a dataset");
  std::string an_data, an_schedule, an_method = "bcm", an_out, an_draws_out,
      an_map_out;
  std::uint64_t an_seed = 1;
  MethodFlags an_flags;
  an_cmd->add_option("--data", an_data, "Trial CSV")->required();
  an_cmd->add_option("--schedule", an_schedule,
                     "Visit schedule JSON (weeks including baseline)");
  an_cmd->add_option("--method", an_method,
                     "bcm | bcm-cmi-jk | bcm-cmi-bs | bcm-mi-bs | rd | "
                     "rbi-j2r | rbi-cir | ancova-complete");
  an_cmd->add_option("--seed", an_seed, "Seed for stochastic methods");
  an_cmd->add_option("--prior-mean", an_flags.prior_mean, "k0 prior mean");
  an_cmd->add_option("--prior-sd", an_flags.prior_sd, "k0 prior SD");
  an_cmd->add_option("--dirichlet-alpha", an_flags.dirichlet_alpha,
                     "Dirichlet concentration for pi");
  an_cmd->add_option("--bootstrap", an_flags.bootstrap, "Bootstrap resamples");
  an_cmd->add_option("--imputations", an_flags.imputations,
                     "Imputations per fit (method default if omitted)");
  an_cmd->add_option("--chains", an_flags.chains, "MCMC chains");
  an_cmd->add_option("--warmup", an_flags.warmup, "MCMC warmup iterations");
  an_cmd->add_option("--keep", an_flags.keep, "Retained draws per chain");
  an_cmd->add_flag("--paper-scale", an_flags.paper_scale,
                   "Paper-scale resampling settings");
  an_cmd->add_option("--out", an_out, "Write the report JSON here");
  an_cmd->add_option("--draws-out", an_draws_out,
                     "Export posterior draws CSV (bcm only)");
  an_cmd->add_option("--map-out", an_map_out,
                     "Write the MAP parameter estimates as JSON");

  auto* bm_cmd = app.add_subcommand(
      "benchmark",
      "Replicate scenario x methods and tabulate frequentist properties");
  std::string bm_preset, bm_config, bm_methods = "bcm,rd,rbi-j2r", bm_out,
              bm_log;
  std::uint64_t bm_seed = 1;
  int bm_reps = 500, bm_jobs = 0;
  long bm_truth_nmc = 2000000;
  bool bm_resume = false;
  MethodFlags bm_flags;
  bm_cmd->add_option("--preset", bm_preset, "Scenario preset name");
  bm_cmd->add_option("--config", bm_config,
                     "Benchmark config JSON (scenario+methods+reps)");
  bm_cmd->add_option("--methods", bm_methods, "Comma-separated method list");
  bm_cmd->add_option("--reps", bm_reps, "Number of replications");
  bm_cmd->add_option("--seed", bm_seed, "Master seed");
  bm_cmd->add_option("--jobs", bm_jobs, "Worker threads (0 = all cores)");
  bm_cmd->add_option("--out", bm_out, "Benchmark table CSV path");
  bm_cmd->add_option("--log", bm_log, "Per-replication log CSV path");
  bm_cmd->add_flag("--resume", bm_resume, "Reuse rows already in --log");
  bm_cmd->add_option("--truth-nmc", bm_truth_nmc,
                     "Monte Carlo size for the true effect");
  bm_cmd->add_option("--prior-mean", bm_flags.prior_mean, "k0 prior mean");
  bm_cmd->add_option("--prior-sd", bm_flags.prior_sd, "k0 prior SD");
  bm_cmd->add_flag("--paper-scale", bm_flags.paper_scale,
                   "Paper-scale resampling settings");

  auto* su_cmd = app.add_subcommand(
      "summarize", "Per-visit pre-ICE / observed / missing counts by arm");
  std::string su_data, su_schedule;
  su_cmd->add_option("--data", su_data, "Trial CSV")->required();
  su_cmd->add_option("--schedule", su_schedule, "Visit schedule JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (sim_cmd->parsed()) {
      bcm::SimScenario sc = load_scenario(sim_preset, sim_config);
      if (sim_n > 0) sc.n_per_arm = sim_n;
      auto views = bcm::simulate_trial_views(sc, sim_seed);
      bcm::write_csv(sim_complete ? views.first : views.second, sim_out);
      if (!sim_schedule_out.empty())
        bcm::write_schedule(sc.schedule, sim_schedule_out);
      std::cerr << "wrote " << sc.n_per_arm * 2 << " patients to " << sim_out
                << "\n";
      return 0;
    }

    if (an_cmd->parsed()) {
      const bcm::VisitSchedule schedule = schedule_for(an_schedule, an_data);
      const bcm::TrialDataset ds = bcm::read_csv(an_data, schedule);
      const bcm::MethodConfig method = make_method(an_method, an_flags);
      bcm::EstimateReport report;
      if (an_method == "bcm" && !an_draws_out.empty()) {
        const bcm::PosteriorDraws draws =
            bcm::sample_posterior(ds, method.prior, true, method.mcmc, an_seed);
        bcm::draws_to_csv(draws, an_draws_out);
        bcm::RngStream pi_rng = bcm::derive_stream(an_seed, 0x9B1);
        const auto pi_draws =
            bcm::sample_pi(ds, method.prior.dirichlet_alpha,
                           static_cast<int>(draws.draws.size()), pi_rng);
        report = bcm::estimate_effect_bcm(draws, pi_draws, ds.mean_baseline());
      } else {
        report = bcm::run_method(method, ds, ds, an_seed);
      }
      if (!an_map_out.empty()) {
        const bcm::MapResult map =
            bcm::fit_map(ds, method.prior, /*include_post_ice=*/true);
        std::ofstream out(an_map_out);
        out << bcm::causal_params_to_json(map.params) << '\n';
      }
      const std::string json = bcm::report_to_json(report);
      if (!an_out.empty()) {
        std::ofstream out(an_out);
        out << json << '\n';
      }
      std::cout << json << '\n';
      std::fprintf(stderr,
                   "%-14s point %+.4f  se %.4f  95%% [%+.4f, %+.4f]%s\n",
                   report.method.c_str(), report.point, report.se,
                   report.ci_low, report.ci_high,
                   report.warning ? "  (warning)" : "");
      if (report.warning)
        std::fprintf(stderr, "warning: %s\n", report.message.c_str());
      return 0;
    }

    if (bm_cmd->parsed()) {
      bcm::BenchmarkConfig cfg;
      if (!bm_config.empty()) {
        cfg = bcm::benchmark_config_from_json(read_file(bm_config));
      } else {
        cfg.scenario = load_scenario(bm_preset, "");
        std::stringstream ss(bm_methods);
        std::string name;
        while (std::getline(ss, name, ','))
          if (!name.empty()) cfg.methods.push_back(make_method(name, bm_flags));
      }
      if (bm_cmd->count("--reps")) cfg.n_reps = bm_reps;
      if (bm_cmd->count("--seed")) cfg.master_seed = bm_seed;
      if (bm_cmd->count("--jobs")) cfg.jobs = bm_jobs;
      if (bm_cmd->count("--truth-nmc")) cfg.truth_n_mc = bm_truth_nmc;
      cfg.log_path = bm_log;
      cfg.resume = bm_resume;
      cfg.progress = &std::cerr;
      const bcm::BenchmarkTable table = bcm::run_benchmark(cfg);
      if (!bm_out.empty()) {
        std::ofstream out(bm_out);
        out << table.to_csv();
      }
      std::cout << table.pretty();
      return 0;
    }

    if (su_cmd->parsed()) {
      const bcm::VisitSchedule schedule = schedule_for(su_schedule, su_data);
      const bcm::TrialDataset ds = bcm::read_csv(su_data, schedule);
      const bcm::DatasetSummary s = bcm::summarize(ds);
      std::printf("%5s | %21s | %21s\n", "", "control", "active");
      std::printf("%5s | %7s %6s %6s | %7s %6s %6s\n", "visit", "pre-ICE",
                  "obs", "miss", "pre-ICE", "obs", "miss");
      for (int j = 1; j <= ds.j_max(); ++j) {
        const auto& c = s.control[j - 1];
        const auto& a = s.active[j - 1];
        std::printf("%5d | %7d %6d %6d | %7d %6d %6d\n", j, c.pre, c.obs,
                    c.miss, a.pre, a.obs, a.miss);
      }
      return 0;
    }
  } catch (const bcm::config_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const bcm::data_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const bcm::non_estimable_error& e) {
    std::cerr << "non-estimable: " << e.what() << '\n';
    return 4;
  } catch (const bcm::numerical_error& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 5;
  }
  return 0;
}
