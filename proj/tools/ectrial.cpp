#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "ectrial/cohort.hpp"
#include "ectrial/csv.hpp"
#include "ectrial/emulation.hpp"
#include "ectrial/pipeline.hpp"
#include "ectrial/plan.hpp"
#include "ectrial/simulate.hpp"

namespace fs = std::filesystem;
using namespace ectrial;

namespace {

std::string slurp(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(std::string("cannot open ") + what + " file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

template <class F>
std::string render(F&& f) {
  std::ostringstream ss;
  f(ss);
  return ss.str();
}

csv::Table read_table(const std::string& path, const char* what) {
  try {
    return csv::parse(slurp(path, what));
  } catch (const csv::ParseError& e) {
    throw Error(std::string(what) + " file '" + path + "': " + e.what());
  }
}

int run_command(const std::string& config_path, const std::string& cohort_path, const std::string& obs_path,
                const std::string& out_dir, std::uint64_t seed, std::optional<int> bootstrap, int threads) {
  const EstimandSpec spec = parse_estimand_config(slurp(config_path, "config"));
  const Plan plan = compile_plan(spec);

  Cohort cohort;
  try {
    cohort = cohort_from_table(read_table(cohort_path, "cohort"), spec.covariates);
  } catch (const csv::ParseError& e) {
    throw Error("cohort file '" + cohort_path + "': " + e.what());
  }
  std::vector<RawObservation> observations;
  if (!obs_path.empty()) {
    try {
      observations = observations_from_table(read_table(obs_path, "observations"));
    } catch (const csv::ParseError& e) {
      throw Error("observations file '" + obs_path + "': " + e.what());
    }
  }

  RunOptions opt;
  opt.seed = seed;
  opt.threads = threads;
  opt.bootstrap_replicates = bootstrap;
  const AnalysisReport rep = run_plan(plan, cohort, observations, opt);

  const fs::path out(out_dir);
  fs::create_directories(out);
  write_file(out / "report.json", rep.to_json().dump(2) + "\n");
  write_file(out / "km_curves.csv", render([&](std::ostream& os) {
               std::vector<std::pair<Arm, KmCurve>> curves;
               for (const auto& [arm, s] : rep.arms) curves.emplace_back(arm, s.km);
               write_km_csv(os, curves);
             }));
  write_file(out / "balance.csv", render([&](std::ostream& os) { write_love_plot_csv(os, rep.balance); }));
  write_file(out / "attrition.csv", render([&](std::ostream& os) { write_attrition_csv(os, rep.attrition); }));
  write_file(out / "weights_diag.csv",
             render([&](std::ostream& os) { write_weight_diagnostics_csv(os, rep.weight_diagnostics); }));

  const auto& hr = rep.hazard_ratio;
  std::cout << to_string(plan.analysis) << " analysis: HR " << csv::format_number(hr.hr);
  if (hr.bootstrap)
    std::cout << " [" << csv::format_number(hr.bootstrap->lo) << ", " << csv::format_number(hr.bootstrap->hi) << "]";
  std::cout << "\nwrote " << out.string() << "\n";
  return 0;
}

int simulate_command(const std::string& config_path, const std::string& out_dir, std::optional<std::uint64_t> seed,
                     std::optional<std::size_t> n) {
  SimConfig cfg = config_path.empty() ? SimConfig::defaults() : parse_sim_config(slurp(config_path, "simulation config"));
  if (seed) cfg.seed = *seed;
  if (n) cfg.n_per_arm = *n;
  const auto sim = generate_cohort(cfg);
  const fs::path out(out_dir);
  fs::create_directories(out);
  write_file(out / "cohort.csv", render([&](std::ostream& os) { write_cohort_csv(os, sim.cohort); }));
  write_file(out / "truth.csv", render([&](std::ostream& os) { write_truth_csv(os, sim.truth); }));
  std::cout << "wrote " << sim.cohort.size() << " subjects to " << (out / "cohort.csv").string()
            << " (truth.csv is for validation only)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"External-control survival analysis with IPTW and IPCW weighting"};
  app.set_version_flag("--version", std::string("ectrial ") + kVersion);
  app.require_subcommand(1);

  std::string config, cohort, observations, out;
  std::uint64_t seed = 0;
  int bootstrap = -1;
  int threads = 1;
  auto* run = app.add_subcommand("run", "Run an analysis plan on a cohort");
  run->add_option("--config", config, "Estimand config (TOML or JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--cohort", cohort, "Cohort CSV")->required()->check(CLI::ExistingFile);
  run->add_option("--observations", observations, "Observations CSV for windowed eligibility rules")
      ->check(CLI::ExistingFile);
  run->add_option("--out", out, "Output directory")->required();
  run->add_option("--seed", seed, "Bootstrap seed")->required();
  run->add_option("--bootstrap", bootstrap, "Bootstrap replicates (overrides the config)")->check(CLI::NonNegativeNumber);
  run->add_option("--threads", threads, "Bootstrap worker threads")->check(CLI::PositiveNumber);

  std::string sim_config, sim_out;
  std::uint64_t sim_seed = 0;
  long long sim_n = 0;
  auto* sim = app.add_subcommand("simulate", "Write a simulated cohort and its truth sidecar");
  sim->add_option("--config", sim_config, "Simulation config (TOML or JSON); defaults if omitted")
      ->check(CLI::ExistingFile);
  sim->add_option("--out", sim_out, "Output directory")->required();
  auto* seed_opt = sim->add_option("--seed", sim_seed, "Seed (overrides the config)");
  auto* n_opt = sim->add_option("--n", sim_n, "Subjects per arm (overrides the config)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run)
      return run_command(config, cohort, observations, out, seed,
                         bootstrap >= 0 ? std::optional<int>(bootstrap) : std::nullopt, threads);
    std::optional<std::size_t> n;
    if (n_opt->count()) {
      if (sim_n < 0) throw ConfigError("simulation: n_per_arm must be >= 1");
      n = static_cast<std::size_t>(sim_n);
    }
    return simulate_command(sim_config, sim_out,
                            seed_opt->count() ? std::optional<std::uint64_t>(sim_seed) : std::nullopt, n);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
