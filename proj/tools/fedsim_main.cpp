#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/error.hpp"
#include "fedsim/experiment.hpp"
#include "fedsim/format.hpp"
#include "fedsim/simnet.hpp"

namespace fs = std::filesystem;
using namespace fedsim;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  std::optional<std::size_t> workers;
};

enum CommonOpt : unsigned { kConfig = 1, kSeed = 2, kOut = 4, kWorkers = 8, kAll = 15 };

void add_common(CLI::App* cmd, Common& c, unsigned which = kAll) {
  if (which & kConfig) {
    cmd->add_option("--config", c.config, "Experiment config (JSON)");
    cmd->add_option("--set", c.overrides, "Config override key.path=value (repeatable)");
  }
  if (which & kSeed) cmd->add_option("--seed", c.seed, "Master seed");
  if (which & kOut) cmd->add_option("--out", c.out, "Output directory");
  if (which & kWorkers) cmd->add_option("--workers", c.workers, "Training worker threads (0 runs inline)");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("--config", "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Precedence: flags > config file > defaults.
ExperimentConfig resolve_config(const Common& c) {
  std::vector<std::string> sets = c.overrides;
  if (c.seed) sets.push_back("seed=" + std::to_string(*c.seed));
  if (!c.out.empty()) sets.push_back("output_dir=" + nlohmann::json(c.out).dump());
  if (c.workers) sets.push_back("workers=" + std::to_string(*c.workers));
  std::string text = c.config.empty() ? "{}" : read_file(c.config);
  try {
    text = apply_overrides(text, sets);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("--config", std::string("invalid JSON: ") + e.what());
  }
  return ExperimentConfig::from_json(text);
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--values", "not a number: '" + item + "'");
    }
  }
  return out;
}

int cmd_run(const Common& c) {
  const ExperimentConfig cfg = resolve_config(c);
  const RunResult r = run_to_dir(cfg, cfg.output_dir);
  const RunDigests d = digests_of(r);
  std::cout << "mode " << to_string(cfg.mode) << "  seed " << cfg.seed << "\n"
            << "accuracy " << format_double(r.summary.accuracy) << "  auc "
            << (r.summary.auc ? format_double(*r.summary.auc) : "n/a") << "\n"
            << "comm_time_s " << format_double(r.summary.comm_time_s) << "  aggregations " << r.summary.updates
            << "  accepted_frac " << format_double(r.summary.accepted_frac) << "\n"
            << "wall_s " << format_double(r.wall_s) << "\n"
            << format_digests(d) << "artifacts " << cfg.output_dir << "\n";
  return kOk;
}

int cmd_sweep(const Common& c, const std::string& axis, const std::string& values, std::size_t repeats,
              const std::vector<std::string>& modes, bool match_horizon) {
  const ExperimentConfig base = resolve_config(c);
  SweepSpec spec;
  try {
    spec.axis = sweep_axis_from_string(axis);
  } catch (const Error& e) {
    throw ConfigError("--axis", e.what());
  }
  spec.values = parse_values(values);
  spec.repeats = repeats;
  spec.match_horizon = match_horizon;
  for (const auto& m : modes) {
    try {
      spec.modes.push_back(run_mode_from_string(m));
    } catch (const Error& e) {
      throw ConfigError("--modes", e.what());
    }
  }
  spec.validate();
  const auto rows = run_sweep(base, spec, base.output_dir);
  std::size_t failed = 0;
  for (const auto& r : rows) failed += r.summary ? 0 : 1;
  std::cout << rows.size() << " cells, " << failed << " failed; merged table at "
            << (fs::path(base.output_dir) / "sweep.csv").string() << "\n";
  return failed == rows.size() ? kRuntime : kOk;
}

int cmd_compare(const Common& c, const std::string& a, const std::string& b, const std::string& alternative,
                std::size_t min_runs) {
  Alternative alt;
  try {
    alt = alternative_from_string(alternative);
  } catch (const Error& e) {
    throw ConfigError("--alternative", e.what());
  }
  const CompareResult r = compare_runs(a, b, alt, min_runs);
  nlohmann::ordered_json j;
  j["a"] = a;
  j["b"] = b;
  j["n1"] = r.test.n1;
  j["n2"] = r.test.n2;
  j["u_statistic"] = r.test.u_statistic;
  j["p_value"] = r.test.p_value;
  j["method"] = to_string(r.test.method);
  j["alternative"] = to_string(r.test.alternative);
  j["verdict"] = r.significant ? "significant" : "not significant";
  std::cout << j.dump(2) << "\n";
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    std::ofstream(fs::path(c.out) / "compare.json") << j.dump(2) << "\n";
  }
  return kOk;
}

int cmd_replay(const Common& c, const std::string& dir) {
  const ReplayOutcome r = replay_run(dir, c.workers.value_or(0));
  std::cout << "recorded\n" << format_digests(r.recorded) << "replayed\n" << format_digests(r.replayed)
            << (r.match() ? "match\n" : "MISMATCH\n");
  return r.match() ? kOk : kRuntime;
}

int cmd_gen_data(const Common& c, std::size_t n, std::size_t d, double frac, double sep) {
  if (c.out.empty()) throw ConfigError("--out", "output CSV path required");
  const Dataset ds = synth_anomaly(n, d, frac, sep, c.seed.value_or(0));
  const fs::path out(c.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_csv(ds, out);
  std::cout << "wrote " << ds.rows() << " rows (" << ds.positives() << " anomalies) to " << out.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator: filtered sync/async aggregation with fault injection"};
  app.require_subcommand(1);

  Common run_c, sweep_c, cmp_c, replay_c, gen_c;
  auto* run = app.add_subcommand("run", "Run one experiment and write its artifacts");
  add_common(run, run_c);

  auto* sweep = app.add_subcommand("sweep", "Run a grid of experiments along one axis");
  add_common(sweep, sweep_c);
  std::string axis, values;
  std::size_t repeats = 1;
  std::vector<std::string> modes;
  sweep->add_option("--axis", axis, "clients | batch | theta | dropout")->required();
  sweep->add_option("--values", values, "Comma-separated axis values")->required();
  sweep->add_option("--repeats", repeats, "Seeds per cell");
  sweep->add_option("--modes", modes, "Run modes to compare")->delimiter(',');
  bool match_horizon = false;
  sweep->add_flag("--match-horizon", match_horizon, "Bound async cells by the baseline's simulated time");

  auto* cmp = app.add_subcommand("compare", "Mann-Whitney U test on final AUCs of two run collections");
  add_common(cmp, cmp_c, kOut);
  std::string dir_a, dir_b, alternative = "two_sided";
  std::size_t min_runs = 20;
  cmp->add_option("dir_a", dir_a, "First collection")->required();
  cmp->add_option("dir_b", dir_b, "Second collection")->required();
  cmp->add_option("--alternative", alternative, "two_sided | greater (a tends to exceed b)");
  cmp->add_option("--min-runs", min_runs, "Minimum AUC values per side");

  auto* rep = app.add_subcommand("replay", "Re-run a recorded run and verify its digests");
  add_common(rep, replay_c, kWorkers);
  std::string run_dir;
  rep->add_option("run_dir", run_dir, "Run directory")->required();

  auto* gen = app.add_subcommand("gen-data", "Export a synthetic anomaly dataset as CSV");
  add_common(gen, gen_c, kSeed | kOut);
  std::size_t n = 20000, d = 20;
  double frac = 0.1, sep = 2.0;
  gen->add_option("--n", n, "Rows");
  gen->add_option("--d", d, "Features");
  gen->add_option("--anomaly-fraction", frac, "Fraction of anomalous rows");
  gen->add_option("--separation", sep, "Mean shift between classes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*run) return cmd_run(run_c);
    if (*sweep) return cmd_sweep(sweep_c, axis, values, repeats, modes, match_horizon);
    if (*cmp) return cmd_compare(cmp_c, dir_a, dir_b, alternative, min_runs);
    if (*rep) return cmd_replay(replay_c, run_dir);
    if (*gen) return cmd_gen_data(gen_c, n, d, frac, sep);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
