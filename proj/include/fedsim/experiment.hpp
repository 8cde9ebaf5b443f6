#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/fault.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/model.hpp"
#include "fedsim/selection.hpp"
#include "fedsim/server.hpp"
#include "fedsim/simnet.hpp"

namespace fedsim {

enum class RunMode { sync_baseline, sync_filtered, async_filtered };

std::string to_string(RunMode mode);
RunMode run_mode_from_string(const std::string& s);

// Positive quantities drawn once per client (speeds, base latencies) share
// the latency distribution family.
using Distribution = LatencyModel;

struct ExperimentConfig {
  struct Synthetic {
    std::size_t n = 20000;
    std::optional<std::size_t> n_per_client;  // when set, n = n_per_client * num_clients
    std::size_t d = 20;
    double anomaly_fraction = 0.1;
    double separation = 2.0;
  };
  struct Csv {
    std::string path;
    CsvLoadOptions options;
  };
  struct DatasetConfig {
    std::string source = "synthetic";  // "synthetic" | "csv"
    Synthetic synthetic;
    Csv csv;
    double test_fraction = 0.2;
    std::optional<std::uint64_t> seed;  // fixes data generation independently of the master seed
  };
  struct PartitionConfig {
    std::string kind = "iid";  // "iid" | "dirichlet"
    double alpha = 0.5;
  };
  struct ModelConfig {
    std::vector<std::size_t> hidden_dims{256, 128, 64};
    double dropout = 0.3;
  };
  struct BatchConfig {
    std::string policy = "fixed";  // "fixed" | "dynamic"
    std::size_t size = 64;
    std::size_t b_ref = 64, b_min = 64, b_max = 1024;
    // Effective speed = speed * (batch / b_ref)^speedup_exponent.
    double speedup_exponent = 0.0;
  };
  struct ClientsConfig {
    std::size_t count = 10;
    Distribution speed{Distribution::Kind::constant, 1000.0, 0.0, 0.0, {}};
    Distribution up_latency;
    Distribution down_latency;
    Distribution jitter;  // per transfer
  };
  struct FaultConfig {
    double dropout_rate = 0.0;
    std::optional<WeibullModel> weibull;
    bool checkpointing = false;
    double recovery_s = 1.0;
    double grid_fraction = 0.001;
    std::optional<double> interval_s;
  };

  DatasetConfig dataset;
  PartitionConfig partition;
  ModelConfig model;
  ClientsConfig clients;
  std::size_t rounds = 6;
  std::size_t epochs = 5;
  BatchConfig batch;
  RunMode mode = RunMode::sync_filtered;
  SelectionPolicy selection;
  FaultConfig fault;
  AggregationSettings aggregation;
  double lr = 0.05;
  double lr_decay = 1.0;
  std::uint64_t seed = 0;
  std::size_t workers = 0;
  // Async runs with a horizon stop at that simulated time instead of after
  // rounds * clients passes. Sync runs ignore it.
  std::optional<double> horizon_s;
  std::string output_dir = "runs/latest";

  // Throws ConfigError naming the offending field.
  void validate() const;

  // Canonical JSON: fixed key order, every field present.
  std::string to_json() const;
  // Unknown keys and ill-typed values raise ConfigError; missing keys keep defaults.
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
};

// Applies "a.b.c=value" overrides to the JSON text of a config. The value is
// parsed as JSON when possible and taken as a string otherwise.
std::string apply_overrides(const std::string& config_json, const std::vector<std::string>& assignments);

struct PreparedData {
  Dataset train;
  Dataset test;
  Partition partition;
};

PreparedData prepare_data(const ExperimentConfig& cfg);
std::vector<ClientProfile> make_profiles(const ExperimentConfig& cfg);
std::vector<std::size_t> batch_sizes(const ExperimentConfig& cfg, const std::vector<ClientProfile>& profiles);
ModelSpec model_spec(const ExperimentConfig& cfg, std::size_t input_dim);

struct RunResult {
  RunSummary summary;
  std::vector<RoundReport> reports;
  EventLog log;
  ParamVector final_params;
  std::uint64_t final_round = 0;
  std::vector<StalenessEntry> staleness;
  CommTimeReport comm;
  std::size_t passes_participating = 0;  // successful passes
  std::size_t expected_sgd_steps = 0;    // sum over successful passes of E * ceil(n_i / b_i)
  double wall_s = 0.0;

  std::uint64_t params_digest() const;
};

// Runs an experiment in memory; deterministic for a given config.
RunResult run_experiment(const ExperimentConfig& cfg);

struct RunDigests {
  std::uint64_t events = 0;
  std::uint64_t params = 0;
  std::uint64_t reports = 0;

  bool operator==(const RunDigests&) const = default;
};

RunDigests digests_of(const RunResult& r);
std::string format_digests(const RunDigests& d);
RunDigests parse_digests(const std::string& text);

// config.json, events.jsonl, rounds.jsonl, summary.csv, staleness.csv,
// checkpoints/, digest.txt and timing.json under `dir`.
void write_run_artifacts(const ExperimentConfig& cfg, const RunResult& r, const std::filesystem::path& dir);

// Runs and writes artifacts; on failure writes error.json and rethrows.
RunResult run_to_dir(const ExperimentConfig& cfg, const std::filesystem::path& dir);

struct ReplayOutcome {
  RunDigests recorded;
  RunDigests replayed;
  bool match() const { return recorded == replayed; }
};

ReplayOutcome replay_run(const std::filesystem::path& run_dir, std::size_t workers);

enum class SweepAxis { clients, batch, theta, dropout };
std::string to_string(SweepAxis axis);
SweepAxis sweep_axis_from_string(const std::string& s);

struct SweepSpec {
  SweepAxis axis = SweepAxis::theta;
  std::vector<double> values;
  std::size_t repeats = 1;
  std::vector<RunMode> modes;  // empty: the base config's mode
  // Async cells get the simulated time of the sync_baseline cell with the
  // same value and repeat as their horizon.
  bool match_horizon = false;

  void validate() const;
};

struct SweepRow {
  double value = 0.0;
  RunMode mode = RunMode::sync_filtered;
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  std::optional<RunSummary> summary;
  double window_s = 0.0;             // mean span between aggregation rounds
  std::size_t aggregations = 0;
  std::string error;
};

// Per-repeat seeds are shared by every axis value and mode.
std::uint64_t sweep_seed(std::uint64_t base_seed, std::size_t repeat);
ExperimentConfig sweep_cell_config(const ExperimentConfig& base, SweepAxis axis, double value, RunMode mode,
                                   std::size_t repeat);

// One run per (value, mode, repeat) under out_dir/<axis>-<value>/<mode>/rep-<k>;
// failed cells are recorded and the sweep continues. Writes out_dir/sweep.csv.
std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const SweepSpec& spec,
                                const std::filesystem::path& out_dir);

void write_sweep_csv(const std::filesystem::path& path, SweepAxis axis, const std::vector<SweepRow>& rows);

// Final AUC values from every summary.csv below `dir`.
std::vector<double> collect_aucs(const std::filesystem::path& dir);

struct CompareResult {
  UTestResult test;
  std::vector<double> a, b;
  bool significant = false;  // p < 0.05
};

// Requires at least `min_runs` AUC values per side.
CompareResult compare_runs(const std::filesystem::path& dir_a, const std::filesystem::path& dir_b,
                           Alternative alternative = Alternative::two_sided, std::size_t min_runs = 20);

}  // namespace fedsim
