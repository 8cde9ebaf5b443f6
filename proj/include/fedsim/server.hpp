#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "fedsim/client.hpp"
#include "fedsim/fault.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/model.hpp"
#include "fedsim/selection.hpp"
#include "fedsim/simnet.hpp"
#include "fedsim/thread_pool.hpp"

namespace fedsim {

struct AggregationRecord {
  std::uint64_t round = 0;  // version produced by the aggregation
  std::vector<std::size_t> accepted_ids;
  double aggregate_time_s = 0.0;
};

struct GlobalState {
  std::uint64_t round = 0;  // aggregation rounds completed (sync) or model version (async)
  ParamVector w_g;
  std::optional<ParamVector> w_g_prev;  // w_g before the most recent aggregation
  std::vector<AggregationRecord> history;
};

GlobalState initial_state(const ModelSpec& spec, std::uint64_t seed);

// Elementwise mean; nullopt for an empty list. Inputs are summed in a
// canonical order, so the result does not depend on their order.
std::optional<ParamVector> aggregate(std::span<const ParamVector> updates);
std::optional<ParamVector> aggregate(const std::vector<const ParamVector*>& updates,
                                     const std::vector<double>* weights = nullptr);

struct PendingUpdate {
  ClientUpdate update;
  std::uint64_t trained_on = 0;  // model version the pass started from
};

// Flushed whenever |pending| >= k_min, or when timeout_s elapses after the
// first pending update arrives.
struct AsyncBuffer {
  std::vector<PendingUpdate> pending;
  std::size_t k_min = 2;
  double timeout_s = 5.0;
};

struct ClientSlot {
  ClientProfile profile;
  Batch shard;
  std::size_t batch_size = 64;
};

struct TrainingSettings {
  std::size_t epochs = 5;
  double lr = 0.05;
  double lr_decay = 1.0;
};

struct AggregationSettings {
  double cost_per_update_s = 0.05;
  std::size_t k_min = 2;
  double timeout_s = 5.0;
  bool weighted = false;  // weight by sample count instead of the plain mean

  void validate() const;
};

struct FaultSettings {
  double dropout_rate = 0.0;
  bool checkpointing = false;
  double recovery_s = 1.0;
  double grid_fraction = 0.001;            // checkpoint search grid, as a fraction of the pass time
  std::optional<double> fixed_interval_s;  // bypasses the interval optimizer
  std::optional<WeibullModel> weibull;     // shared failure-time law when a profile has none

  void validate() const;
};

struct FederationConfig {
  ModelSpec spec;
  TrainingSettings training;
  AggregationSettings aggregation;
  FaultSettings fault;
  LatencyModel jitter;  // added to each profile's base latency per transfer
  std::uint64_t seed = 0;
  std::size_t workers = 0;
  std::function<EvalResult(const ParamVector&)> evaluator;
};

struct StalenessEntry {
  std::size_t client_id = 0;
  std::uint64_t trained_on = 0;
  std::uint64_t applied = 0;  // version produced by the aggregation that applied it
  std::uint64_t staleness() const noexcept { return applied - 1 - trained_on; }
};

// Owns the simulated clock, event log and client tasks for one run.
// Not thread-safe; a single caller drives it.
class Federation {
 public:
  Federation(FederationConfig config, std::vector<ClientSlot> clients);
  ~Federation();

  Federation(const Federation&) = delete;
  Federation& operator=(const Federation&) = delete;

  // One barrier round over `eligible`. Updates below policy.theta are never
  // uploaded. A round where nothing reaches the server is recorded with
  // aggregations == 0 and w_g unchanged.
  RoundReport run_sync_round(GlobalState& state, const std::vector<std::size_t>& eligible,
                             const SelectionPolicy& policy);

  // Clients loop independently until `pass_budget` passes have completed or
  // the horizon is reached. Passes finishing after that are abandoned while
  // uploads already in flight are still aggregated. One report per
  // `report_every` completed passes plus a final one.
  std::vector<RoundReport> run_async(GlobalState& state, const std::vector<std::size_t>& clients,
                                     const SelectionPolicy& policy, double horizon_s,
                                     std::size_t pass_budget, std::size_t report_every);

  const EventLog& log() const noexcept { return log_; }
  double now() const noexcept { return sim_.now(); }
  const std::vector<StalenessEntry>& staleness() const noexcept { return staleness_; }
  std::size_t sgd_steps() const noexcept { return sgd_steps_; }
  std::size_t uploads_applied() const noexcept { return uploads_applied_; }
  const std::vector<ClientSlot>& clients() const noexcept { return clients_; }
  double checkpoint_interval(std::size_t client) const { return ckpt_interval_.at(client); }
  const MemoryCheckpointStore& global_checkpoints() const noexcept { return *global_store_; }

 private:
  struct Snapshot;
  struct Job;

  std::optional<double> failure_offset(std::size_t client, std::size_t pass) const;
  PassPlan plan(std::size_t client, std::optional<double> fail_at) const;
  std::shared_ptr<Job> launch(std::size_t client, std::shared_ptr<const Snapshot> snap, std::size_t pass,
                              std::optional<double> fail_at, const PassPlan& plan);
  // Abandoned passes are checked but not counted.
  TrainOutcome finish(Job& job, bool counted = true);
  double down_latency(std::size_t client);
  double up_latency(std::size_t client);
  FilterResult filter(const ParamVector& params, const Snapshot& snap, const SelectionPolicy& policy) const;
  // Logs apply/aggregate records and installs `w_new` as the next version.
  void commit(GlobalState& state, const std::vector<PendingUpdate>& applied, const ParamVector& w_new,
              double lr);
  ParamVector combine(const std::vector<PendingUpdate>& updates) const;
  void log(double t, EventKind kind, std::optional<int> client, std::uint64_t round,
           std::optional<bool> accepted = std::nullopt, std::optional<double> relevance = std::nullopt,
           std::optional<std::uint64_t> staleness = std::nullopt);

  FederationConfig cfg_;
  std::vector<ClientSlot> clients_;
  DropoutSchedule dropout_;
  std::vector<double> ckpt_interval_;
  std::vector<std::unique_ptr<MemoryCheckpointStore>> client_stores_;
  std::unique_ptr<MemoryCheckpointStore> global_store_;
  std::uint64_t global_ckpt_seq_ = 0;
  Simulator sim_;
  EventLog log_;
  std::vector<std::uint64_t> down_draws_, up_draws_;
  std::vector<std::size_t> passes_;  // passes started per client
  std::vector<StalenessEntry> staleness_;
  std::size_t sgd_steps_ = 0;
  std::size_t uploads_applied_ = 0;
  std::unique_ptr<ThreadPool> pool_;  // destroyed first so no task outlives the data it reads
};

}  // namespace fedsim
