#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedsim/fault.hpp"
#include "fedsim/model.hpp"
#include "fedsim/selection.hpp"

namespace fedsim {

struct ClientProfile {
  std::size_t id = 0;
  double speed = 1.0;           // samples per simulated second
  double up_latency_s = 0.0;
  double down_latency_s = 0.0;
  double capacity = 1.0;        // abstract resource index
  double dropout_rate = 0.0;
  std::optional<WeibullModel> weibull;

  void validate() const;
};

struct ClientUpdate {
  std::size_t client_id = 0;
  std::size_t round = 0;
  ParamVector params;
  std::size_t num_samples = 0;
  double train_time_s = 0.0;  // epochs * num_samples / speed
  std::optional<RelevanceScore> relevance;
  std::size_t sgd_steps = 0;
};

// Nearest power of two to b_ref * capacity / cap_ref, clamped to [b_min, b_max].
std::size_t assign_batch_size(const ClientProfile& profile, std::size_t b_ref, double cap_ref,
                              std::size_t b_min, std::size_t b_max);

struct LocalTrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 64;
  double lr = 0.05;
  std::uint64_t seed = 0;
  double speed = 1.0;
  std::size_t client_id = 0;
  std::size_t round = 0;
};

// Periodic client checkpointing during a pass.
struct CheckpointSettings {
  double interval_s = 0.0;
  double recovery_s = 0.0;
  CheckpointStore* store = nullptr;
};

struct FailureTrace {
  double fail_at_s = 0.0;        // compute-time offset of the crash
  bool restored = false;
  double resumed_from_s = 0.0;   // offset of the checkpoint resumed from
};

struct TrainOutcome {
  std::optional<ClientUpdate> update;  // empty when the pass was lost
  std::optional<FailureTrace> failure;
  std::optional<std::string> diverged; // loss became non-finite; the pass is abandoned
  std::size_t steps_executed = 0;      // includes steps redone after a restore
  std::size_t checkpoints_saved = 0;
  double duration_s = 0.0;             // compute + redone work + recovery
};

// Simulated-time law for one pass.
double pass_train_time(std::size_t epochs, std::size_t num_samples, double speed);

// Steps per pass: epochs * ceil(n / batch_size).
std::size_t pass_steps(std::size_t epochs, std::size_t num_samples, std::size_t batch_size);

// Runs `epochs` passes of minibatch SGD over `shard`, reshuffling every epoch
// from a counter-derived seed. With `fail_at_s` set, the client crashes at
// that compute offset and resumes from its newest checkpoint after paying the
// recovery time; without a usable checkpoint the pass is lost.
TrainOutcome train_local(const ModelSpec& spec, const ParamVector& w_start, const Batch& shard,
                         const LocalTrainConfig& config,
                         std::optional<double> fail_at_s = std::nullopt,
                         const CheckpointSettings* checkpoints = nullptr);

// Timeline of one pass computed from the schedule alone, without training.
// Agrees with train_local on duration and failure trace.
struct PassPlan {
  double duration_s = 0.0;
  std::optional<FailureTrace> failure;
  bool lost = false;  // crashed with no checkpoint to resume from
};

PassPlan plan_pass(std::size_t epochs, std::size_t num_samples, std::size_t batch_size, double speed,
                   std::optional<double> fail_at_s, double checkpoint_interval_s, double recovery_s);

// Row order for `epoch`; a pure function of (seed, epoch, n).
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n);
std::uint64_t step_dropout_seed(std::uint64_t seed, std::size_t epoch, std::size_t batch);

}  // namespace fedsim
