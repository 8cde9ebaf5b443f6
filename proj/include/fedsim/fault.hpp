#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedsim/model.hpp"

namespace fedsim {

// Failure-time law F(t) = 1 - exp(-(t / lambda)^k).
struct WeibullModel {
  double lambda_s = 1.0;
  double k = 1.0;

  void validate() const;
  bool operator==(const WeibullModel&) const = default;
};

double weibull_cdf(double t_s, const WeibullModel& model);

// Failure time conditioned on failing within [0, horizon_s]; u in [0, 1).
double weibull_conditional_time(const WeibullModel& model, double horizon_s, double u);

struct CheckpointPolicy {
  double t_c_s = 1.0;   // checkpoint interval
  double T_s = 1.0;     // total computation time
  double t_r_s = 0.0;   // recovery time

  void validate() const;
};

// C(t_c) = t_c / T + F(t_c) * t_r / T
double checkpoint_cost(double t_c_s, const CheckpointPolicy& policy, const WeibullModel& model);

// Grid argmin of checkpoint_cost over {grid, 2 grid, ..., T}; ties go to the
// smallest interval.
double optimal_interval(const CheckpointPolicy& policy, const WeibullModel& model, double grid_s);

// Independent per-(client, round) Bernoulli failures, evaluated lazily.
class DropoutSchedule {
 public:
  DropoutSchedule() = default;
  DropoutSchedule(double rate, std::uint64_t seed);

  double rate() const noexcept { return rate_; }
  bool fails(std::size_t client, std::size_t round) const;
  // Where inside the pass the failure strikes, as a fraction in [0, 1).
  double failure_fraction(std::size_t client, std::size_t round) const;

 private:
  double rate_ = 0.0;
  std::uint64_t seed_ = 0;
};

// Materialized schedule: [client][round] -> failed.
std::vector<std::vector<bool>> inject_dropout(std::size_t num_clients, std::size_t num_rounds,
                                              double rate, std::uint64_t seed);

struct TrainProgress {
  std::uint64_t epoch = 0;
  std::uint64_t batch = 0;       // next batch index within `epoch`
  std::uint64_t steps = 0;       // SGD steps applied so far in this pass
  double elapsed_s = 0.0;        // simulated compute time consumed so far

  bool operator==(const TrainProgress&) const = default;
};

struct Checkpoint {
  static constexpr std::int64_t kGlobalScope = -1;

  std::int64_t scope = kGlobalScope;  // client id, or kGlobalScope
  std::uint64_t round = 0;
  ParamVector params;
  double lr = 0.0;
  std::uint64_t rng_seed = 0;  // shuffle/dropout streams are derived from this and `progress`
  TrainProgress progress;

  bool operator==(const Checkpoint&) const = default;
};

std::vector<std::byte> save_checkpoint(const Checkpoint& ckpt);

// Throws CheckpointError on a bad magic, version, truncation or digest mismatch.
Checkpoint restore_checkpoint(std::span<const std::byte> blob);

// {scope}-{round}-{seq}.ckpt, scope being "global" or "client<id>".
std::string checkpoint_name(std::int64_t scope, std::uint64_t round, std::uint64_t seq);

class CheckpointStore {
 public:
  virtual ~CheckpointStore() = default;
  virtual void put(const std::string& name, std::vector<std::byte> blob) = 0;
  virtual std::optional<std::vector<std::byte>> get(const std::string& name) const = 0;
  virtual std::optional<std::string> latest(std::int64_t scope) const = 0;
};

// Keeps only the newest blob per scope unless `retain_all` is set.
class MemoryCheckpointStore final : public CheckpointStore {
 public:
  explicit MemoryCheckpointStore(bool retain_all = false) : retain_all_(retain_all) {}

  void put(const std::string& name, std::vector<std::byte> blob) override;
  std::optional<std::vector<std::byte>> get(const std::string& name) const override;
  std::optional<std::string> latest(std::int64_t scope) const override;

  // Test hook for corrupting stored blobs.
  std::vector<std::byte>* find_mutable(const std::string& name);
  std::size_t size() const noexcept { return blobs_.size(); }

 private:
  bool retain_all_;
  std::map<std::string, std::vector<std::byte>> blobs_;
  std::map<std::int64_t, std::string> latest_;
};

// Files under a run directory plus a "checkpoints.manifest" listing
// "<name> <digest-hex>" per line. Writes go to a temp file then rename.
class DirectoryCheckpointStore final : public CheckpointStore {
 public:
  explicit DirectoryCheckpointStore(std::filesystem::path dir);

  void put(const std::string& name, std::vector<std::byte> blob) override;
  std::optional<std::vector<std::byte>> get(const std::string& name) const override;
  std::optional<std::string> latest(std::int64_t scope) const override;

  const std::filesystem::path& dir() const noexcept { return dir_; }

 private:
  void write_manifest() const;

  std::filesystem::path dir_;
  std::map<std::string, std::uint64_t> manifest_;
  std::map<std::int64_t, std::string> latest_;
};

std::uint64_t blob_digest(std::span<const std::byte> bytes);

}  // namespace fedsim
