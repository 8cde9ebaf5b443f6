#include "fedsim/client.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "fedsim/error.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

void ClientProfile::validate() const {
  if (!(speed > 0.0) || !std::isfinite(speed)) throw Error("client: speed must be positive");
  if (!(up_latency_s >= 0.0) || !(down_latency_s >= 0.0) || !std::isfinite(up_latency_s) ||
      !std::isfinite(down_latency_s)) {
    throw Error("client: latencies must be finite and >= 0");
  }
  if (!(capacity > 0.0) || !std::isfinite(capacity)) throw Error("client: capacity must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate <= 1.0)) throw Error("client: dropout_rate must lie in [0, 1]");
  if (weibull) weibull->validate();
}

std::size_t assign_batch_size(const ClientProfile& profile, std::size_t b_ref, double cap_ref,
                              std::size_t b_min, std::size_t b_max) {
  if (!std::has_single_bit(b_ref) || !std::has_single_bit(b_min) || !std::has_single_bit(b_max)) {
    throw Error("batch sizing: b_ref, b_min and b_max must be powers of two");
  }
  if (!(b_min <= b_ref && b_ref <= b_max)) throw Error("batch sizing: need b_min <= b_ref <= b_max");
  if (!(cap_ref > 0.0)) throw Error("batch sizing: cap_ref must be positive");

  const double target = static_cast<double>(b_ref) * profile.capacity / cap_ref;
  if (!(target >= static_cast<double>(b_min))) return b_min;
  if (target >= static_cast<double>(b_max)) return b_max;
  // Nearest power of two in linear distance; ties go to the smaller one.
  const auto lo = std::bit_floor(static_cast<std::size_t>(target));
  const auto hi = lo * 2;
  const std::size_t pick = (target - static_cast<double>(lo) <= static_cast<double>(hi) - target) ? lo : hi;
  return std::clamp(pick, b_min, b_max);
}

double pass_train_time(std::size_t epochs, std::size_t num_samples, double speed) {
  return static_cast<double>(epochs) * static_cast<double>(num_samples) / speed;
}

std::size_t pass_steps(std::size_t epochs, std::size_t num_samples, std::size_t batch_size) {
  return epochs * ((num_samples + batch_size - 1) / batch_size);
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Engine eng = make_engine(derive_seed(seed, Stream::shuffle, {epoch}));
  std::shuffle(order.begin(), order.end(), eng);
  return order;
}

std::uint64_t step_dropout_seed(std::uint64_t seed, std::size_t epoch, std::size_t batch) {
  return derive_seed(seed, Stream::dropout, {epoch, batch});
}

namespace {

double recovered_duration(double total_time, const FailureTrace& trace, double recovery_s) {
  return total_time + (trace.fail_at_s - trace.resumed_from_s) + recovery_s;
}

}  // namespace

PassPlan plan_pass(std::size_t epochs, std::size_t n, std::size_t batch_size, double speed,
                   std::optional<double> fail_at_s, double interval_s, double recovery_s) {
  if (n == 0 || batch_size == 0 || !(speed > 0.0)) throw Error("plan_pass: invalid schedule");
  PassPlan plan;
  const double total_time = pass_train_time(epochs, n, speed);
  plan.duration_s = total_time;
  if (!fail_at_s) return plan;

  const std::size_t per_epoch = (n + batch_size - 1) / batch_size;
  const std::size_t total_steps = epochs * per_epoch;
  double elapsed = 0.0;
  double last_ckpt = 0.0;
  std::optional<double> newest_ckpt;
  for (std::size_t step = 0; step < total_steps; ++step) {
    const std::size_t b = step % per_epoch;
    const std::size_t rows = std::min(n, (b + 1) * batch_size) - b * batch_size;
    const double step_time = static_cast<double>(rows) / speed;
    if (elapsed + step_time > *fail_at_s) {
      FailureTrace trace{*fail_at_s, newest_ckpt.has_value(), newest_ckpt.value_or(0.0)};
      plan.failure = trace;
      if (!trace.restored) {
        plan.lost = true;
        plan.duration_s = *fail_at_s;
      } else {
        plan.duration_s = recovered_duration(total_time, trace, recovery_s);
      }
      return plan;
    }
    elapsed += step_time;
    if (interval_s > 0.0 && step + 1 < total_steps && elapsed - last_ckpt >= interval_s * (1.0 - 1e-12)) {
      newest_ckpt = elapsed;
      last_ckpt = elapsed;
    }
  }
  return plan;
}

TrainOutcome train_local(const ModelSpec& spec, const ParamVector& w_start, const Batch& shard,
                         const LocalTrainConfig& cfg, std::optional<double> fail_at_s,
                         const CheckpointSettings* ckpt) {
  const std::size_t n = shard.rows();
  if (n == 0) throw Error("train_local: empty shard");
  if (cfg.batch_size == 0) throw Error("train_local: batch_size must be >= 1");
  if (!(cfg.speed > 0.0)) throw Error("train_local: speed must be positive");
  check_params(spec, w_start);

  const double total_time = pass_train_time(cfg.epochs, n, cfg.speed);
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * per_epoch;
  const bool checkpointing = ckpt != nullptr && ckpt->store != nullptr && ckpt->interval_s > 0.0;

  TrainOutcome out;
  ParamVector params = w_start;
  double lr = cfg.lr;
  TrainProgress progress;
  double last_ckpt_s = 0.0;
  std::uint64_t ckpt_seq = 0;
  bool crashed = false;
  const auto scope = static_cast<std::int64_t>(cfg.client_id);

  Batch batch;
  batch.features.resize(0, shard.features.cols());

  while (progress.epoch < cfg.epochs) {
    const auto order = epoch_order(cfg.seed, progress.epoch, n);
    bool resumed = false;
    while (progress.batch < per_epoch) {
      const std::size_t begin = progress.batch * cfg.batch_size;
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      const double step_time = static_cast<double>(end - begin) / cfg.speed;

      if (fail_at_s && !crashed && progress.elapsed_s + step_time > *fail_at_s) {
        crashed = true;
        FailureTrace trace{*fail_at_s, false, 0.0};
        if (checkpointing) {
          if (auto name = ckpt->store->latest(scope)) {
            try {
              auto blob = ckpt->store->get(*name);
              if (blob) {
                Checkpoint c = restore_checkpoint(*blob);
                if (c.round == cfg.round && c.rng_seed == cfg.seed && c.params.size() == params.size()) {
                  params = std::move(c.params);
                  lr = c.lr;
                  progress = c.progress;
                  trace.restored = true;
                  trace.resumed_from_s = progress.elapsed_s;
                  last_ckpt_s = progress.elapsed_s;
                }
              }
            } catch (const CheckpointError&) {
              // fall through: the pass is lost
            }
          }
        }
        out.failure = trace;
        if (!trace.restored) {
          out.duration_s = *fail_at_s;
          return out;
        }
        resumed = true;
        break;
      }

      const auto rows = static_cast<Eigen::Index>(end - begin);
      batch.features.resize(rows, shard.features.cols());
      batch.labels.resize(static_cast<std::size_t>(rows));
      for (Eigen::Index r = 0; r < rows; ++r) {
        const auto src = order[begin + static_cast<std::size_t>(r)];
        batch.features.row(r) = shard.features.row(static_cast<Eigen::Index>(src));
        batch.labels[static_cast<std::size_t>(r)] = shard.labels[src];
      }
      LossGrad lg;
      try {
        lg = loss_and_grad(spec, params, batch, step_dropout_seed(cfg.seed, progress.epoch, progress.batch));
      } catch (const Error& e) {
        out.diverged = e.what();
        out.duration_s = progress.elapsed_s;
        return out;
      }
      sgd_step_inplace(params, lg.grad, lr);
      ++out.steps_executed;
      ++progress.batch;
      ++progress.steps;
      progress.elapsed_s += step_time;

      if (checkpointing && progress.steps < total_steps &&
          progress.elapsed_s - last_ckpt_s >= ckpt->interval_s * (1.0 - 1e-12)) {
        TrainProgress at = progress;
        if (at.batch == per_epoch) {
          ++at.epoch;
          at.batch = 0;
        }
        Checkpoint c{scope, cfg.round, params, lr, cfg.seed, at};
        ckpt->store->put(checkpoint_name(scope, cfg.round, ckpt_seq++), save_checkpoint(c));
        ++out.checkpoints_saved;
        last_ckpt_s = progress.elapsed_s;
      }
    }
    if (resumed) continue;  // re-enter at the restored (epoch, batch)
    ++progress.epoch;
    progress.batch = 0;
  }

  if (!params.all_finite()) throw Error("train_local: non-finite parameters after training");
  ClientUpdate u;
  u.client_id = cfg.client_id;
  u.round = cfg.round;
  u.params = std::move(params);
  u.num_samples = n;
  u.train_time_s = total_time;
  u.sgd_steps = static_cast<std::size_t>(progress.steps);
  out.update = std::move(u);
  out.duration_s = out.failure ? recovered_duration(total_time, *out.failure, ckpt ? ckpt->recovery_s : 0.0) : total_time;
  return out;
}

}  // namespace fedsim
