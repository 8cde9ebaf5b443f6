#include "fedsim/server.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "fedsim/error.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

GlobalState initial_state(const ModelSpec& spec, std::uint64_t seed) {
  GlobalState s;
  s.w_g = init_params(spec, derive_seed(seed, Stream::init));
  return s;
}

std::optional<ParamVector> aggregate(const std::vector<const ParamVector*>& updates,
                                     const std::vector<double>* weights) {
  if (updates.empty()) return std::nullopt;
  const std::size_t m = updates.front()->size();
  for (const auto* u : updates) {
    if (u->size() != m) throw Error("aggregate: updates differ in length");
  }
  if (weights && weights->size() != updates.size()) throw Error("aggregate: one weight per update required");

  std::vector<std::size_t> order(updates.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Canonical summation order: lexicographic on (values, weight).
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& va = updates[a]->values;
    const auto& vb = updates[b]->values;
    if (va != vb) return std::lexicographical_compare(va.begin(), va.end(), vb.begin(), vb.end());
    return weights ? (*weights)[a] < (*weights)[b] : false;
  });

  ParamVector out;
  out.spec_digest = updates.front()->spec_digest;
  out.values.assign(m, 0.0);
  double total = 0.0;
  for (std::size_t i : order) {
    const double w = weights ? (*weights)[i] : 1.0;
    if (!(w > 0.0) || !std::isfinite(w)) throw Error("aggregate: weights must be positive");
    total += w;
    const auto& v = updates[i]->values;
    if (weights) {
      for (std::size_t j = 0; j < m; ++j) out.values[j] += w * v[j];
    } else {
      for (std::size_t j = 0; j < m; ++j) out.values[j] += v[j];
    }
  }
  for (double& x : out.values) x /= total;
  return out;
}

std::optional<ParamVector> aggregate(std::span<const ParamVector> updates) {
  std::vector<const ParamVector*> ptrs;
  ptrs.reserve(updates.size());
  for (const auto& u : updates) ptrs.push_back(&u);
  return aggregate(ptrs);
}

void AggregationSettings::validate() const {
  if (!(cost_per_update_s >= 0.0) || !std::isfinite(cost_per_update_s)) {
    throw ConfigError("aggregation.cost_per_update_s", "must be finite and >= 0");
  }
  if (k_min < 1) throw ConfigError("aggregation.k_min", "must be >= 1");
  if (!(timeout_s > 0.0) || !std::isfinite(timeout_s)) throw ConfigError("aggregation.timeout_s", "must be positive");
}

void FaultSettings::validate() const {
  if (!(dropout_rate >= 0.0 && dropout_rate <= 1.0)) throw ConfigError("fault.dropout_rate", "must lie in [0, 1]");
  if (!(recovery_s >= 0.0) || !std::isfinite(recovery_s)) throw ConfigError("fault.recovery_s", "must be >= 0");
  if (!(grid_fraction > 0.0 && grid_fraction <= 1.0)) throw ConfigError("fault.grid_fraction", "must lie in (0, 1]");
  if (fixed_interval_s && !(*fixed_interval_s > 0.0)) throw ConfigError("fault.interval_s", "must be positive");
  if (weibull) {
    try {
      weibull->validate();
    } catch (const Error& e) {
      throw ConfigError("fault.weibull", e.what());
    }
  }
}

// ---------------------------------------------------------------------------

struct Federation::Snapshot {
  std::uint64_t version = 0;
  ParamVector w;
  std::optional<ParamVector> w_prev;
};

struct Federation::Job {
  std::size_t client = 0;
  std::size_t pass = 0;
  std::shared_ptr<const Snapshot> snap;
  PassPlan plan;
  std::future<TrainOutcome> result;
};

Federation::Federation(FederationConfig config, std::vector<ClientSlot> clients)
    : cfg_(std::move(config)), clients_(std::move(clients)) {
  cfg_.spec.validate();
  cfg_.aggregation.validate();
  cfg_.fault.validate();
  cfg_.jitter.validate();
  if (clients_.empty()) throw Error("federation: at least one client required");
  if (cfg_.training.epochs < 1) throw ConfigError("training.epochs", "must be >= 1");
  dropout_ = DropoutSchedule(cfg_.fault.dropout_rate, derive_seed(cfg_.seed, Stream::failure_point));

  const std::size_t n = clients_.size();
  for (std::size_t c = 0; c < n; ++c) {
    auto& slot = clients_[c];
    slot.profile.validate();
    slot.shard.validate();
    if (slot.shard.rows() == 0) throw Error("federation: client " + std::to_string(c) + " has an empty shard");
    if (slot.batch_size == 0) throw Error("federation: batch size must be >= 1");
    if (static_cast<std::size_t>(slot.shard.features.cols()) != cfg_.spec.input_dim) {
      throw Error("federation: shard width does not match the model input");
    }
    const double pass_s = pass_train_time(cfg_.training.epochs, slot.shard.rows(), slot.profile.speed);
    double interval = 0.0;
    if (cfg_.fault.checkpointing) {
      if (cfg_.fault.fixed_interval_s) {
        interval = *cfg_.fault.fixed_interval_s;
      } else {
        const WeibullModel law = slot.profile.weibull.value_or(cfg_.fault.weibull.value_or(WeibullModel{pass_s, 1.0}));
        interval = optimal_interval(CheckpointPolicy{pass_s, pass_s, cfg_.fault.recovery_s}, law,
                                    pass_s * cfg_.fault.grid_fraction);
      }
    }
    ckpt_interval_.push_back(interval);
    client_stores_.push_back(std::make_unique<MemoryCheckpointStore>());
  }
  global_store_ = std::make_unique<MemoryCheckpointStore>();
  down_draws_.assign(n, 0);
  up_draws_.assign(n, 0);
  passes_.assign(n, 0);
  pool_ = std::make_unique<ThreadPool>(cfg_.workers);
}

Federation::~Federation() = default;

void Federation::log(double t, EventKind kind, std::optional<int> client, std::uint64_t round,
                     std::optional<bool> accepted, std::optional<double> relevance,
                     std::optional<std::uint64_t> staleness) {
  LogRecord r;
  r.t_s = t;
  r.kind = kind;
  r.client_id = client;
  r.round = round;
  r.accepted = accepted;
  r.relevance = relevance;
  r.staleness = staleness;
  log_.append(std::move(r));
}

std::optional<double> Federation::failure_offset(std::size_t c, std::size_t pass) const {
  const auto& p = clients_[c].profile;
  const double rate = p.dropout_rate > 0.0 ? p.dropout_rate : cfg_.fault.dropout_rate;
  if (!(rate > 0.0)) return std::nullopt;
  // A per-profile rate uses its own schedule so that rates stay independent per client.
  const DropoutSchedule sched = p.dropout_rate > 0.0 ? DropoutSchedule(rate, derive_seed(cfg_.seed, Stream::failure_point, {c}))
                                                     : dropout_;
  if (!sched.fails(c, pass)) return std::nullopt;
  const double pass_s = pass_train_time(cfg_.training.epochs, clients_[c].shard.rows(), p.speed);
  const double u = sched.failure_fraction(c, pass);
  const auto& law = p.weibull ? p.weibull : cfg_.fault.weibull;
  return law ? weibull_conditional_time(*law, pass_s, u) : u * pass_s;
}

PassPlan Federation::plan(std::size_t c, std::optional<double> fail_at) const {
  const auto& slot = clients_[c];
  return plan_pass(cfg_.training.epochs, slot.shard.rows(), slot.batch_size, slot.profile.speed, fail_at,
                   ckpt_interval_[c], cfg_.fault.recovery_s);
}

std::shared_ptr<Federation::Job> Federation::launch(std::size_t c, std::shared_ptr<const Snapshot> snap,
                                                    std::size_t pass, std::optional<double> fail_at,
                                                    const PassPlan& plan) {
  auto job = std::make_shared<Job>();
  job->client = c;
  job->pass = pass;
  job->snap = snap;
  job->plan = plan;

  LocalTrainConfig tc;
  tc.epochs = cfg_.training.epochs;
  tc.batch_size = clients_[c].batch_size;
  tc.lr = lr_schedule(pass, cfg_.training.lr, cfg_.training.lr_decay);
  tc.seed = derive_seed(cfg_.seed, Stream::client_train, {c, pass});
  tc.speed = clients_[c].profile.speed;
  tc.client_id = c;
  tc.round = pass;
  std::optional<CheckpointSettings> ck;
  if (cfg_.fault.checkpointing) ck = CheckpointSettings{ckpt_interval_[c], cfg_.fault.recovery_s, client_stores_[c].get()};

  const ModelSpec* spec = &cfg_.spec;
  const Batch* shard = &clients_[c].shard;
  job->result = pool_->submit([spec, shard, snap, tc, fail_at, ck]() {
    return train_local(*spec, snap->w, *shard, tc, fail_at, ck ? &*ck : nullptr);
  });
  return job;
}

TrainOutcome Federation::finish(Job& job, bool counted) {
  TrainOutcome out = job.result.get();
  if (out.diverged) return out;
  const bool same_failure = out.failure.has_value() == job.plan.failure.has_value() &&
                            (!out.failure || (out.failure->restored == job.plan.failure->restored &&
                                              out.failure->resumed_from_s == job.plan.failure->resumed_from_s));
  if (out.duration_s != job.plan.duration_s || !same_failure) {
    std::ostringstream msg;
    msg << "federation: client " << job.client << " pass " << job.pass << " took " << out.duration_s
        << " s but was scheduled for " << job.plan.duration_s << " s";
    throw Error(msg.str());
  }
  if (counted && out.update) sgd_steps_ += out.update->sgd_steps;
  return out;
}

double Federation::down_latency(std::size_t c) {
  const std::uint64_t draw = down_draws_[c]++;
  return clients_[c].profile.down_latency_s + cfg_.jitter.sample(derive_seed(cfg_.seed, Stream::latency, {c, 0, draw}));
}

double Federation::up_latency(std::size_t c) {
  const std::uint64_t draw = up_draws_[c]++;
  return clients_[c].profile.up_latency_s + cfg_.jitter.sample(derive_seed(cfg_.seed, Stream::latency, {c, 1, draw}));
}

FilterResult Federation::filter(const ParamVector& params, const Snapshot& snap, const SelectionPolicy& policy) const {
  SelectionPolicy p = policy;
  // Without a previous global there is no update direction to compare against.
  if (p.mode == SelectionMode::delta_sign && !snap.w_prev) p.mode = SelectionMode::weight_sign;
  return filter_update(params, snap.w, snap.w_prev ? &*snap.w_prev : nullptr, p);
}

ParamVector Federation::combine(const std::vector<PendingUpdate>& updates) const {
  std::vector<const ParamVector*> ptrs;
  std::vector<double> weights;
  for (const auto& u : updates) {
    ptrs.push_back(&u.update.params);
    weights.push_back(static_cast<double>(u.update.num_samples));
  }
  auto out = aggregate(ptrs, cfg_.aggregation.weighted ? &weights : nullptr);
  if (!out) throw Error("federation: nothing to aggregate");
  return std::move(*out);
}

void Federation::commit(GlobalState& state, const std::vector<PendingUpdate>& applied, const ParamVector& w_new,
                        double lr) {
  const double t = sim_.now();
  const std::uint64_t version = state.round + 1;
  AggregationRecord rec{version, {}, t};
  for (const auto& p : applied) {
    StalenessEntry e{p.update.client_id, p.trained_on, version};
    staleness_.push_back(e);
    rec.accepted_ids.push_back(p.update.client_id);
    log(t, EventKind::apply, static_cast<int>(p.update.client_id), version, std::nullopt, std::nullopt, e.staleness());
  }
  log(t, EventKind::aggregate, std::nullopt, version, true);
  uploads_applied_ += applied.size();
  state.w_g_prev = std::move(state.w_g);
  state.w_g = w_new;
  state.round = version;
  state.history.push_back(std::move(rec));
  if (cfg_.fault.checkpointing) {
    Checkpoint ck{Checkpoint::kGlobalScope, version, state.w_g, lr, cfg_.seed, {}};
    global_store_->put(checkpoint_name(Checkpoint::kGlobalScope, version, global_ckpt_seq_++), save_checkpoint(ck));
    log(t, EventKind::checkpoint, std::nullopt, version);
  }
}

// ---------------------------------------------------------------------------

RoundReport Federation::run_sync_round(GlobalState& state, const std::vector<std::size_t>& eligible,
                                       const SelectionPolicy& policy) {
  policy.validate();
  if (eligible.empty()) throw Error("run_sync_round: at least one eligible client required");
  std::set<std::size_t> seen;
  for (std::size_t c : eligible) {
    if (c >= clients_.size()) throw Error("run_sync_round: unknown client " + std::to_string(c));
    if (!seen.insert(c).second) throw Error("run_sync_round: duplicate client " + std::to_string(c));
  }
  check_params(cfg_.spec, state.w_g);

  const double t0 = sim_.now();
  const std::uint64_t r = state.round;
  const double lr = lr_schedule(r, cfg_.training.lr, cfg_.training.lr_decay);
  auto snap = std::make_shared<const Snapshot>(Snapshot{r, state.w_g, state.w_g_prev});

  struct Slot {
    PassPlan plan;
    bool dropped = false;
    std::shared_ptr<Job> job;
    std::optional<ClientUpdate> update;
  };
  std::map<std::size_t, Slot> slots;
  RoundReport rep;
  rep.round = r + 1;
  double relevance_sum = 0.0;

  for (std::size_t c : eligible) {
    Slot slot;
    const auto fail_at = failure_offset(c, r);
    slot.plan = plan(c, fail_at);
    slot.dropped = fail_at && (!cfg_.fault.checkpointing || slot.plan.lost);
    if (!slot.dropped) slot.job = launch(c, snap, r, fail_at, slot.plan);
    slots.emplace(c, std::move(slot));
    sim_.schedule(t0 + down_latency(c), EventKind::broadcast_arrive, static_cast<int>(c), r);
  }

  std::vector<PendingUpdate> accepted;
  const auto handler = [&](const SimEvent& ev) {
    const auto c = static_cast<std::size_t>(ev.client_id);
    Slot& slot = slots.at(c);
    switch (ev.kind) {
      case EventKind::broadcast_arrive: {
        log(ev.t_s, ev.kind, ev.client_id, r);
        const auto& f = slot.plan.failure;
        if (slot.dropped) {
          sim_.schedule(ev.t_s + f->fail_at_s, EventKind::client_fail, ev.client_id, r);
          break;
        }
        if (f) {
          sim_.schedule(ev.t_s + f->fail_at_s, EventKind::client_fail, ev.client_id, r);
          sim_.schedule(ev.t_s + f->fail_at_s + cfg_.fault.recovery_s, EventKind::client_recover, ev.client_id, r);
        }
        sim_.schedule(ev.t_s + slot.plan.duration_s, EventKind::train_done, ev.client_id, r);
        break;
      }
      case EventKind::client_fail:
        log(ev.t_s, ev.kind, ev.client_id, r, false);
        ++rep.failed;
        break;
      case EventKind::client_recover:
        log(ev.t_s, ev.kind, ev.client_id, r);
        break;
      case EventKind::train_done: {
        TrainOutcome out = finish(*slot.job);
        slot.job.reset();
        if (!out.update) {
          log(ev.t_s, EventKind::client_fail, ev.client_id, r, false);
          ++rep.failed;
          break;
        }
        ++rep.trained;
        rep.sgd_steps += out.update->sgd_steps;
        const FilterResult fr = filter(out.update->params, *snap, policy);
        const bool ok = fr.decision == Decision::accept;
        out.update->relevance = fr.score;
        relevance_sum += fr.score.ratio;
        log(ev.t_s, ev.kind, ev.client_id, r, ok, fr.score.ratio);
        if (ok) {
          slot.update = std::move(out.update);
          sim_.schedule(ev.t_s + up_latency(c), EventKind::upload_arrive, ev.client_id, r);
        }
        break;
      }
      case EventKind::upload_arrive:
        log(ev.t_s, ev.kind, ev.client_id, r);
        ++rep.accepted;
        accepted.push_back(PendingUpdate{std::move(*slot.update), r});
        slot.update.reset();
        break;
      default:
        throw Error("run_sync_round: unexpected event " + to_string(ev.kind));
    }
  };
  sim_.run_until(std::numeric_limits<double>::infinity(), handler);

  // Barrier reached: the last completion or failure notice has arrived.
  if (accepted.empty()) {
    log(sim_.now(), EventKind::aggregate, std::nullopt, r + 1, false);
    state.round = r + 1;
    state.history.push_back(AggregationRecord{r + 1, {}, sim_.now()});
    rep.stalled = rep.trained == 0;
  } else {
    std::sort(accepted.begin(), accepted.end(),
              [](const PendingUpdate& a, const PendingUpdate& b) { return a.update.client_id < b.update.client_id; });
    const ParamVector w_new = combine(accepted);
    const double done = sim_.now() + cfg_.aggregation.cost_per_update_s * static_cast<double>(accepted.size());
    sim_.schedule(done, EventKind::aggregate);
    sim_.run_until(std::numeric_limits<double>::infinity(), [&](const SimEvent&) { commit(state, accepted, w_new, lr); });
    rep.aggregations = 1;
  }

  rep.t_s = sim_.now();
  rep.round_time_s = rep.t_s - t0;
  rep.accepted_frac = rep.trained ? static_cast<double>(rep.accepted) / static_cast<double>(rep.trained) : 0.0;
  if (rep.trained) rep.mean_relevance = relevance_sum / static_cast<double>(rep.trained);
  if (cfg_.evaluator) rep.eval = cfg_.evaluator(state.w_g);
  return rep;
}

// ---------------------------------------------------------------------------

std::vector<RoundReport> Federation::run_async(GlobalState& state, const std::vector<std::size_t>& clients,
                                               const SelectionPolicy& policy, double horizon_s,
                                               std::size_t pass_budget, std::size_t report_every) {
  policy.validate();
  if (!(horizon_s > 0.0)) throw Error("run_async: horizon_s must be positive");
  if (clients.empty()) throw Error("run_async: at least one client required");
  if (report_every == 0) throw Error("run_async: report_every must be >= 1");
  std::set<std::size_t> seen;
  for (std::size_t c : clients) {
    if (c >= clients_.size()) throw Error("run_async: unknown client " + std::to_string(c));
    if (!seen.insert(c).second) throw Error("run_async: duplicate client " + std::to_string(c));
  }
  check_params(cfg_.spec, state.w_g);

  struct ClientState {
    std::shared_ptr<const Snapshot> next;  // model served by the latest fetch
    std::shared_ptr<Job> job;
    std::optional<PendingUpdate> uploading;
    bool lost = false;
  };
  std::map<std::size_t, ClientState> cs;

  // Newest model the server has committed to producing; published at server_free_at.
  auto latest = std::make_shared<const Snapshot>(Snapshot{state.round, state.w_g, state.w_g_prev});
  double server_free_at = sim_.now();
  AsyncBuffer buffer{{}, cfg_.aggregation.k_min, cfg_.aggregation.timeout_s};
  std::uint64_t buffer_gen = 0;
  std::map<std::uint64_t, std::pair<std::vector<PendingUpdate>, std::shared_ptr<const Snapshot>>> flushes;
  std::uint64_t flush_tag = 0;
  std::size_t started = 0, completed = 0;
  // Passes finishing after the budget is met are abandoned. The attempt cap
  // bounds runs in which nearly every pass is lost.
  const std::size_t attempt_cap =
      pass_budget > std::numeric_limits<std::size_t>::max() / 64 ? std::numeric_limits<std::size_t>::max()
                                                                 : pass_budget * 64;
  const auto closing = [&]() { return completed >= pass_budget; };
  const auto may_start = [&]() { return !closing() && started < attempt_cap; };

  std::vector<RoundReport> reports;
  RoundReport acc;
  double relevance_sum = 0.0, staleness_sum = 0.0;
  std::size_t staleness_n = 0;
  double last_report_t = sim_.now();
  const auto emit = [&]() {
    acc.round = reports.size() + 1;
    acc.t_s = sim_.now();
    acc.round_time_s = acc.t_s - last_report_t;
    acc.accepted_frac = acc.trained ? static_cast<double>(acc.accepted) / static_cast<double>(acc.trained) : 0.0;
    if (acc.trained) acc.mean_relevance = relevance_sum / static_cast<double>(acc.trained);
    acc.staleness_mean = staleness_n ? staleness_sum / static_cast<double>(staleness_n) : 0.0;
    acc.stalled = acc.aggregations == 0;
    if (cfg_.evaluator) acc.eval = cfg_.evaluator(state.w_g);
    reports.push_back(acc);
    last_report_t = acc.t_s;
    acc = RoundReport{};
    relevance_sum = staleness_sum = 0.0;
    staleness_n = 0;
  };

  const auto fetch = [&](std::size_t c) {
    if (!may_start()) return;
    const double serve = std::max(sim_.now(), server_free_at);
    cs[c].next = latest;
    sim_.schedule(serve + down_latency(c), EventKind::broadcast_arrive, static_cast<int>(c), latest->version);
  };

  const auto flush = [&]() {
    ++buffer_gen;
    const double start = std::max(sim_.now(), server_free_at);
    const double done = start + cfg_.aggregation.cost_per_update_s * static_cast<double>(buffer.pending.size());
    server_free_at = done;
    ParamVector w_new = combine(buffer.pending);
    latest = std::make_shared<const Snapshot>(Snapshot{latest->version + 1, std::move(w_new), latest->w});
    const std::uint64_t tag = flush_tag++;
    flushes.emplace(tag, std::make_pair(std::move(buffer.pending), latest));
    buffer.pending.clear();
    sim_.schedule(done, EventKind::aggregate, -1, latest->version, tag);
  };

  const auto handler = [&](const SimEvent& ev) {
    const auto c = static_cast<std::size_t>(ev.client_id);
    switch (ev.kind) {
      case EventKind::broadcast_arrive: {
        if (!may_start()) break;
        auto& st = cs[c];
        const auto snap = st.next;
        log(ev.t_s, ev.kind, ev.client_id, snap->version);
        const std::size_t pass = passes_[c]++;
        ++started;
        const auto fail_at = failure_offset(c, pass);
        const PassPlan p = plan(c, fail_at);
        st.lost = fail_at && (!cfg_.fault.checkpointing || p.lost);
        if (st.lost) {
          sim_.schedule(ev.t_s + p.failure->fail_at_s, EventKind::client_fail, ev.client_id, snap->version);
          break;
        }
        st.job = launch(c, snap, pass, fail_at, p);
        if (p.failure) {
          sim_.schedule(ev.t_s + p.failure->fail_at_s, EventKind::client_fail, ev.client_id, snap->version);
          sim_.schedule(ev.t_s + p.failure->fail_at_s + cfg_.fault.recovery_s, EventKind::client_recover,
                        ev.client_id, snap->version);
        }
        sim_.schedule(ev.t_s + p.duration_s, EventKind::train_done, ev.client_id, snap->version);
        break;
      }
      case EventKind::client_fail: {
        if (closing()) break;
        log(ev.t_s, ev.kind, ev.client_id, ev.round, false);
        ++acc.failed;
        auto& st = cs[c];
        if (st.lost) {
          st.lost = false;
          fetch(c);
        }
        break;
      }
      case EventKind::client_recover:
        if (closing()) break;
        log(ev.t_s, ev.kind, ev.client_id, ev.round);
        break;
      case EventKind::train_done: {
        auto& st = cs[c];
        auto job = std::move(st.job);
        TrainOutcome out = finish(*job, !closing());
        if (closing()) break;
        if (!out.update) {
          log(ev.t_s, EventKind::client_fail, ev.client_id, ev.round, false);
          ++acc.failed;
          fetch(c);
          break;
        }
        ++completed;
        ++acc.trained;
        acc.sgd_steps += out.update->sgd_steps;
        const FilterResult fr = filter(out.update->params, *job->snap, policy);
        const bool ok = fr.decision == Decision::accept;
        out.update->relevance = fr.score;
        relevance_sum += fr.score.ratio;
        log(ev.t_s, ev.kind, ev.client_id, ev.round, ok, fr.score.ratio);
        if (ok) {
          ++acc.accepted;
          st.uploading = PendingUpdate{std::move(*out.update), job->snap->version};
          sim_.schedule(ev.t_s + up_latency(c), EventKind::upload_arrive, ev.client_id, ev.round);
        } else {
          fetch(c);
        }
        if (completed % report_every == 0 && completed < pass_budget) emit();
        break;
      }
      case EventKind::upload_arrive: {
        log(ev.t_s, ev.kind, ev.client_id, ev.round);
        auto& st = cs[c];
        buffer.pending.push_back(std::move(*st.uploading));
        st.uploading.reset();
        if (buffer.pending.size() >= buffer.k_min) {
          flush();
        } else if (buffer.pending.size() == 1) {
          sim_.schedule(ev.t_s + buffer.timeout_s, EventKind::buffer_timeout, -1, 0, buffer_gen);
        }
        fetch(c);
        break;
      }
      case EventKind::buffer_timeout:
        if (ev.tag == buffer_gen && !buffer.pending.empty()) {
          log(ev.t_s, ev.kind, std::nullopt, latest->version);
          flush();
        }
        break;
      case EventKind::aggregate: {
        auto node = flushes.extract(ev.tag);
        auto& [applied, snap] = node.mapped();
        for (const auto& p : applied) {
          const std::uint64_t s = state.round - p.trained_on;
          staleness_sum += static_cast<double>(s);
          ++staleness_n;
          acc.staleness_max = std::max<std::uint64_t>(acc.staleness_max, s);
        }
        ++acc.aggregations;
        commit(state, applied, snap->w, lr_schedule(state.round, cfg_.training.lr, cfg_.training.lr_decay));
        break;
      }
      default:
        throw Error("run_async: unexpected event " + to_string(ev.kind));
    }
  };

  for (std::size_t c : clients) {
    cs[c];
    fetch(c);
  }
  sim_.run_until(horizon_s, handler);

  // Horizon cut: drop in-flight work once its tasks have finished.
  for (auto& [c, st] : cs) {
    if (st.job && st.job->result.valid()) st.job->result.wait();
  }
  sim_.clear();
  if (acc.trained || acc.failed || acc.aggregations || reports.empty()) emit();
  return reports;
}

}  // namespace fedsim
