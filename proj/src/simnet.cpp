#include "fedsim/simnet.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "fedsim/error.hpp"
#include "fedsim/hash.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

namespace {

constexpr std::pair<EventKind, const char*> kKindNames[] = {
    {EventKind::broadcast_arrive, "broadcast_arrive"},
    {EventKind::train_done, "train_done"},
    {EventKind::upload_arrive, "upload_arrive"},
    {EventKind::buffer_timeout, "buffer_timeout"},
    {EventKind::client_fail, "client_fail"},
    {EventKind::client_recover, "client_recover"},
    {EventKind::checkpoint, "checkpoint"},
    {EventKind::aggregate, "aggregate"},
    {EventKind::apply, "apply"},
};

}  // namespace

std::string to_string(EventKind kind) {
  for (auto [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

EventKind event_kind_from_string(const std::string& s) {
  for (auto [k, name] : kKindNames) {
    if (s == name) return k;
  }
  throw Error("unknown event kind '" + s + "'");
}

void SimClock::advance_to(double t_s) {
  if (t_s < now_s_) throw Error("clock: time cannot move backwards");
  now_s_ = t_s;
}

std::uint64_t Simulator::schedule(double t_s, EventKind kind, int client_id, std::uint64_t round,
                                  std::uint64_t tag) {
  if (!(t_s >= clock_.now())) {
    std::ostringstream msg;
    msg << "simulator: event " << to_string(kind) << " scheduled at " << t_s
        << " before now=" << clock_.now();
    throw Error(msg.str());
  }
  const std::uint64_t seq = next_seq_++;
  queue_.push(SimEvent{t_s, seq, kind, client_id, round, tag});
  return seq;
}

std::vector<SimEvent> Simulator::run_until(double horizon_s, const Handler& handler) {
  std::vector<SimEvent> processed;
  stopped_ = false;
  while (!queue_.empty() && !stopped_) {
    const SimEvent ev = queue_.top();
    if (ev.t_s > horizon_s) break;
    queue_.pop();
    clock_.advance_to(ev.t_s);
    processed.push_back(ev);
    if (handler) handler(ev);
  }
  if (!stopped_ && std::isfinite(horizon_s) && horizon_s > clock_.now()) clock_.advance_to(horizon_s);
  return processed;
}

// ---------------------------------------------------------------------------

std::string to_string(LatencyModel::Kind kind) {
  switch (kind) {
    case LatencyModel::Kind::constant: return "constant";
    case LatencyModel::Kind::lognormal: return "lognormal";
    case LatencyModel::Kind::empirical: return "empirical";
  }
  return "constant";
}

LatencyModel::Kind latency_kind_from_string(const std::string& s) {
  if (s == "constant") return LatencyModel::Kind::constant;
  if (s == "lognormal") return LatencyModel::Kind::lognormal;
  if (s == "empirical") return LatencyModel::Kind::empirical;
  throw Error("unknown latency kind '" + s + "'");
}

void LatencyModel::validate() const {
  switch (kind) {
    case Kind::constant:
      if (!(value_s >= 0.0) || !std::isfinite(value_s)) throw Error("latency: constant must be finite and >= 0");
      break;
    case Kind::lognormal:
      if (!std::isfinite(mu) || !(sigma >= 0.0) || !std::isfinite(sigma)) {
        throw Error("latency: lognormal needs finite mu and sigma >= 0");
      }
      break;
    case Kind::empirical:
      if (samples_s.empty()) throw Error("latency: empirical distribution needs samples");
      for (double s : samples_s) {
        if (!(s >= 0.0) || !std::isfinite(s)) throw Error("latency: empirical samples must be finite and >= 0");
      }
      break;
  }
}

double LatencyModel::sample(std::uint64_t seed) const {
  switch (kind) {
    case Kind::constant:
      return value_s;
    case Kind::lognormal: {
      Engine e = make_engine(seed);
      std::normal_distribution<double> z(0.0, 1.0);
      return std::exp(mu + sigma * z(e));
    }
    case Kind::empirical: {
      Engine e = make_engine(seed);
      auto i = static_cast<std::size_t>(uniform01(e) * static_cast<double>(samples_s.size()));
      return samples_s[std::min(i, samples_s.size() - 1)];
    }
  }
  return value_s;
}

double LatencyModel::mean() const {
  switch (kind) {
    case Kind::constant: return value_s;
    case Kind::lognormal: return std::exp(mu + 0.5 * sigma * sigma);
    case Kind::empirical:
      return std::accumulate(samples_s.begin(), samples_s.end(), 0.0) / static_cast<double>(samples_s.size());
  }
  return value_s;
}

// ---------------------------------------------------------------------------

std::string LogRecord::to_json() const {
  nlohmann::ordered_json j;
  j["t_s"] = t_s;
  j["kind"] = to_string(kind);
  if (client_id) j["client_id"] = *client_id;
  j["round"] = round;
  if (accepted) j["accepted"] = *accepted;
  if (relevance) j["relevance"] = *relevance;
  if (staleness) j["staleness"] = *staleness;
  return j.dump();
}

LogRecord LogRecord::from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  LogRecord r;
  r.t_s = j.at("t_s").get<double>();
  r.kind = event_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("client_id")) r.client_id = j["client_id"].get<int>();
  r.round = j.at("round").get<std::uint64_t>();
  if (j.contains("accepted")) r.accepted = j["accepted"].get<bool>();
  if (j.contains("relevance")) r.relevance = j["relevance"].get<double>();
  if (j.contains("staleness")) r.staleness = j["staleness"].get<std::uint64_t>();
  return r;
}

void EventLog::append(LogRecord r) {
  const std::string line = r.to_json();
  Fnv1a h;
  // Chain the running digest so the hash is order-sensitive across records.
  h.u64(digest_).str(line).str("\n");
  digest_ = h.value();
  records_.push_back(std::move(r));
}

void EventLog::write_jsonl(std::ostream& out) const {
  for (const auto& r : records_) out << r.to_json() << '\n';
}

EventLog EventLog::read_jsonl(std::istream& in) {
  EventLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    log.append(LogRecord::from_json(line));
  }
  return log;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// ---------------------------------------------------------------------------

CommTimeReport comm_time_report(const EventLog& log, bool sync, std::optional<double> window_s) {
  CommTimeReport rep;
  double last_agg = 0.0;
  for (const auto& r : log.records()) {
    if (r.client_id) rep.idle_s.emplace(*r.client_id, 0.0);
    if (r.kind != EventKind::aggregate) continue;
    rep.per_round_s.push_back(r.t_s - last_agg);
    last_agg = r.t_s;
    if (r.accepted.value_or(true)) ++rep.aggregations;
  }
  rep.total_comm_s = last_agg;

  if (sync) {
    // Barrier wait: per round, the latest client completion minus each
    // client's own completion (upload arrival, or train_done when the
    // update was filtered out).
    std::map<std::uint64_t, std::map<int, double>> done;
    for (const auto& r : log.records()) {
      if (!r.client_id) continue;
      if (r.kind == EventKind::upload_arrive || r.kind == EventKind::train_done) {
        auto& t = done[r.round][*r.client_id];
        t = std::max(t, r.t_s);
      }
    }
    for (const auto& [round, clients] : done) {
      double barrier = 0.0;
      for (const auto& [c, t] : clients) barrier = std::max(barrier, t);
      for (const auto& [c, t] : clients) rep.idle_s[c] += barrier - t;
    }
  }

  if (!rep.per_round_s.empty() && rep.total_comm_s > 0.0) {
    const double window = window_s.value_or(rep.total_comm_s / static_cast<double>(rep.per_round_s.size()));
    rep.updates_per_round = static_cast<double>(rep.aggregations) * window / rep.total_comm_s;
  }
  return rep;
}

}  // namespace fedsim
