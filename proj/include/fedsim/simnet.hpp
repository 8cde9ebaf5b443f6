#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <queue>
#include <string>
#include <vector>

namespace fedsim {

enum class EventKind {
  broadcast_arrive,
  train_done,
  upload_arrive,
  buffer_timeout,
  client_fail,
  client_recover,
  checkpoint,
  aggregate,  // server finished folding a batch of updates into w_g
  apply,      // one client update folded into an aggregation
};

std::string to_string(EventKind kind);
EventKind event_kind_from_string(const std::string& s);

struct SimEvent {
  double t_s = 0.0;
  std::uint64_t seq = 0;
  EventKind kind = EventKind::broadcast_arrive;
  int client_id = -1;
  std::uint64_t round = 0;
  std::uint64_t tag = 0;  // handler-defined payload key
};

// Simulated seconds; moves forward only while events are processed.
class SimClock {
 public:
  double now() const noexcept { return now_s_; }
  void advance_to(double t_s);

 private:
  double now_s_ = 0.0;
};

class Simulator {
 public:
  using Handler = std::function<void(const SimEvent&)>;

  const SimClock& clock() const noexcept { return clock_; }
  double now() const noexcept { return clock_.now(); }

  // Throws fedsim::Error if t_s lies in the past.
  std::uint64_t schedule(double t_s, EventKind kind, int client_id = -1, std::uint64_t round = 0,
                         std::uint64_t tag = 0);

  // Pops events in (t_s, seq) order while t_s <= horizon_s. If the queue
  // drains (or the horizon is hit) the clock ends at horizon_s; after stop()
  // it stays at the last processed event.
  std::vector<SimEvent> run_until(double horizon_s, const Handler& handler);

  void stop() noexcept { stopped_ = true; }
  // Drops every pending event; the clock keeps its value.
  void clear() { queue_ = {}; }
  bool empty() const noexcept { return queue_.empty(); }
  std::size_t pending() const noexcept { return queue_.size(); }

 private:
  struct Later {
    bool operator()(const SimEvent& a, const SimEvent& b) const noexcept {
      return a.t_s != b.t_s ? a.t_s > b.t_s : a.seq > b.seq;
    }
  };

  SimClock clock_;
  std::priority_queue<SimEvent, std::vector<SimEvent>, Later> queue_;
  std::uint64_t next_seq_ = 0;
  bool stopped_ = false;
};

// Latency distribution for one direction.
struct LatencyModel {
  enum class Kind { constant, lognormal, empirical };

  Kind kind = Kind::constant;
  double value_s = 0.0;            // constant
  double mu = 0.0, sigma = 0.0;    // lognormal: exp(N(mu, sigma^2))
  std::vector<double> samples_s;   // empirical: uniform choice

  void validate() const;
  // Deterministic per seed; the caller derives the seed from (stream, draw index).
  double sample(std::uint64_t seed) const;
  double mean() const;
};

std::string to_string(LatencyModel::Kind kind);
LatencyModel::Kind latency_kind_from_string(const std::string& s);

// One JSONL record of the event log.
struct LogRecord {
  double t_s = 0.0;
  EventKind kind = EventKind::broadcast_arrive;
  std::optional<int> client_id;
  std::uint64_t round = 0;
  std::optional<bool> accepted;
  std::optional<double> relevance;
  std::optional<std::uint64_t> staleness;

  std::string to_json() const;
  static LogRecord from_json(const std::string& line);
  bool operator==(const LogRecord&) const = default;
};

class EventLog {
 public:
  void append(LogRecord r);
  const std::vector<LogRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }

  // Order-sensitive 64-bit hash over the serialized records.
  std::uint64_t digest() const noexcept { return digest_; }

  void write_jsonl(std::ostream& out) const;
  static EventLog read_jsonl(std::istream& in);

 private:
  std::vector<LogRecord> records_;
  std::uint64_t digest_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t v);

struct CommTimeReport {
  double total_comm_s = 0.0;
  std::vector<double> per_round_s;        // spans between consecutive aggregations (or stalled rounds)
  double updates_per_round = 0.0;         // aggregations per round-equivalent window
  std::map<int, double> idle_s;           // barrier wait per client
  std::size_t aggregations = 0;
};

// Derives timing figures from an event log. `window_s` is the length of a
// baseline round; when absent the log's own mean round span is used.
// Barrier idle time is attributed from "barrier" rounds, i.e. logs whose
// aggregation events close a synchronous round (sync=true).
CommTimeReport comm_time_report(const EventLog& log, bool sync,
                                std::optional<double> window_s = std::nullopt);

}  // namespace fedsim
