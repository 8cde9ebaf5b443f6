#include "fedsim/experiment.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "fedsim/client.hpp"
#include "fedsim/error.hpp"
#include "fedsim/format.hpp"
#include "fedsim/hash.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using json = nlohmann::json;

std::string to_string(RunMode mode) {
  switch (mode) {
    case RunMode::sync_baseline: return "sync_baseline";
    case RunMode::sync_filtered: return "sync_filtered";
    case RunMode::async_filtered: return "async_filtered";
  }
  return "sync_filtered";
}

RunMode run_mode_from_string(const std::string& s) {
  if (s == "sync_baseline") return RunMode::sync_baseline;
  if (s == "sync_filtered") return RunMode::sync_filtered;
  if (s == "async_filtered") return RunMode::async_filtered;
  throw Error("unknown mode '" + s + "' (expected sync_baseline, sync_filtered or async_filtered)");
}

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::clients: return "clients";
    case SweepAxis::batch: return "batch";
    case SweepAxis::theta: return "theta";
    case SweepAxis::dropout: return "dropout";
  }
  return "theta";
}

SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "clients") return SweepAxis::clients;
  if (s == "batch") return SweepAxis::batch;
  if (s == "theta") return SweepAxis::theta;
  if (s == "dropout") return SweepAxis::dropout;
  throw Error("unknown sweep axis '" + s + "' (expected clients, batch, theta or dropout)");
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

// Reads one JSON object, tracking consumed keys so leftovers can be rejected.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    used_.insert(key);
    return &*it;
  }

  void uint(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) out = as_uint(*v, field(key));
  }
  void u64(const std::string& key, std::uint64_t& out) {
    if (const json* v = find(key)) out = as_uint(*v, field(key));
  }
  void num(const std::string& key, double& out) {
    if (const json* v = find(key)) out = as_num(*v, field(key));
  }
  void boolean(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key), "expected true or false");
      out = v->get<bool>();
    }
  }
  void str(const std::string& key, std::string& out) {
    if (const json* v = find(key)) out = as_str(*v, field(key));
  }
  void opt_uint(const std::string& key, std::optional<std::size_t>& out) {
    if (const json* v = find(key)) out = v->is_null() ? std::nullopt : std::optional<std::size_t>(as_uint(*v, field(key)));
  }
  void opt_u64(const std::string& key, std::optional<std::uint64_t>& out) {
    if (const json* v = find(key)) out = v->is_null() ? std::nullopt : std::optional<std::uint64_t>(as_uint(*v, field(key)));
  }
  void opt_num(const std::string& key, std::optional<double>& out) {
    if (const json* v = find(key)) out = v->is_null() ? std::nullopt : std::optional<double>(as_num(*v, field(key)));
  }
  void str_list(const std::string& key, std::vector<std::string>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(field(key), "expected a list of strings");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) out.push_back(as_str((*v)[i], field(key) + "[" + std::to_string(i) + "]"));
    }
  }
  void uint_list(const std::string& key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(field(key), "expected a list of integers");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) out.push_back(as_uint((*v)[i], field(key) + "[" + std::to_string(i) + "]"));
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
    }
  }

  static std::uint64_t as_uint(const json& v, const std::string& f) {
    if (!v.is_number_unsigned()) {
      if (v.is_number_integer()) throw ConfigError(f, "must be >= 0");
      throw ConfigError(f, "expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }
  static double as_num(const json& v, const std::string& f) {
    if (!v.is_number()) throw ConfigError(f, "expected a number");
    return v.get<double>();
  }
  static std::string as_str(const json& v, const std::string& f) {
    if (!v.is_string()) throw ConfigError(f, "expected a string");
    return v.get<std::string>();
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

Distribution parse_distribution(const json& j, const std::string& path) {
  Fields f(j, path);
  Distribution d;
  std::string kind = "constant";
  f.str("kind", kind);
  try {
    d.kind = latency_kind_from_string(kind);
  } catch (const Error& e) {
    throw ConfigError(f.field("kind"), e.what());
  }
  f.num("value_s", d.value_s);
  f.num("mu", d.mu);
  f.num("sigma", d.sigma);
  if (const json* v = f.find("samples")) {
    if (!v->is_array()) throw ConfigError(f.field("samples"), "expected a list of numbers");
    for (std::size_t i = 0; i < v->size(); ++i) {
      d.samples_s.push_back(Fields::as_num((*v)[i], f.field("samples") + "[" + std::to_string(i) + "]"));
    }
  }
  f.finish();
  return d;
}

ojson distribution_json(const Distribution& d) {
  ojson j;
  j["kind"] = to_string(d.kind);
  switch (d.kind) {
    case Distribution::Kind::constant: j["value_s"] = d.value_s; break;
    case Distribution::Kind::lognormal:
      j["mu"] = d.mu;
      j["sigma"] = d.sigma;
      break;
    case Distribution::Kind::empirical: j["samples"] = d.samples_s; break;
  }
  return j;
}

void check(bool ok, const std::string& field, const std::string& msg) {
  if (!ok) throw ConfigError(field, msg);
}

void check_distribution(const Distribution& d, const std::string& field, bool positive) {
  try {
    d.validate();
  } catch (const Error& e) {
    throw ConfigError(field, e.what());
  }
  if (positive) {
    const bool ok = d.kind == Distribution::Kind::lognormal ||
                    (d.kind == Distribution::Kind::constant && d.value_s > 0.0) ||
                    (d.kind == Distribution::Kind::empirical &&
                     std::all_of(d.samples_s.begin(), d.samples_s.end(), [](double s) { return s > 0.0; }));
    check(ok, field, "values must be positive");
  }
}

bool finite_in(double v, double lo, double hi) { return std::isfinite(v) && v >= lo && v <= hi; }

}  // namespace

void ExperimentConfig::validate() const {
  check(dataset.source == "synthetic" || dataset.source == "csv", "dataset.source", "expected synthetic or csv");
  if (dataset.source == "csv") {
    check(!dataset.csv.path.empty(), "dataset.csv.path", "required when source is csv");
    check(!dataset.csv.options.label_column.empty(), "dataset.csv.label_column", "must not be empty");
  } else {
    const auto& s = dataset.synthetic;
    check(s.d >= 1, "dataset.synthetic.d", "must be >= 1");
    check(s.anomaly_fraction > 0.0 && s.anomaly_fraction < 1.0, "dataset.synthetic.anomaly_fraction",
          "must lie in (0, 1)");
    check(finite_in(s.separation, 0.0, 1e6), "dataset.synthetic.separation", "must be finite and >= 0");
    const std::size_t n = s.n_per_client ? *s.n_per_client * clients.count : s.n;
    check(n >= 4, s.n_per_client ? "dataset.synthetic.n_per_client" : "dataset.synthetic.n", "too few rows");
  }
  check(dataset.test_fraction > 0.0 && dataset.test_fraction < 1.0, "dataset.test_fraction", "must lie in (0, 1)");
  check(partition.kind == "iid" || partition.kind == "dirichlet", "partition.kind", "expected iid or dirichlet");
  check(partition.alpha > 0.0 && std::isfinite(partition.alpha), "partition.alpha", "must be positive");
  for (std::size_t i = 0; i < model.hidden_dims.size(); ++i) {
    check(model.hidden_dims[i] >= 1, "model.hidden_dims[" + std::to_string(i) + "]", "must be >= 1");
  }
  check(model.dropout >= 0.0 && model.dropout < 1.0, "model.dropout", "must lie in [0, 1)");
  check(clients.count >= 1, "clients.count", "must be >= 1");
  check_distribution(clients.speed, "clients.speed", true);
  check_distribution(clients.up_latency, "clients.up_latency", false);
  check_distribution(clients.down_latency, "clients.down_latency", false);
  check_distribution(clients.jitter, "clients.jitter", false);
  check(epochs >= 1, "epochs", "must be >= 1");
  check(batch.policy == "fixed" || batch.policy == "dynamic", "batch.policy", "expected fixed or dynamic");
  check(batch.size >= 1, "batch.size", "must be >= 1");
  if (batch.policy == "dynamic") {
    check(std::has_single_bit(batch.b_min), "batch.b_min", "must be a power of two");
    check(std::has_single_bit(batch.b_ref), "batch.b_ref", "must be a power of two");
    check(std::has_single_bit(batch.b_max), "batch.b_max", "must be a power of two");
    check(batch.b_min <= batch.b_ref && batch.b_ref <= batch.b_max, "batch.b_ref", "need b_min <= b_ref <= b_max");
  }
  check(batch.b_ref >= 1, "batch.b_ref", "must be >= 1");
  check(finite_in(batch.speedup_exponent, -4.0, 4.0), "batch.speedup_exponent", "must lie in [-4, 4]");
  check(finite_in(selection.theta, 0.0, 1.0), "selection.theta", "must lie in [0, 1]");
  check(finite_in(fault.dropout_rate, 0.0, 1.0), "fault.dropout_rate", "must lie in [0, 1]");
  if (fault.weibull) {
    check(fault.weibull->lambda_s > 0.0 && std::isfinite(fault.weibull->lambda_s), "fault.weibull.lambda_s",
          "must be positive");
    check(fault.weibull->k > 0.0 && std::isfinite(fault.weibull->k), "fault.weibull.k", "must be positive");
  }
  check(finite_in(fault.recovery_s, 0.0, 1e12), "fault.recovery_s", "must be finite and >= 0");
  check(fault.grid_fraction > 0.0 && fault.grid_fraction <= 1.0, "fault.grid_fraction", "must lie in (0, 1]");
  if (fault.interval_s) check(*fault.interval_s > 0.0 && std::isfinite(*fault.interval_s), "fault.interval_s", "must be positive");
  aggregation.validate();
  check(lr > 0.0 && std::isfinite(lr), "lr", "must be positive");
  check(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay", "must lie in (0, 1]");
  if (horizon_s) check(*horizon_s > 0.0, "horizon_s", "must be positive");
  check(!output_dir.empty(), "output_dir", "must not be empty");
}

std::string ExperimentConfig::to_json() const {
  ojson j;
  ojson ds;
  ds["source"] = dataset.source;
  ojson syn;
  syn["n"] = dataset.synthetic.n;
  syn["n_per_client"] = dataset.synthetic.n_per_client ? ojson(*dataset.synthetic.n_per_client) : ojson();
  syn["d"] = dataset.synthetic.d;
  syn["anomaly_fraction"] = dataset.synthetic.anomaly_fraction;
  syn["separation"] = dataset.synthetic.separation;
  ds["synthetic"] = syn;
  ojson csv;
  csv["path"] = dataset.csv.path;
  csv["label_column"] = dataset.csv.options.label_column;
  csv["categorical_columns"] = dataset.csv.options.categorical_columns;
  csv["drop_columns"] = dataset.csv.options.drop_columns;
  ojson lm = ojson::object();
  for (const auto& [k, v] : dataset.csv.options.label_map) lm[k] = v;
  csv["label_map"] = lm;
  ds["csv"] = csv;
  ds["test_fraction"] = dataset.test_fraction;
  ds["seed"] = dataset.seed ? ojson(*dataset.seed) : ojson();
  j["dataset"] = ds;

  j["partition"] = ojson{{"kind", partition.kind}, {"alpha", partition.alpha}};
  j["model"] = ojson{{"hidden_dims", model.hidden_dims}, {"dropout", model.dropout}};
  ojson cl;
  cl["count"] = clients.count;
  cl["speed"] = distribution_json(clients.speed);
  cl["up_latency"] = distribution_json(clients.up_latency);
  cl["down_latency"] = distribution_json(clients.down_latency);
  cl["jitter"] = distribution_json(clients.jitter);
  j["clients"] = cl;
  j["rounds"] = rounds;
  j["epochs"] = epochs;
  ojson b;
  b["policy"] = batch.policy;
  b["size"] = batch.size;
  b["b_ref"] = batch.b_ref;
  b["b_min"] = batch.b_min;
  b["b_max"] = batch.b_max;
  b["speedup_exponent"] = batch.speedup_exponent;
  j["batch"] = b;
  j["mode"] = to_string(mode);
  j["selection"] = ojson{{"theta", selection.theta}, {"mode", to_string(selection.mode)}};
  ojson f;
  f["dropout_rate"] = fault.dropout_rate;
  f["weibull"] = fault.weibull ? ojson{{"lambda_s", fault.weibull->lambda_s}, {"k", fault.weibull->k}} : ojson();
  f["checkpointing"] = fault.checkpointing;
  f["recovery_s"] = fault.recovery_s;
  f["grid_fraction"] = fault.grid_fraction;
  f["interval_s"] = fault.interval_s ? ojson(*fault.interval_s) : ojson();
  j["fault"] = f;
  ojson a;
  a["k_min"] = aggregation.k_min;
  a["timeout_s"] = aggregation.timeout_s;
  a["cost_per_update_s"] = aggregation.cost_per_update_s;
  a["weighted"] = aggregation.weighted;
  j["aggregation"] = a;
  j["lr"] = lr;
  j["lr_decay"] = lr_decay;
  j["seed"] = seed;
  j["workers"] = workers;
  j["horizon_s"] = horizon_s ? ojson(*horizon_s) : ojson();
  j["output_dir"] = output_dir;
  return j.dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Fields top(root, "");

  if (const json* v = top.find("dataset")) {
    Fields f(*v, "dataset");
    f.str("source", c.dataset.source);
    if (const json* s = f.find("synthetic")) {
      Fields g(*s, "dataset.synthetic");
      g.uint("n", c.dataset.synthetic.n);
      g.opt_uint("n_per_client", c.dataset.synthetic.n_per_client);
      g.uint("d", c.dataset.synthetic.d);
      g.num("anomaly_fraction", c.dataset.synthetic.anomaly_fraction);
      g.num("separation", c.dataset.synthetic.separation);
      g.finish();
    }
    if (const json* s = f.find("csv")) {
      Fields g(*s, "dataset.csv");
      g.str("path", c.dataset.csv.path);
      g.str("label_column", c.dataset.csv.options.label_column);
      g.str_list("categorical_columns", c.dataset.csv.options.categorical_columns);
      g.str_list("drop_columns", c.dataset.csv.options.drop_columns);
      if (const json* m = g.find("label_map")) {
        if (!m->is_object()) throw ConfigError("dataset.csv.label_map", "expected an object of label -> 0/1");
        c.dataset.csv.options.label_map.clear();
        for (auto it = m->begin(); it != m->end(); ++it) {
          const std::string fld = "dataset.csv.label_map." + it.key();
          const auto v2 = Fields::as_uint(it.value(), fld);
          if (v2 > 1) throw ConfigError(fld, "must be 0 or 1");
          c.dataset.csv.options.label_map[it.key()] = static_cast<int>(v2);
        }
      }
      g.finish();
    }
    f.num("test_fraction", c.dataset.test_fraction);
    f.opt_u64("seed", c.dataset.seed);
    f.finish();
  }
  if (const json* v = top.find("partition")) {
    Fields f(*v, "partition");
    f.str("kind", c.partition.kind);
    f.num("alpha", c.partition.alpha);
    f.finish();
  }
  if (const json* v = top.find("model")) {
    Fields f(*v, "model");
    f.uint_list("hidden_dims", c.model.hidden_dims);
    f.num("dropout", c.model.dropout);
    f.finish();
  }
  if (const json* v = top.find("clients")) {
    Fields f(*v, "clients");
    f.uint("count", c.clients.count);
    if (const json* d = f.find("speed")) c.clients.speed = parse_distribution(*d, "clients.speed");
    if (const json* d = f.find("up_latency")) c.clients.up_latency = parse_distribution(*d, "clients.up_latency");
    if (const json* d = f.find("down_latency")) c.clients.down_latency = parse_distribution(*d, "clients.down_latency");
    if (const json* d = f.find("jitter")) c.clients.jitter = parse_distribution(*d, "clients.jitter");
    f.finish();
  }
  top.uint("rounds", c.rounds);
  top.uint("epochs", c.epochs);
  if (const json* v = top.find("batch")) {
    Fields f(*v, "batch");
    f.str("policy", c.batch.policy);
    f.uint("size", c.batch.size);
    f.uint("b_ref", c.batch.b_ref);
    f.uint("b_min", c.batch.b_min);
    f.uint("b_max", c.batch.b_max);
    f.num("speedup_exponent", c.batch.speedup_exponent);
    f.finish();
  }
  if (const json* v = top.find("mode")) {
    try {
      c.mode = run_mode_from_string(Fields::as_str(*v, "mode"));
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError("mode", e.what());
    }
  }
  if (const json* v = top.find("selection")) {
    Fields f(*v, "selection");
    f.num("theta", c.selection.theta);
    std::string mode = to_string(c.selection.mode);
    f.str("mode", mode);
    try {
      c.selection.mode = selection_mode_from_string(mode);
    } catch (const Error& e) {
      throw ConfigError("selection.mode", e.what());
    }
    f.finish();
  }
  if (const json* v = top.find("fault")) {
    Fields f(*v, "fault");
    f.num("dropout_rate", c.fault.dropout_rate);
    if (const json* w = f.find("weibull")) {
      if (w->is_null()) {
        c.fault.weibull.reset();
      } else {
        Fields g(*w, "fault.weibull");
        WeibullModel m;
        g.num("lambda_s", m.lambda_s);
        g.num("k", m.k);
        g.finish();
        c.fault.weibull = m;
      }
    }
    f.boolean("checkpointing", c.fault.checkpointing);
    f.num("recovery_s", c.fault.recovery_s);
    f.num("grid_fraction", c.fault.grid_fraction);
    f.opt_num("interval_s", c.fault.interval_s);
    f.finish();
  }
  if (const json* v = top.find("aggregation")) {
    Fields f(*v, "aggregation");
    f.uint("k_min", c.aggregation.k_min);
    f.num("timeout_s", c.aggregation.timeout_s);
    f.num("cost_per_update_s", c.aggregation.cost_per_update_s);
    f.boolean("weighted", c.aggregation.weighted);
    f.finish();
  }
  top.num("lr", c.lr);
  top.num("lr_decay", c.lr_decay);
  top.u64("seed", c.seed);
  top.uint("workers", c.workers);
  top.opt_num("horizon_s", c.horizon_s);
  top.str("output_dir", c.output_dir);
  top.finish();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("--config", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::string apply_overrides(const std::string& config_json, const std::vector<std::string>& assignments) {
  json root = config_json.empty() ? json::object() : json::parse(config_json);
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(a, "override must look like key.path=value");
    const std::string key = a.substr(0, eq);
    const std::string raw = a.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;
    }
    json* node = &root;
    std::size_t start = 0;
    for (;;) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) throw ConfigError(key, "empty path component");
      if (!node->is_object()) throw ConfigError(key, "parent is not an object");
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      if (node->is_null()) *node = json::object();
      start = dot + 1;
    }
  }
  return root.dump();
}

// ---------------------------------------------------------------------------
// Wiring

PreparedData prepare_data(const ExperimentConfig& cfg) {
  const std::uint64_t data_seed = cfg.dataset.seed.value_or(derive_seed(cfg.seed, Stream::data));
  Dataset full;
  if (cfg.dataset.source == "csv") {
    full = load_csv(cfg.dataset.csv.path, cfg.dataset.csv.options);
  } else {
    const auto& s = cfg.dataset.synthetic;
    const std::size_t n = s.n_per_client ? *s.n_per_client * cfg.clients.count : s.n;
    full = synth_anomaly(n, s.d, s.anomaly_fraction, s.separation, data_seed);
  }
  auto [train, test] = train_test_split(full, cfg.dataset.test_fraction, derive_seed(data_seed, Stream::split));
  PreparedData out{std::move(train), std::move(test), {}};
  const std::uint64_t part_seed = derive_seed(cfg.seed, Stream::partition);
  if (cfg.partition.kind == "dirichlet") {
    out.partition = partition_dirichlet(out.train, cfg.clients.count, cfg.partition.alpha, part_seed);
  } else {
    out.partition = partition_iid(out.train.rows(), cfg.clients.count, part_seed);
  }
  return out;
}

std::vector<ClientProfile> make_profiles(const ExperimentConfig& cfg) {
  const std::size_t n = cfg.clients.count;
  std::vector<ClientProfile> out(n);
  for (std::size_t c = 0; c < n; ++c) {
    auto& p = out[c];
    p.id = c;
    p.speed = cfg.clients.speed.sample(derive_seed(cfg.seed, Stream::profiles, {c, 0}));
    p.up_latency_s = cfg.clients.up_latency.sample(derive_seed(cfg.seed, Stream::profiles, {c, 1}));
    p.down_latency_s = cfg.clients.down_latency.sample(derive_seed(cfg.seed, Stream::profiles, {c, 2}));
  }
  std::vector<double> speeds;
  for (const auto& p : out) speeds.push_back(p.speed);
  std::sort(speeds.begin(), speeds.end());
  const double median = speeds.size() % 2 ? speeds[speeds.size() / 2]
                                           : 0.5 * (speeds[speeds.size() / 2 - 1] + speeds[speeds.size() / 2]);
  for (auto& p : out) p.capacity = p.speed / median;
  return out;
}

std::vector<std::size_t> batch_sizes(const ExperimentConfig& cfg, const std::vector<ClientProfile>& profiles) {
  std::vector<std::size_t> out;
  for (const auto& p : profiles) {
    out.push_back(cfg.batch.policy == "dynamic"
                      ? assign_batch_size(p, cfg.batch.b_ref, 1.0, cfg.batch.b_min, cfg.batch.b_max)
                      : cfg.batch.size);
  }
  return out;
}

ModelSpec model_spec(const ExperimentConfig& cfg, std::size_t input_dim) {
  ModelSpec spec;
  spec.input_dim = input_dim;
  spec.hidden_dims = cfg.model.hidden_dims;
  spec.dropout_rate = cfg.model.dropout;
  return spec;
}

std::uint64_t RunResult::params_digest() const {
  Fnv1a h;
  h.u64(final_round).u64(final_params.spec_digest).f64s(final_params.values);
  return h.value();
}

RunResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto wall0 = std::chrono::steady_clock::now();

  PreparedData data = prepare_data(cfg);
  auto profiles = make_profiles(cfg);
  const auto sizes = batch_sizes(cfg, profiles);
  const ModelSpec spec = model_spec(cfg, data.train.cols());

  std::vector<ClientSlot> slots;
  for (std::size_t c = 0; c < cfg.clients.count; ++c) {
    ClientSlot s;
    s.profile = profiles[c];
    s.profile.speed *= std::pow(static_cast<double>(sizes[c]) / static_cast<double>(cfg.batch.b_ref),
                                cfg.batch.speedup_exponent);
    s.shard = data.train.subset(data.partition.assignments[c]).to_batch();
    s.batch_size = sizes[c];
    slots.push_back(std::move(s));
  }

  const Batch test = data.test.to_batch();
  const bool baseline = cfg.mode == RunMode::sync_baseline;
  FederationConfig fc;
  fc.spec = spec;
  fc.training = TrainingSettings{cfg.epochs, cfg.lr, cfg.lr_decay};
  fc.aggregation = cfg.aggregation;
  fc.fault.dropout_rate = cfg.fault.dropout_rate;
  fc.fault.checkpointing = cfg.fault.checkpointing && !baseline;
  fc.fault.recovery_s = cfg.fault.recovery_s;
  fc.fault.grid_fraction = cfg.fault.grid_fraction;
  fc.fault.fixed_interval_s = cfg.fault.interval_s;
  fc.fault.weibull = cfg.fault.weibull;
  fc.jitter = cfg.clients.jitter;
  fc.seed = cfg.seed;
  fc.workers = cfg.workers;
  fc.evaluator = [&spec, &test](const ParamVector& w) {
    const auto scores = forward(spec, w, test, Mode::eval);
    return evaluate_scores(scores, test.labels);
  };

  Federation fed(fc, slots);
  GlobalState state = initial_state(spec, cfg.seed);
  SelectionPolicy policy = cfg.selection;
  if (baseline) policy.theta = 0.0;

  std::vector<std::size_t> ids(cfg.clients.count);
  for (std::size_t c = 0; c < ids.size(); ++c) ids[c] = c;

  RunResult res;
  if (cfg.rounds > 0) {
    if (cfg.mode == RunMode::async_filtered) {
      // A horizon makes the run time-budgeted; otherwise it is work-budgeted.
      const std::size_t budget = cfg.horizon_s ? std::numeric_limits<std::size_t>::max() : cfg.rounds * ids.size();
      res.reports = fed.run_async(state, ids, policy, cfg.horizon_s.value_or(std::numeric_limits<double>::infinity()),
                                  budget, ids.size());
    } else {
      for (std::size_t r = 0; r < cfg.rounds; ++r) res.reports.push_back(fed.run_sync_round(state, ids, policy));
    }
  }

  res.log = fed.log();
  res.final_params = state.w_g;
  res.final_round = state.round;
  res.staleness = fed.staleness();
  res.comm = comm_time_report(res.log, cfg.mode != RunMode::async_filtered);

  std::map<int, std::size_t> passes;
  for (const auto& r : res.log.records()) {
    if (r.kind == EventKind::train_done && r.client_id) ++passes[*r.client_id];
  }
  for (const auto& [c, k] : passes) {
    const auto& slot = fed.clients()[static_cast<std::size_t>(c)];
    res.passes_participating += k;
    res.expected_sgd_steps += k * pass_steps(cfg.epochs, slot.shard.rows(), slot.batch_size);
  }

  RunSummary& s = res.summary;
  s.mode = to_string(cfg.mode);
  s.seed = cfg.seed;
  s.rounds = cfg.rounds;
  const EvalResult final_eval = fc.evaluator(state.w_g);
  s.accuracy = final_eval.accuracy;
  s.auc = final_eval.auc;
  s.comm_time_s = res.comm.total_comm_s;
  s.updates = res.comm.aggregations;
  s.uploads = fed.uploads_applied();
  std::size_t trained = 0, accepted = 0;
  for (const auto& r : res.reports) {
    trained += r.trained;
    accepted += r.accepted;
  }
  s.accepted_frac = trained ? static_cast<double>(accepted) / static_cast<double>(trained) : 0.0;
  if (!res.staleness.empty()) {
    double sum = 0.0;
    for (const auto& e : res.staleness) {
      sum += static_cast<double>(e.staleness());
      s.staleness_max = std::max(s.staleness_max, e.staleness());
    }
    s.staleness_mean = sum / static_cast<double>(res.staleness.size());
  }
  s.sgd_steps = fed.sgd_steps();
  res.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  return res;
}

// ---------------------------------------------------------------------------
// Artifacts

RunDigests digests_of(const RunResult& r) {
  RunDigests d;
  d.events = r.log.digest();
  d.params = r.params_digest();
  Fnv1a h;
  for (const auto& rep : r.reports) h.str(rep.to_json()).str("\n");
  h.str(summary_row(r.summary));
  d.reports = h.value();
  return d;
}

std::string format_digests(const RunDigests& d) {
  return "events " + hex64(d.events) + "\nparams " + hex64(d.params) + "\nreports " + hex64(d.reports) + "\n";
}

RunDigests parse_digests(const std::string& text) {
  RunDigests d;
  std::istringstream in(text);
  std::string key, value;
  std::set<std::string> seen;
  while (in >> key >> value) {
    std::uint64_t v = 0;
    try {
      v = std::stoull(value, nullptr, 16);
    } catch (const std::exception&) {
      throw Error("digest file: bad value for '" + key + "'");
    }
    if (key == "events") d.events = v;
    else if (key == "params") d.params = v;
    else if (key == "reports") d.reports = v;
    else throw Error("digest file: unknown key '" + key + "'");
    seen.insert(key);
  }
  if (seen.size() != 3) throw Error("digest file: expected events, params and reports lines");
  return d;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  out.flush();
  if (!out) throw Error("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void write_run_artifacts(const ExperimentConfig& cfg, const RunResult& r, const fs::path& dir) {
  fs::create_directories(dir);
  write_text(dir / "config.json", cfg.to_json());
  {
    std::ostringstream ev;
    r.log.write_jsonl(ev);
    write_text(dir / "events.jsonl", ev.str());
  }
  write_reports(dir, r.reports, cfg.rounds > 0 ? std::optional<RunSummary>(r.summary) : std::nullopt);
  {
    std::ostringstream st;
    st << "client_id,trained_on,applied,staleness\n";
    for (const auto& e : r.staleness) st << e.client_id << ',' << e.trained_on << ',' << e.applied << ',' << e.staleness() << '\n';
    write_text(dir / "staleness.csv", st.str());
  }
  {
    DirectoryCheckpointStore store(dir / "checkpoints");
    Checkpoint ck{Checkpoint::kGlobalScope, r.final_round, r.final_params,
                  lr_schedule(r.final_round, cfg.lr, cfg.lr_decay), cfg.seed, {}};
    store.put(checkpoint_name(Checkpoint::kGlobalScope, r.final_round, 0), save_checkpoint(ck));
  }
  write_text(dir / "digest.txt", format_digests(digests_of(r)));
  ojson timing;
  timing["wall_s"] = r.wall_s;
  write_text(dir / "timing.json", timing.dump(2) + "\n");
}

RunResult run_to_dir(const ExperimentConfig& cfg, const fs::path& dir) {
  try {
    RunResult r = run_experiment(cfg);
    write_run_artifacts(cfg, r, dir);
    return r;
  } catch (const std::exception& e) {
    try {
      fs::create_directories(dir);
      write_text(dir / "config.json", cfg.to_json());
      ojson err;
      err["error"] = e.what();
      write_text(dir / "error.json", err.dump(2) + "\n");
    } catch (const std::exception&) {
      // the original failure is the one worth reporting
    }
    throw;
  }
}

ReplayOutcome replay_run(const fs::path& run_dir, std::size_t workers) {
  ReplayOutcome out;
  out.recorded = parse_digests(read_text(run_dir / "digest.txt"));
  ExperimentConfig cfg = ExperimentConfig::load(run_dir / "config.json");
  cfg.workers = workers;
  out.replayed = digests_of(run_experiment(cfg));
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps and comparisons

void SweepSpec::validate() const {
  if (values.empty()) throw ConfigError("sweep.values", "at least one value required");
  if (repeats < 1) throw ConfigError("sweep.repeats", "must be >= 1");
  for (double v : values) {
    const std::string f = "sweep.values";
    switch (axis) {
      case SweepAxis::clients:
      case SweepAxis::batch:
        check(v >= 1.0 && v == std::floor(v) && v < 1e9, f, "clients and batch values must be positive integers");
        break;
      case SweepAxis::theta:
      case SweepAxis::dropout:
        check(finite_in(v, 0.0, 1.0), f, "theta and dropout values must lie in [0, 1]");
        break;
    }
  }
}

std::uint64_t sweep_seed(std::uint64_t base_seed, std::size_t repeat) {
  return derive_seed(base_seed, Stream::sweep, {repeat});
}

namespace {

std::string value_label(double v) { return format_double(v); }

fs::path cell_dir(const fs::path& out, SweepAxis axis, double value, RunMode mode, std::size_t repeat) {
  return out / (to_string(axis) + "-" + value_label(value)) / to_string(mode) / ("rep-" + std::to_string(repeat));
}

}  // namespace

ExperimentConfig sweep_cell_config(const ExperimentConfig& base, SweepAxis axis, double value, RunMode mode,
                                   std::size_t repeat) {
  ExperimentConfig c = base;
  c.seed = sweep_seed(base.seed, repeat);
  c.mode = mode;
  switch (axis) {
    case SweepAxis::clients: c.clients.count = static_cast<std::size_t>(value); break;
    case SweepAxis::batch:
      c.batch.policy = "fixed";
      c.batch.size = static_cast<std::size_t>(value);
      break;
    case SweepAxis::theta: c.selection.theta = value; break;
    case SweepAxis::dropout: c.fault.dropout_rate = value; break;
  }
  return c;
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const SweepSpec& spec, const fs::path& out_dir) {
  spec.validate();
  std::vector<RunMode> modes = spec.modes.empty() ? std::vector<RunMode>{base.mode} : spec.modes;
  if (spec.match_horizon) {
    if (std::find(modes.begin(), modes.end(), RunMode::sync_baseline) == modes.end()) {
      throw ConfigError("sweep.match_horizon", "needs sync_baseline among the modes");
    }
    // Baseline cells run first so their elapsed time can bound the async cells.
    std::stable_partition(modes.begin(), modes.end(), [](RunMode m) { return m == RunMode::sync_baseline; });
  }
  std::vector<SweepRow> rows;
  for (double value : spec.values) {
    std::map<std::size_t, double> baseline_time;
    for (RunMode mode : modes) {
      for (std::size_t rep = 0; rep < spec.repeats; ++rep) {
        SweepRow row;
        row.value = value;
        row.mode = mode;
        row.repeat = rep;
        const fs::path dir = cell_dir(out_dir, spec.axis, value, mode, rep);
        ExperimentConfig cell = sweep_cell_config(base, spec.axis, value, mode, rep);
        cell.output_dir = dir.string();
        row.seed = cell.seed;
        try {
          if (spec.match_horizon && mode == RunMode::async_filtered) {
            const auto it = baseline_time.find(rep);
            if (it == baseline_time.end() || !(it->second > 0.0)) throw Error("no baseline time to match");
            cell.horizon_s = it->second;
          }
          const RunResult r = run_to_dir(cell, dir);
          row.summary = r.summary;
          row.aggregations = r.comm.aggregations;
          row.window_s = r.reports.empty() ? 0.0 : r.comm.total_comm_s / static_cast<double>(r.reports.size());
          if (mode == RunMode::sync_baseline) baseline_time[rep] = r.comm.total_comm_s;
        } catch (const std::exception& e) {
          row.error = e.what();
        }
        rows.push_back(std::move(row));
      }
    }
  }
  fs::create_directories(out_dir);
  write_sweep_csv(out_dir / "sweep.csv", spec.axis, rows);
  return rows;
}

void write_sweep_csv(const fs::path& path, SweepAxis axis, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "axis,value,mode,repeat,seed,status,accuracy,auc,comm_time_s,updates,uploads,accepted_frac,"
        "staleness_mean,staleness_max,sgd_steps,window_s,error\n";
  for (const auto& r : rows) {
    os << to_string(axis) << ',' << value_label(r.value) << ',' << to_string(r.mode) << ',' << r.repeat << ','
       << r.seed << ',' << (r.summary ? "ok" : "error") << ',';
    if (r.summary) {
      const auto& s = *r.summary;
      os << format_double(s.accuracy) << ',' << (s.auc ? format_double(*s.auc) : "") << ','
         << format_double(s.comm_time_s) << ',' << s.updates << ',' << s.uploads << ','
         << format_double(s.accepted_frac) << ',' << format_double(s.staleness_mean) << ',' << s.staleness_max
         << ',' << s.sgd_steps << ',' << format_double(r.window_s) << ',';
    } else {
      os << ",,,,,,,,,,";
    }
    os << csv_escape(r.error) << '\n';
  }
  write_text(path, os.str());
}

std::vector<double> collect_aucs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() == "summary.csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<double> out;
  for (const auto& f : files) {
    const CsvTable t = read_csv_table(f);
    const auto it = std::find(t.header.begin(), t.header.end(), "auc");
    if (it == t.header.end()) throw Error(f.string() + ": no auc column");
    const auto col = static_cast<std::size_t>(it - t.header.begin());
    for (const auto& row : t.rows) {
      if (col < row.size() && !row[col].empty()) out.push_back(std::stod(row[col]));
    }
  }
  return out;
}

CompareResult compare_runs(const fs::path& dir_a, const fs::path& dir_b, Alternative alternative,
                           std::size_t min_runs) {
  CompareResult r;
  r.a = collect_aucs(dir_a);
  r.b = collect_aucs(dir_b);
  if (r.a.size() < min_runs || r.b.size() < min_runs) {
    std::ostringstream msg;
    msg << "compare: need at least " << min_runs << " runs per side, found " << r.a.size() << " in " << dir_a.string()
        << " and " << r.b.size() << " in " << dir_b.string();
    throw Error(msg.str());
  }
  r.test = mann_whitney_u(r.a, r.b, alternative);
  r.significant = r.test.p_value < 0.05;
  return r;
}

}  // namespace fedsim
