#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "fedsim/error.hpp"
#include "fedsim/experiment.hpp"
#include "fedsim/fault.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/model.hpp"
#include "fedsim/selection.hpp"
#include "fedsim/server.hpp"

namespace py = pybind11;
using namespace fedsim;

namespace {

py::array_t<double> to_array(const std::vector<double>& v) { return py::array_t<double>(v.size(), v.data()); }

ParamVector params_of(const std::vector<double>& v) { return ParamVector{v, 0}; }

ModelSpec make_spec(std::size_t input_dim, std::vector<std::size_t> hidden_dims, double dropout) {
  ModelSpec s;
  s.input_dim = input_dim;
  s.hidden_dims = std::move(hidden_dims);
  s.dropout_rate = dropout;
  s.validate();
  return s;
}

Batch make_batch(const Matrix& x, const std::vector<double>& y) {
  Batch b{x, y};
  b.validate();
  return b;
}

py::dict summary_dict(const RunSummary& s) {
  py::dict d;
  d["mode"] = s.mode;
  d["seed"] = s.seed;
  d["rounds"] = s.rounds;
  d["accuracy"] = s.accuracy;
  d["auc"] = s.auc ? py::cast(*s.auc) : py::none();
  d["comm_time_s"] = s.comm_time_s;
  d["updates"] = s.updates;
  d["uploads"] = s.uploads;
  d["accepted_frac"] = s.accepted_frac;
  d["staleness_mean"] = s.staleness_mean;
  d["staleness_max"] = s.staleness_max;
  d["sgd_steps"] = s.sgd_steps;
  return d;
}

py::dict digests_dict(const RunDigests& d) {
  py::dict out;
  out["events"] = hex64(d.events);
  out["params"] = hex64(d.params);
  out["reports"] = hex64(d.reports);
  return out;
}

py::dict u_dict(const UTestResult& r) {
  py::dict d;
  d["u_statistic"] = r.u_statistic;
  d["p_value"] = r.p_value;
  d["n1"] = r.n1;
  d["n2"] = r.n2;
  d["method"] = r.method == UMethod::exact ? "exact" : "normal_approx";
  d["alternative"] = to_string(r.alternative);
  return d;
}

std::optional<UMethod> method_of(const std::optional<std::string>& s) {
  if (!s) return std::nullopt;
  if (*s == "exact") return UMethod::exact;
  if (*s == "normal_approx") return UMethod::normal_approx;
  throw Error("unknown method: " + *s);
}

}  // namespace

PYBIND11_MODULE(_fedsim, m) {
  m.doc() = "Discrete-event federated anomaly detection simulator";

  // Translators run newest first, so subclasses register after the base.
  const auto& base_error = py::register_exception<Error>(m, "FedsimError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", base_error);
  py::register_exception<CheckpointError>(m, "CheckpointError", base_error);

  m.def(
      "calculate_relevance",
      [](const std::vector<double>& client, const std::vector<double>& global,
         const std::optional<std::vector<double>>& global_prev, const std::string& mode) {
        const ParamVector prev = global_prev ? params_of(*global_prev) : ParamVector{};
        const RelevanceScore s = calculate_relevance(params_of(client), params_of(global),
                                                     global_prev ? &prev : nullptr, selection_mode_from_string(mode));
        return py::make_tuple(s.aligned, s.total, s.ratio);
      },
      py::arg("client"), py::arg("global_params"), py::arg("global_prev") = py::none(),
      py::arg("mode") = "weight_sign", "Returns (aligned, total, ratio).");

  m.def(
      "accept_update",
      [](const std::vector<double>& client, const std::vector<double>& global, double theta,
         const std::optional<std::vector<double>>& global_prev, const std::string& mode) {
        const ParamVector prev = global_prev ? params_of(*global_prev) : ParamVector{};
        const SelectionPolicy policy{theta, selection_mode_from_string(mode)};
        policy.validate();
        return filter_update(params_of(client), params_of(global), global_prev ? &prev : nullptr, policy).decision ==
               Decision::accept;
      },
      py::arg("client"), py::arg("global_params"), py::arg("theta"), py::arg("global_prev") = py::none(),
      py::arg("mode") = "weight_sign");

  m.def(
      "aggregate",
      [](const std::vector<std::vector<double>>& updates) -> std::optional<py::array_t<double>> {
        std::vector<ParamVector> ps;
        for (const auto& u : updates) ps.push_back(params_of(u));
        const auto mean = aggregate(ps);
        if (!mean) return std::nullopt;
        return to_array(mean->values);
      },
      py::arg("updates"), "Elementwise mean; None for an empty list.");

  m.def("accuracy", [](const std::vector<double>& s, const std::vector<double>& y, double t) { return accuracy(s, y, t); },
        py::arg("scores"), py::arg("labels"), py::arg("threshold") = 0.5);
  m.def("auc_roc", [](const std::vector<double>& s, const std::vector<double>& y) { return auc_roc(s, y); },
        py::arg("scores"), py::arg("labels"));
  m.def(
      "mann_whitney_u",
      [](const std::vector<double>& a, const std::vector<double>& b, const std::string& alternative,
         const std::optional<std::string>& method) {
        return u_dict(mann_whitney_u(a, b, alternative_from_string(alternative), method_of(method)));
      },
      py::arg("a"), py::arg("b"), py::arg("alternative") = "two_sided", py::arg("method") = py::none());

  m.def("weibull_cdf", [](double t, double lam, double k) { return weibull_cdf(t, {lam, k}); }, py::arg("t_s"),
        py::arg("lambda_s"), py::arg("k"));
  m.def(
      "optimal_interval",
      [](double total_s, double recovery_s, double lam, double k, double grid_s) {
        return optimal_interval(CheckpointPolicy{grid_s, total_s, recovery_s}, {lam, k}, grid_s);
      },
      py::arg("total_s"), py::arg("recovery_s"), py::arg("lambda_s"), py::arg("k"), py::arg("grid_s"));

  m.def(
      "save_checkpoint",
      [](const std::vector<double>& params, std::int64_t scope, std::uint64_t round, double lr, std::uint64_t seed) {
        Checkpoint c;
        c.scope = scope;
        c.round = round;
        c.params = params_of(params);
        c.lr = lr;
        c.rng_seed = seed;
        const auto blob = save_checkpoint(c);
        return py::bytes(reinterpret_cast<const char*>(blob.data()), blob.size());
      },
      py::arg("params"), py::arg("scope") = Checkpoint::kGlobalScope, py::arg("round") = 0, py::arg("lr") = 0.0,
      py::arg("seed") = 0);
  m.def(
      "restore_checkpoint",
      [](const py::bytes& data) {
        const std::string_view raw = data;
        std::vector<std::byte> blob(raw.size());
        std::memcpy(blob.data(), raw.data(), raw.size());
        const Checkpoint c = restore_checkpoint(blob);
        py::dict d;
        d["scope"] = c.scope;
        d["round"] = c.round;
        d["params"] = to_array(c.params.values);
        d["lr"] = c.lr;
        d["seed"] = c.rng_seed;
        return d;
      },
      py::arg("blob"));

  m.def(
      "init_params",
      [](std::size_t input_dim, std::vector<std::size_t> hidden, double dropout, std::uint64_t seed) {
        return to_array(init_params(make_spec(input_dim, std::move(hidden), dropout), seed).values);
      },
      py::arg("input_dim"), py::arg("hidden_dims"), py::arg("dropout") = 0.0, py::arg("seed") = 0);
  m.def(
      "predict",
      [](const std::vector<double>& params, const Matrix& x, std::vector<std::size_t> hidden) {
        const ModelSpec spec = make_spec(static_cast<std::size_t>(x.cols()), std::move(hidden), 0.0);
        ParamVector p = params_of(params);
        p.spec_digest = spec.digest();
        return to_array(forward(spec, p, make_batch(x, std::vector<double>(static_cast<std::size_t>(x.rows()), 0.0))));
      },
      py::arg("params"), py::arg("features"), py::arg("hidden_dims"));
  m.def(
      "loss_and_grad",
      [](const std::vector<double>& params, const Matrix& x, const std::vector<double>& y,
         std::vector<std::size_t> hidden, double dropout, std::uint64_t dropout_seed) {
        const ModelSpec spec = make_spec(static_cast<std::size_t>(x.cols()), std::move(hidden), dropout);
        ParamVector p = params_of(params);
        p.spec_digest = spec.digest();
        const LossGrad lg = loss_and_grad(spec, p, make_batch(x, y), dropout_seed);
        return py::make_tuple(lg.loss, to_array(lg.grad.values));
      },
      py::arg("params"), py::arg("features"), py::arg("labels"), py::arg("hidden_dims"), py::arg("dropout") = 0.0,
      py::arg("dropout_seed") = 0);

  m.def("default_config", []() { return ExperimentConfig{}.to_json(); }, "Canonical JSON of the default config.");
  m.def(
      "normalize_config",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        const ExperimentConfig cfg = ExperimentConfig::from_json(apply_overrides(text, overrides));
        cfg.validate();
        return cfg.to_json();
      },
      py::arg("config_json"), py::arg("overrides") = std::vector<std::string>{});
  m.def(
      "run_experiment",
      [](const std::string& text, std::optional<std::size_t> workers) {
        ExperimentConfig cfg = ExperimentConfig::from_json(text);
        if (workers) cfg.workers = *workers;
        RunResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(cfg);
        }
        py::dict d;
        d["summary"] = summary_dict(r.summary);
        d["digests"] = digests_dict(digests_of(r));
        d["final_params"] = to_array(r.final_params.values);
        d["final_round"] = r.final_round;
        d["events"] = r.log.size();
        d["wall_s"] = r.wall_s;
        return d;
      },
      py::arg("config_json"), py::arg("workers") = py::none());
  m.def(
      "run_to_dir",
      [](const std::string& text, const std::filesystem::path& dir) {
        const ExperimentConfig cfg = ExperimentConfig::from_json(text);
        RunResult r;
        {
          py::gil_scoped_release release;
          r = run_to_dir(cfg, dir);
        }
        return summary_dict(r.summary);
      },
      py::arg("config_json"), py::arg("out_dir"));
  m.def(
      "replay",
      [](const std::filesystem::path& dir, std::size_t workers) {
        ReplayOutcome o;
        {
          py::gil_scoped_release release;
          o = replay_run(dir, workers);
        }
        py::dict d;
        d["match"] = o.match();
        d["recorded"] = digests_dict(o.recorded);
        d["replayed"] = digests_dict(o.replayed);
        return d;
      },
      py::arg("run_dir"), py::arg("workers") = 0);
  m.def(
      "compare",
      [](const std::filesystem::path& a, const std::filesystem::path& b, const std::string& alternative,
         std::size_t min_runs) {
        const CompareResult c = compare_runs(a, b, alternative_from_string(alternative), min_runs);
        py::dict d = u_dict(c.test);
        d["significant"] = c.significant;
        d["a"] = c.a;
        d["b"] = c.b;
        return d;
      },
      py::arg("dir_a"), py::arg("dir_b"), py::arg("alternative") = "two_sided", py::arg("min_runs") = 20);
}
