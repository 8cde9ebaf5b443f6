#include "fedsim/model.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "fedsim/error.hpp"
#include "fedsim/hash.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

void ModelSpec::validate() const {
  if (input_dim == 0) throw Error("model: input_dim must be >= 1");
  if (hidden_dims.empty()) throw Error("model: hidden_dims must be non-empty");
  for (std::size_t h : hidden_dims) {
    if (h == 0) throw Error("model: hidden dims must be >= 1");
  }
  if (output_dim != 1) throw Error("model: only a single binary output is supported");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw Error("model: dropout_rate must lie in [0, 1)");
  }
}

std::vector<LayerShape> layer_shapes(const ModelSpec& spec) {
  std::vector<LayerShape> out;
  std::size_t fan_in = spec.input_dim;
  std::size_t offset = 0;
  auto push = [&](std::size_t fan_out) {
    LayerShape s{fan_in, fan_out, offset, offset + fan_in * fan_out};
    out.push_back(s);
    offset = s.bias_offset + fan_out;
    fan_in = fan_out;
  };
  for (std::size_t h : spec.hidden_dims) push(h);
  push(spec.output_dim);
  return out;
}

std::size_t ModelSpec::param_count() const {
  std::size_t total = 0;
  std::size_t fan_in = input_dim;
  for (std::size_t h : hidden_dims) {
    total += (fan_in + 1) * h;
    fan_in = h;
  }
  return total + (fan_in + 1) * output_dim;
}

std::uint64_t ModelSpec::digest() const {
  Fnv1a h;
  h.str("fedsim.mlp.v1").u64(input_dim).u64(hidden_dims.size());
  for (std::size_t d : hidden_dims) h.u64(d);
  h.u64(output_dim).f64(dropout_rate).u64(static_cast<std::uint64_t>(activation));
  return h.value();
}

bool ParamVector::all_finite() const {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Batch::validate() const {
  if (features.rows() < 1) throw Error("batch: must contain at least one row");
  if (labels.size() != rows()) throw Error("batch: label count does not match rows");
  if (!features.allFinite()) throw Error("batch: non-finite feature value");
}

void check_params(const ModelSpec& spec, const ParamVector& params) {
  if (params.size() != spec.param_count()) {
    std::ostringstream msg;
    msg << "params: length " << params.size() << " does not match model size "
        << spec.param_count();
    throw Error(msg.str());
  }
  if (params.spec_digest != 0 && params.spec_digest != spec.digest()) {
    throw Error("params: bound to a different model spec");
  }
}

ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamVector p;
  p.values.assign(spec.param_count(), 0.0);
  p.spec_digest = spec.digest();
  auto shapes = layer_shapes(spec);
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto& s = shapes[l];
    const double limit = std::sqrt(6.0 / static_cast<double>(s.fan_in + s.fan_out));
    Engine eng = make_engine(derive_seed(seed, Stream::init, {l}));
    for (std::size_t i = 0; i < s.fan_in * s.fan_out; ++i) {
      p.values[s.weight_offset + i] = (2.0 * uniform01(eng) - 1.0) * limit;
    }
  }
  return p;
}

namespace {

using ConstMatMap = Eigen::Map<const Matrix>;
using ConstRowMap = Eigen::Map<const Eigen::RowVectorXd>;
using MatMap = Eigen::Map<Matrix>;
using RowMap = Eigen::Map<Eigen::RowVectorXd>;

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

struct Trace {
  std::vector<Matrix> activations;  // output of each hidden layer, after dropout
  std::vector<Matrix> pre;          // pre-activation of each hidden layer
  std::vector<Matrix> masks;        // scaled keep masks; empty when no dropout
  Vector logits;
};

void fill_mask(Matrix& mask, double rate, std::uint64_t seed) {
  const double keep_scale = 1.0 / (1.0 - rate);
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(rate, 64));
  Engine eng = make_engine(seed);
  double* m = mask.data();
  for (Eigen::Index i = 0; i < mask.size(); ++i) m[i] = eng() >= threshold ? keep_scale : 0.0;
}

Trace run_forward(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                  Mode mode, std::uint64_t dropout_seed) {
  spec.validate();
  check_params(spec, params);
  batch.validate();
  if (static_cast<std::size_t>(batch.features.cols()) != spec.input_dim) {
    throw Error("batch: feature width does not match model input_dim");
  }
  const auto shapes = layer_shapes(spec);
  const bool drop = mode == Mode::train && spec.dropout_rate > 0.0;
  const std::size_t hidden = spec.hidden_dims.size();

  Trace t;
  t.activations.reserve(hidden);
  t.pre.reserve(hidden);
  for (std::size_t l = 0; l < hidden; ++l) {
    const auto& s = shapes[l];
    const Matrix& in = l == 0 ? batch.features : t.activations.back();
    ConstMatMap w(params.values.data() + s.weight_offset, s.fan_in, s.fan_out);
    ConstRowMap b(params.values.data() + s.bias_offset, s.fan_out);
    Matrix z = in * w;
    z.rowwise() += b;
    Matrix a = z.cwiseMax(0.0);
    if (drop) {
      Matrix mask(a.rows(), a.cols());
      fill_mask(mask, spec.dropout_rate, derive_seed(dropout_seed, Stream::dropout, {l}));
      a.array() *= mask.array();
      t.masks.push_back(std::move(mask));
    }
    t.pre.push_back(std::move(z));
    t.activations.push_back(std::move(a));
  }
  const auto& out = shapes.back();
  ConstMatMap w(params.values.data() + out.weight_offset, out.fan_in, out.fan_out);
  t.logits = (t.activations.back() * w).col(0);
  t.logits.array() += params.values[out.bias_offset];
  return t;
}

}  // namespace

std::vector<double> forward(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                            Mode mode, std::uint64_t dropout_seed) {
  Trace t = run_forward(spec, params, batch, mode, dropout_seed);
  std::vector<double> probs(static_cast<std::size_t>(t.logits.size()));
  for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = sigmoid(t.logits[static_cast<Eigen::Index>(i)]);
  return probs;
}

LossGrad loss_and_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                       std::uint64_t dropout_seed) {
  Trace t = run_forward(spec, params, batch, Mode::train, dropout_seed);
  const auto shapes = layer_shapes(spec);
  const auto n = static_cast<Eigen::Index>(batch.rows());
  const double inv_n = 1.0 / static_cast<double>(n);

  LossGrad out;
  double loss = 0.0;
  Matrix dz(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double z = t.logits[i];
    const double y = batch.labels[static_cast<std::size_t>(i)];
    loss += softplus(z) - y * z;
    dz(i, 0) = (sigmoid(z) - y) * inv_n;
  }
  loss *= inv_n;
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "loss_and_grad: non-finite loss (" << loss << ") on batch of " << n << " rows";
    throw Error(msg.str());
  }
  out.loss = loss;
  out.grad.values.assign(params.size(), 0.0);
  out.grad.spec_digest = params.spec_digest;
  double* g = out.grad.values.data();

  // Walk layers from the output back to the input.
  Matrix delta = std::move(dz);
  for (std::size_t l = shapes.size(); l-- > 0;) {
    const auto& s = shapes[l];
    const Matrix& in = l == 0 ? batch.features : t.activations[l - 1];
    MatMap gw(g + s.weight_offset, s.fan_in, s.fan_out);
    RowMap gb(g + s.bias_offset, s.fan_out);
    gw.noalias() = in.transpose() * delta;
    gb = delta.colwise().sum();
    if (l == 0) break;
    ConstMatMap w(params.values.data() + s.weight_offset, s.fan_in, s.fan_out);
    Matrix upstream = delta * w.transpose();
    const std::size_t h = l - 1;
    if (!t.masks.empty()) upstream.array() *= t.masks[h].array();
    upstream.array() *= (t.pre[h].array() > 0.0).cast<double>();
    delta = std::move(upstream);
  }
  return out;
}

void sgd_step_inplace(ParamVector& params, const ParamVector& grad, double lr) {
  if (params.size() != grad.size()) throw Error("sgd_step: length mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) params.values[i] -= lr * grad.values[i];
}

ParamVector sgd_step(const ParamVector& params, const ParamVector& grad, double lr) {
  ParamVector out = params;
  sgd_step_inplace(out, grad, lr);
  return out;
}

double lr_schedule(std::size_t round, double base_lr, double decay) {
  if (!(decay > 0.0 && decay <= 1.0)) throw Error("lr_schedule: decay must lie in (0, 1]");
  return base_lr * std::pow(decay, static_cast<double>(round));
}

}  // namespace fedsim
