#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace fedsim {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Activation { relu };

// Fully connected binary classifier: input -> hidden... -> 1 (sigmoid).
struct ModelSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims{256, 128, 64};
  std::size_t output_dim = 1;
  double dropout_rate = 0.3;
  Activation activation = Activation::relu;

  void validate() const;

  // M = sum over layers of (fan_in + 1) * fan_out.
  std::size_t param_count() const;

  // Stable identifier binding parameter vectors to this architecture.
  std::uint64_t digest() const;

  bool operator==(const ModelSpec&) const = default;
};

struct LayerShape {
  std::size_t fan_in;
  std::size_t fan_out;
  std::size_t weight_offset;  // row-major [fan_in x fan_out]
  std::size_t bias_offset;    // [fan_out]
};

std::vector<LayerShape> layer_shapes(const ModelSpec& spec);

// Flat parameter (or gradient) vector. Layers are laid out in order, each as
// its weight matrix followed by its bias vector.
struct ParamVector {
  std::vector<double> values;
  std::uint64_t spec_digest = 0;

  std::size_t size() const noexcept { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  std::span<const double> view() const noexcept { return values; }

  bool all_finite() const;
  bool operator==(const ParamVector&) const = default;
};

struct Batch {
  Matrix features;            // [b x input_dim]
  std::vector<double> labels;  // {0, 1}

  std::size_t rows() const noexcept { return static_cast<std::size_t>(features.rows()); }
  void validate() const;
};

enum class Mode { eval, train };

// Glorot-uniform weights, zero biases.
ParamVector init_params(const ModelSpec& spec, std::uint64_t seed);

// Sigmoid outputs. In train mode hidden activations are dropped with the
// spec's rate using a mask drawn from `dropout_seed` (inverted dropout).
std::vector<double> forward(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                            Mode mode = Mode::eval, std::uint64_t dropout_seed = 0);

struct LossGrad {
  double loss = 0.0;
  ParamVector grad;
};

// Mean binary cross-entropy and its exact gradient under the dropout mask
// drawn from `dropout_seed`. Throws fedsim::Error on a non-finite loss.
LossGrad loss_and_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                       std::uint64_t dropout_seed);

ParamVector sgd_step(const ParamVector& params, const ParamVector& grad, double lr);
void sgd_step_inplace(ParamVector& params, const ParamVector& grad, double lr);

// base_lr * decay^round
double lr_schedule(std::size_t round, double base_lr, double decay);

void check_params(const ModelSpec& spec, const ParamVector& params);

}  // namespace fedsim
