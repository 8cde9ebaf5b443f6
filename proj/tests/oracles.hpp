#pragma once

// Naive reference implementations used as test oracles. They share no code
// with the library beyond the parameter layout.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/model.hpp"

namespace oracle {

// Layer-by-layer loops over the flat parameter vector. Returns the sigmoid
// output per row; `min_abs_preact` receives the smallest |pre-activation|
// seen at a hidden unit (distance to the nearest ReLU kink).
inline std::vector<double> forward(const fedsim::ModelSpec& spec, const std::vector<double>& w,
                                   const fedsim::Matrix& x, double* min_abs_preact = nullptr) {
  std::vector<std::size_t> dims{spec.input_dim};
  dims.insert(dims.end(), spec.hidden_dims.begin(), spec.hidden_dims.end());
  dims.push_back(1);
  double kink = INFINITY;
  std::vector<double> out;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    std::vector<double> a(dims[0]);
    for (std::size_t i = 0; i < dims[0]; ++i) a[i] = x(r, static_cast<Eigen::Index>(i));
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const std::size_t fin = dims[l], fout = dims[l + 1];
      const std::size_t boff = off + fin * fout;
      std::vector<double> z(fout);
      for (std::size_t j = 0; j < fout; ++j) {
        double s = w[boff + j];
        for (std::size_t i = 0; i < fin; ++i) s += a[i] * w[off + i * fout + j];
        z[j] = s;
      }
      const bool last = l + 2 == dims.size();
      for (std::size_t j = 0; j < fout; ++j) {
        if (last) {
          z[j] = 1.0 / (1.0 + std::exp(-z[j]));
        } else {
          kink = std::min(kink, std::abs(z[j]));
          z[j] = std::max(0.0, z[j]);
        }
      }
      a = std::move(z);
      off = boff + fout;
    }
    out.push_back(a[0]);
  }
  if (min_abs_preact) *min_abs_preact = kink;
  return out;
}

// Fraction of positions whose three-way signs agree.
inline double sign_agreement(const std::vector<double>& a, const std::vector<double>& b) {
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const int sa = a[i] > 0 ? 1 : (a[i] < 0 ? -1 : 0);
    const int sb = b[i] > 0 ? 1 : (b[i] < 0 ? -1 : 0);
    same += sa == sb;
  }
  return static_cast<double>(same) / static_cast<double>(a.size());
}

inline std::size_t sign_agreement_count(const std::vector<double>& a, const std::vector<double>& b) {
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const int sa = a[i] > 0 ? 1 : (a[i] < 0 ? -1 : 0);
    const int sb = b[i] > 0 ? 1 : (b[i] < 0 ? -1 : 0);
    same += sa == sb;
  }
  return same;
}

// Column mean with Kahan summation.
inline std::vector<double> column_mean(const std::vector<std::vector<double>>& rows) {
  const std::size_t m = rows.front().size();
  std::vector<double> out(m);
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0, c = 0.0;
    for (const auto& r : rows) {
      const double y = r[j] - c;
      const double t = s + y;
      c = (t - s) - y;
      s = t;
    }
    out[j] = s / static_cast<double>(rows.size());
  }
  return out;
}

// U for `a`: #(a > b) + 0.5 #(a == b) over all pairs.
inline double u_pairs(const std::vector<double>& a, const std::vector<double>& b) {
  double u = 0.0;
  for (double x : a)
    for (double y : b) u += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  return u;
}

inline double auc_pairs(const std::vector<double>& scores, const std::vector<double>& labels) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] > 0.5 ? pos : neg).push_back(scores[i]);
  return u_pairs(pos, neg) / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

inline double weibull_cdf(double t, double lambda, double k) { return 1.0 - std::exp(-std::pow(t / lambda, k)); }

inline fedsim::ParamVector random_params(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  fedsim::ParamVector p;
  p.values.resize(n);
  for (auto& v : p.values) v = nd(rng);
  return p;
}

inline fedsim::Batch random_batch(std::mt19937_64& rng, std::size_t rows, std::size_t dim) {
  std::normal_distribution<double> nd(0.0, 1.0);
  fedsim::Batch b;
  b.features.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < b.features.size(); ++i) b.features.data()[i] = nd(rng);
  for (std::size_t i = 0; i < rows; ++i) b.labels.push_back(static_cast<double>(rng() % 2));
  return b;
}

// Largest |analytic - central difference| / max(|analytic|, |numeric|, floor)
// over every parameter. The dropout mask is fixed by `dropout_seed`.
inline double max_grad_rel_error(const fedsim::ModelSpec& spec, const fedsim::ParamVector& params,
                                 const fedsim::Batch& batch, std::uint64_t dropout_seed, double h = 1e-5,
                                 double floor = 1e-4) {
  const auto analytic = fedsim::loss_and_grad(spec, params, batch, dropout_seed).grad;
  double worst = 0.0;
  fedsim::ParamVector p = params;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p.values[i];
    p.values[i] = orig + h;
    const double up = fedsim::loss_and_grad(spec, p, batch, dropout_seed).loss;
    p.values[i] = orig - h;
    const double down = fedsim::loss_and_grad(spec, p, batch, dropout_seed).loss;
    p.values[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic.values[i]), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(analytic.values[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace oracle
