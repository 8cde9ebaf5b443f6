#include <doctest.h>

#include <cmath>
#include <random>

#include "fedsim/error.hpp"
#include "fedsim/model.hpp"
#include "oracles.hpp"

using namespace fedsim;

namespace {

ModelSpec tiny_spec(std::size_t in, std::vector<std::size_t> hidden, double dropout = 0.0) {
  ModelSpec s;
  s.input_dim = in;
  s.hidden_dims = std::move(hidden);
  s.dropout_rate = dropout;
  return s;
}

}  // namespace

TEST_CASE("param count and layer layout") {
  const ModelSpec s = tiny_spec(3, {4, 2});
  CHECK(s.param_count() == (3 + 1) * 4 + (4 + 1) * 2 + (2 + 1) * 1);
  const auto shapes = layer_shapes(s);
  REQUIRE(shapes.size() == 3);
  std::size_t off = 0;
  for (const auto& l : shapes) {
    CHECK(l.weight_offset == off);
    CHECK(l.bias_offset == off + l.fan_in * l.fan_out);
    off = l.bias_offset + l.fan_out;
  }
  CHECK(off == s.param_count());
  CHECK(shapes.back().fan_out == 1);
}

TEST_CASE("spec validation") {
  CHECK_THROWS_AS(tiny_spec(0, {4}).validate(), Error);
  CHECK_THROWS_AS(tiny_spec(3, {}).validate(), Error);
  CHECK_THROWS_AS(tiny_spec(3, {4, 0}).validate(), Error);
  CHECK_THROWS_AS(tiny_spec(3, {4}, 1.0).validate(), Error);
  CHECK_THROWS_AS(tiny_spec(3, {4}, -0.1).validate(), Error);
  CHECK_NOTHROW(tiny_spec(3, {4}, 0.0).validate());
  CHECK(tiny_spec(3, {4}).digest() != tiny_spec(3, {5}).digest());
  CHECK(tiny_spec(3, {4}).digest() == tiny_spec(3, {4}).digest());
}

TEST_CASE("glorot init: zero biases, bounded weights, seeded") {
  const ModelSpec s = tiny_spec(20, {16, 8});
  const ParamVector p = init_params(s, 42);
  CHECK(p.size() == s.param_count());
  CHECK(p.spec_digest == s.digest());
  for (const auto& l : layer_shapes(s)) {
    const double bound = std::sqrt(6.0 / static_cast<double>(l.fan_in + l.fan_out));
    for (std::size_t i = 0; i < l.fan_in * l.fan_out; ++i) CHECK(std::abs(p[l.weight_offset + i]) <= bound);
    for (std::size_t j = 0; j < l.fan_out; ++j) CHECK(p[l.bias_offset + j] == 0.0);
  }
  CHECK(init_params(s, 42) == p);
  CHECK(init_params(s, 43) != p);
}

TEST_CASE("forward matches naive loops") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const ModelSpec s = tiny_spec(1 + rng() % 6, {1 + rng() % 5, 1 + rng() % 4});
    ParamVector p = init_params(s, trial);
    for (auto& v : p.values) v += std::normal_distribution<double>(0.0, 0.3)(rng);
    const Batch b = oracle::random_batch(rng, 1 + rng() % 9, s.input_dim);
    const auto got = forward(s, p, b);
    const auto want = oracle::forward(s, p.values, b.features);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("dropout: eval ignores the seed, train is seeded") {
  std::mt19937_64 rng(3);
  const ModelSpec s = tiny_spec(5, {32, 16}, 0.5);
  const ParamVector p = init_params(s, 1);
  const Batch b = oracle::random_batch(rng, 8, 5);
  CHECK(forward(s, p, b, Mode::eval, 1) == forward(s, p, b, Mode::eval, 2));
  CHECK(forward(s, p, b, Mode::train, 1) == forward(s, p, b, Mode::train, 1));
  CHECK(forward(s, p, b, Mode::train, 1) != forward(s, p, b, Mode::train, 2));

  const ModelSpec s0 = tiny_spec(5, {32, 16}, 0.0);
  const ParamVector p0 = init_params(s0, 1);
  CHECK(forward(s0, p0, b, Mode::train, 9) == forward(s0, p0, b, Mode::eval));
}

TEST_CASE("gradient agrees with central differences") {
  std::mt19937_64 rng(11);
  int checked = 0;
  while (checked < 8) {
    const ModelSpec s = tiny_spec(2 + rng() % 3, {2 + rng() % 4, 2 + rng() % 3}, checked % 2 ? 0.25 : 0.0);
    ParamVector p = init_params(s, rng());
    for (auto& v : p.values) v += std::normal_distribution<double>(0.0, 0.2)(rng);
    const Batch b = oracle::random_batch(rng, 6, s.input_dim);
    double kink = 0.0;
    oracle::forward(s, p.values, b.features, &kink);
    if (kink < 1e-3) continue;
    CHECK(oracle::max_grad_rel_error(s, p, b, 100 + checked) < 1e-5);
    ++checked;
  }
}

TEST_CASE("loss is mean binary cross-entropy") {
  std::mt19937_64 rng(5);
  const ModelSpec s = tiny_spec(3, {4});
  const ParamVector p = init_params(s, 2);
  const Batch b = oracle::random_batch(rng, 10, 3);
  const auto probs = oracle::forward(s, p.values, b.features);
  double want = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    want -= b.labels[i] * std::log(probs[i]) + (1 - b.labels[i]) * std::log(1 - probs[i]);
  }
  want /= static_cast<double>(probs.size());
  CHECK(loss_and_grad(s, p, b, 0).loss == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("sgd step and learning-rate schedule") {
  ParamVector w{{1.0, -2.0, 0.5}, 0};
  const ParamVector g{{0.5, 1.0, -1.0}, 0};
  const ParamVector next = sgd_step(w, g, 0.1);
  CHECK(next.values == std::vector<double>{0.95, -2.1, 0.6});
  sgd_step_inplace(w, g, 0.1);
  CHECK(w == next);
  CHECK_THROWS_AS(sgd_step(w, ParamVector{{1.0}, 0}, 0.1), Error);

  CHECK(lr_schedule(0, 0.1, 0.5) == 0.1);
  CHECK(lr_schedule(3, 0.1, 0.5) == doctest::Approx(0.0125));
  CHECK(lr_schedule(7, 0.2, 1.0) == 0.2);
  CHECK_THROWS_AS(lr_schedule(1, 0.1, 0.0), Error);
  CHECK_THROWS_AS(lr_schedule(1, 0.1, 1.5), Error);
}

TEST_CASE("parameter and batch validation") {
  const ModelSpec s = tiny_spec(3, {4});
  ParamVector p = init_params(s, 0);
  CHECK_NOTHROW(check_params(s, p));
  ParamVector short_p = p;
  short_p.values.pop_back();
  CHECK_THROWS_AS(check_params(s, short_p), Error);
  ParamVector foreign = p;
  foreign.spec_digest = tiny_spec(3, {5}).digest();
  CHECK_THROWS_AS(check_params(s, foreign), Error);

  std::mt19937_64 rng(1);
  Batch wide = oracle::random_batch(rng, 4, 5);
  CHECK_THROWS_AS(forward(s, p, wide), Error);
  Batch bad = oracle::random_batch(rng, 4, 3);
  bad.labels.pop_back();
  CHECK_THROWS_AS(forward(s, p, bad), Error);
  Batch nan_batch = oracle::random_batch(rng, 4, 3);
  nan_batch.features(0, 0) = NAN;
  CHECK_THROWS_AS(forward(s, p, nan_batch), Error);

  p.values[0] = INFINITY;
  CHECK_FALSE(p.all_finite());
}
