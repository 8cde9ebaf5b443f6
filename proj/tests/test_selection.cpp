#include <doctest.h>

#include <random>
#include <sstream>

#include "fedsim/error.hpp"
#include "fedsim/selection.hpp"
#include "oracles.hpp"

using namespace fedsim;

namespace {

ParamVector pv(std::vector<double> v) { return ParamVector{std::move(v), 0}; }

// Vectors with many exact zeros and shared values.
ParamVector coarse(std::mt19937_64& rng, std::size_t n) {
  ParamVector p;
  for (std::size_t i = 0; i < n; ++i) p.values.push_back(static_cast<double>(static_cast<int>(rng() % 5) - 2));
  return p;
}

}  // namespace

TEST_CASE("weight-sign relevance worked examples") {
  const auto s = calculate_relevance(pv({1, -2, 3, 0}), pv({2, -1, -3, 0}), nullptr, SelectionMode::weight_sign);
  CHECK(s.aligned == 3);
  CHECK(s.total == 4);
  CHECK(s.ratio == 0.75);
  // Zero is its own class: it matches only zero.
  CHECK(calculate_relevance(pv({0.0}), pv({1e-300}), nullptr, SelectionMode::weight_sign).ratio == 0.0);
  CHECK(calculate_relevance(pv({-0.0}), pv({0.0}), nullptr, SelectionMode::weight_sign).ratio == 1.0);
  const ParamVector w = pv({0.3, -0.1, 2.0});
  CHECK(calculate_relevance(w, w, nullptr, SelectionMode::weight_sign).ratio == 1.0);
}

TEST_CASE("delta-sign relevance compares update direction with the last global step") {
  const ParamVector prev = pv({0, 0, 0, 0});
  const ParamVector global = pv({1, -1, 1, 0});
  const ParamVector client = pv({2, -0.5, 0.5, 0});
  // client - global = {+, +, -, 0}; global - prev = {+, -, +, 0}
  const auto s = calculate_relevance(client, global, &prev, SelectionMode::delta_sign);
  CHECK(s.aligned == 2);
  CHECK(s.ratio == 0.5);
  CHECK_THROWS_AS(calculate_relevance(client, global, nullptr, SelectionMode::delta_sign), Error);
  const ParamVector short_prev = pv({0});
  CHECK_THROWS_AS(calculate_relevance(client, global, &short_prev, SelectionMode::delta_sign), Error);
}

TEST_CASE("relevance equals the sign-count oracle") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 300;
    const ParamVector a = trial % 2 ? coarse(rng, n) : oracle::random_params(rng, n);
    const ParamVector b = trial % 3 ? coarse(rng, n) : oracle::random_params(rng, n);
    const auto s = calculate_relevance(a, b, nullptr, SelectionMode::weight_sign);
    CHECK(s.aligned == oracle::sign_agreement_count(a.values, b.values));
    CHECK(s.ratio == oracle::sign_agreement(a.values, b.values));
  }
}

TEST_CASE("filter accepts at the boundary and rejects below") {
  const ParamVector g = pv({1, 1, 1, 1});
  const ParamVector u = pv({1, 1, 1, -1});  // ratio 0.75
  CHECK(filter_update(u, g, nullptr, {0.75, SelectionMode::weight_sign}).decision == Decision::accept);
  CHECK(filter_update(u, g, nullptr, {0.7500001, SelectionMode::weight_sign}).decision == Decision::reject);
  CHECK(filter_update(u, g, nullptr, {0.0, SelectionMode::weight_sign}).decision == Decision::accept);
  CHECK(filter_update(pv({-1, -1, -1, -1}), g, nullptr, {0.0, SelectionMode::weight_sign}).decision ==
        Decision::accept);
  CHECK(filter_update(g, g, nullptr, {1.0, SelectionMode::weight_sign}).decision == Decision::accept);
  CHECK(filter_update(u, g, nullptr, {1.0, SelectionMode::weight_sign}).score.ratio == 0.75);
}

TEST_CASE("selection input validation") {
  CHECK_THROWS_AS(calculate_relevance(pv({1, 2}), pv({1}), nullptr, SelectionMode::weight_sign), Error);
  CHECK_THROWS_AS(calculate_relevance(pv({}), pv({}), nullptr, SelectionMode::weight_sign), Error);
  CHECK_THROWS_AS((SelectionPolicy{1.5, SelectionMode::weight_sign}.validate()), Error);
  CHECK_THROWS_AS((SelectionPolicy{-0.1, SelectionMode::weight_sign}.validate()), Error);
  CHECK(selection_mode_from_string(to_string(SelectionMode::delta_sign)) == SelectionMode::delta_sign);
  CHECK(selection_mode_from_string("weight_sign") == SelectionMode::weight_sign);
  CHECK_THROWS_AS(selection_mode_from_string("magnitude"), Error);
}

TEST_CASE("threshold sweep table") {
  std::vector<double> seen;
  const auto rows = sweep_threshold(
      [&](double t) {
        seen.push_back(t);
        return ThresholdRow{0.0, 0.9, 0.95, 100.0 * (1.0 - t), 1.0 - t};
      },
      {0.5, 0.65});
  CHECK(seen == std::vector<double>{0.5, 0.65});
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].theta == 0.65);
  std::ostringstream out;
  write_threshold_csv(out, rows);
  const CsvTable t = parse_csv(out.str());
  CHECK(t.header == std::vector<std::string>{"theta", "accuracy", "auc", "comm_time_s", "accepted_frac"});
  REQUIRE(t.rows.size() == 2);
  CHECK(std::stod(t.rows[0][3]) == 50.0);
  CHECK_THROWS_AS(sweep_threshold([](double) { return ThresholdRow{}; }, {1.2}), Error);
}
