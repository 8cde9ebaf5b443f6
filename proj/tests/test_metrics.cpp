#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "fedsim/data.hpp"
#include "fedsim/error.hpp"
#include "fedsim/metrics.hpp"
#include "oracles.hpp"

using namespace fedsim;
namespace fs = std::filesystem;

namespace {

std::vector<double> coarse_scores(std::mt19937_64& rng, std::size_t n, int levels) {
  std::vector<double> v(n);
  for (auto& x : v) x = static_cast<double>(rng() % static_cast<unsigned>(levels)) / levels;
  return v;
}

// Two-sided and "greater" p-values by enumerating every split of the pooled sample.
std::pair<double, double> brute_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pooled(a);
  pooled.insert(pooled.end(), b.begin(), b.end());
  const std::size_t n = pooled.size(), n1 = a.size();
  const double u_obs = oracle::u_pairs(a, b);
  const double mid = static_cast<double>(a.size() * b.size()) / 2.0;
  double ge = 0, le = 0, total = 0;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != n1) continue;
    std::vector<double> x, y;
    for (std::size_t i = 0; i < n; ++i) ((mask >> i) & 1u ? x : y).push_back(pooled[i]);
    const double u = oracle::u_pairs(x, y);
    total += 1;
    ge += u >= u_obs - 1e-9;
    le += u <= u_obs + 1e-9;
  }
  (void)mid;
  return {std::min(1.0, 2.0 * std::min(ge, le) / total), ge / total};
}

}  // namespace

TEST_CASE("accuracy") {
  const std::vector<double> s{0.1, 0.5, 0.7, 0.4}, y{0, 1, 0, 0};
  CHECK(accuracy(s, y) == 0.75);
  CHECK(accuracy(s, y, 0.6) == 0.5);
  CHECK(accuracy(s, y, 0.05) == 0.25);
  CHECK_THROWS_AS(accuracy(std::vector<double>{}, std::vector<double>{}), Error);
  CHECK_THROWS_AS(accuracy(s, std::vector<double>{0, 1}), Error);
  CHECK_THROWS_AS(accuracy(s, std::vector<double>{0, 1, 2, 0}), Error);
}

TEST_CASE("auc worked examples") {
  CHECK(auc_roc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<double>{0, 0, 1, 1}) == 1.0);
  CHECK(auc_roc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<double>{0, 0, 1, 1}) == 0.0);
  CHECK(auc_roc(std::vector<double>{0.5, 0.5, 0.5}, std::vector<double>{0, 1, 1}) == 0.5);
  // One tied cross-class pair out of four.
  CHECK(auc_roc(std::vector<double>{0.1, 0.4, 0.4, 0.9}, std::vector<double>{0, 0, 1, 1}) == 0.875);
  CHECK_THROWS_AS(auc_roc(std::vector<double>{0.1, 0.2}, std::vector<double>{1, 1}), Error);
  CHECK_THROWS_AS(auc_roc(std::vector<double>{NAN, 0.2}, std::vector<double>{0, 1}), Error);

  const EvalResult one_class = evaluate_scores(std::vector<double>{0.2, 0.9}, std::vector<double>{0, 0});
  CHECK_FALSE(one_class.auc.has_value());
  CHECK(one_class.accuracy == 0.5);
  CHECK(one_class.n_neg == 2);
  const EvalResult both = evaluate_scores(std::vector<double>{0.2, 0.9}, std::vector<double>{0, 1});
  CHECK(both.auc == 1.0);
  CHECK(both.n_pos == 1);
}

TEST_CASE("auc equals pairwise counting and obeys its laws") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 60;
    auto s = coarse_scores(rng, n, trial % 2 ? 5 : 1000);
    std::vector<double> y(n);
    for (auto& v : y) v = static_cast<double>(rng() % 2);
    y[0] = 0;
    y[1] = 1;
    const double auc = auc_roc(s, y);
    CHECK(auc == doctest::Approx(oracle::auc_pairs(s, y)).epsilon(1e-14));
    std::vector<double> flipped(n), squashed(n);
    for (std::size_t i = 0; i < n; ++i) {
      flipped[i] = 1.0 - y[i];
      squashed[i] = std::exp(3.0 * s[i]) - 7.0;
    }
    CHECK(auc + auc_roc(s, flipped) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(auc_roc(squashed, y) == auc);
  }
}

TEST_CASE("midranks") {
  CHECK(midranks(std::vector<double>{3, 1, 3, 2}) == std::vector<double>{3.5, 1, 3.5, 2});
  CHECK(midranks(std::vector<double>{5, 5, 5}) == std::vector<double>{2, 2, 2});
}

TEST_CASE("U statistic matches pair counting") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = coarse_scores(rng, 1 + rng() % 30, 6);
    const auto b = coarse_scores(rng, 1 + rng() % 30, 6);
    const auto r = mann_whitney_u(a, b);
    CHECK(r.u_statistic == oracle::u_pairs(a, b));
    CHECK(r.p_value > 0.0);
    CHECK(r.p_value <= 1.0);
    CHECK(r.n1 == a.size());
  }
}

TEST_CASE("exact p-values match full enumeration, with and without ties") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n1 = 1 + rng() % 6, n2 = 1 + rng() % 6;
    const int levels = trial % 2 ? 4 : 100000;
    const auto a = coarse_scores(rng, n1, levels);
    const auto b = coarse_scores(rng, n2, levels);
    const auto [two, greater] = brute_p(a, b);
    const auto r2 = mann_whitney_u(a, b, Alternative::two_sided);
    const auto rg = mann_whitney_u(a, b, Alternative::greater);
    CHECK(r2.method == UMethod::exact);
    CHECK(r2.p_value == doctest::Approx(two).epsilon(1e-12));
    CHECK(rg.p_value == doctest::Approx(greater).epsilon(1e-12));
  }
}

TEST_CASE("U test worked examples") {
  const std::vector<double> a{0.91, 0.92, 0.93, 0.94, 0.95};
  const auto same = mann_whitney_u(a, a);
  CHECK(same.u_statistic == 12.5);
  CHECK(same.p_value == 1.0);
  CHECK(same.method == UMethod::exact);

  std::vector<double> hi, lo;
  for (int i = 0; i < 30; ++i) {
    hi.push_back(0.95 + 0.001 * i);
    lo.push_back(0.80 + 0.001 * i);
  }
  const auto shifted = mann_whitney_u(hi, lo, Alternative::greater);
  CHECK(shifted.method == UMethod::normal_approx);
  CHECK(shifted.u_statistic == 900.0);
  CHECK(shifted.p_value < 1e-6);
  CHECK(mann_whitney_u(lo, hi, Alternative::greater).p_value > 0.99);
  CHECK(mann_whitney_u(hi, lo).p_value < 0.05);
  CHECK(mann_whitney_u(hi, hi).p_value == 1.0);

  CHECK_THROWS_AS(mann_whitney_u(std::vector<double>{}, a), Error);
  CHECK_THROWS_AS(mann_whitney_u(std::vector<double>{NAN}, a), Error);
  CHECK_THROWS_AS(mann_whitney_u(hi, lo, Alternative::two_sided, UMethod::exact), Error);
  CHECK(alternative_from_string("greater") == Alternative::greater);
  CHECK(to_string(Alternative::two_sided) == "two_sided");
  CHECK_THROWS_AS(alternative_from_string("less"), Error);
}

TEST_CASE("exact and normal p-values agree at n1 = n2 = 15 without ties") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(15), b(15);
    const double shift = 0.1 * (trial % 10);
    for (auto& v : a) v = nd(rng) + shift;
    for (auto& v : b) v = nd(rng);
    for (auto alt : {Alternative::two_sided, Alternative::greater}) {
      const auto ex = mann_whitney_u(a, b, alt, UMethod::exact);
      const auto ap = mann_whitney_u(a, b, alt, UMethod::normal_approx);
      CHECK(ex.method == UMethod::exact);
      CHECK(ap.method == UMethod::normal_approx);
      CHECK(std::abs(ex.p_value - ap.p_value) < 0.01);
    }
  }
}

TEST_CASE("round reports round-trip and write with exact columns") {
  RoundReport r;
  r.round = 3;
  r.t_s = 12.25;
  r.round_time_s = 4.0;
  r.trained = 5;
  r.accepted = 4;
  r.failed = 1;
  r.aggregations = 1;
  r.accepted_frac = 0.8;
  r.mean_relevance = 0.71;
  r.staleness_mean = 0.5;
  r.staleness_max = 2;
  r.sgd_steps = 100;
  r.eval = EvalResult{0.9, 0.95, 10, 90, 0.5};
  const RoundReport back = RoundReport::from_json(r.to_json());
  CHECK(back.to_json() == r.to_json());
  CHECK(back.eval->auc == 0.95);

  RoundReport bare;
  bare.stalled = true;
  const RoundReport bare_back = RoundReport::from_json(bare.to_json());
  CHECK(bare_back.stalled);
  CHECK_FALSE(bare_back.mean_relevance.has_value());
  CHECK_FALSE(bare_back.eval.has_value());

  const fs::path dir = fs::temp_directory_path() / "fedsim_test_reports";
  fs::remove_all(dir);
  write_reports(dir, {}, std::nullopt);
  CHECK(fs::file_size(dir / "rounds.jsonl") == 0);
  {
    const CsvTable t = read_csv_table(dir / "summary.csv");
    CHECK(t.header == summary_columns());
    CHECK(t.rows.empty());
  }

  RunSummary s;
  s.mode = "async_filtered";
  s.seed = 7;
  s.rounds = 2;
  s.accuracy = 0.9;
  s.comm_time_s = 10.5;
  write_reports(dir, {r, bare}, s);
  CHECK(read_round_reports(dir / "rounds.jsonl").size() == 2);
  const CsvTable t = read_csv_table(dir / "summary.csv");
  REQUIRE(t.rows.size() == 1);
  CHECK(t.rows[0][0] == "async_filtered");
  CHECK(t.rows[0][4] == "");  // auc absent
  CHECK(summary_columns().size() == t.rows[0].size());
}
