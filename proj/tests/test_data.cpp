#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "fedsim/data.hpp"
#include "fedsim/error.hpp"

using namespace fedsim;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "fedsim_test_data";
  fs::create_directories(dir);
  return dir / name;
}

void check_disjoint_cover(const Partition& p, std::size_t rows, bool full) {
  std::vector<int> seen(rows, 0);
  for (const auto& a : p.assignments) {
    CHECK(std::is_sorted(a.begin(), a.end()));
    for (std::size_t r : a) ++seen.at(r);
  }
  for (int s : seen) CHECK(s <= 1);
  if (full) CHECK(p.total_rows() == rows);
}

}  // namespace

TEST_CASE("csv parsing honors quoting") {
  const CsvTable t = parse_csv("a,b,c\r\n1,\"x,y\",\"he said \"\"hi\"\"\"\n2,,\"multi\nline\"\n\n");
  REQUIRE(t.header == std::vector<std::string>{"a", "b", "c"});
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[0] == std::vector<std::string>{"1", "x,y", "he said \"hi\""});
  CHECK(t.rows[1] == std::vector<std::string>{"2", "", "multi\nline"});
  CHECK_THROWS_AS(parse_csv("a,b\n1,\"open"), Error);
  CHECK(parse_csv("").header.empty());

  for (const std::string cell : {"plain", "with,comma", "quote\"d", "new\nline", ""}) {
    const CsvTable back = parse_csv("h\n" + csv_escape(cell) + ",\n");
    CHECK(back.rows.at(0).at(0) == cell);
  }
}

TEST_CASE("csv ingestion: one-hot, z-score, dropped rows") {
  const std::string text =
      "id,proto,x,y,label\n"
      "1,tcp,1.0,10,normal\n"
      "2,udp,2.0,10,anomaly\n"
      "3,tcp,3.0,10,normal\n"
      "4,icmp,4.0,10,1\n"
      "5,tcp,oops,10,0\n"     // unparsable numeric cell
      "6,tcp,5.0,10,maybe\n"  // unmapped label
      "7,tcp,6.0\n";          // short row
  CsvLoadOptions opt;
  opt.categorical_columns = {"proto"};
  opt.drop_columns = {"id"};
  const Dataset ds = dataset_from_table(parse_csv(text), opt);
  CHECK(ds.rows() == 4);
  CHECK(ds.dropped_rows == 3);
  CHECK(ds.labels == std::vector<double>{0, 1, 0, 1});
  CHECK(ds.feature_names == std::vector<std::string>{"proto=icmp", "proto=tcp", "proto=udp", "x", "y"});
  CHECK(ds.positives() == 2);

  // One-hot columns untouched.
  CHECK(ds.features(1, 2) == 1.0);
  CHECK(ds.features(3, 0) == 1.0);
  CHECK(ds.features(0, 1) == 1.0);
  // Numeric x = {1,2,3,4}: mean 2.5, population std sqrt(1.25).
  const double sd = std::sqrt(1.25);
  CHECK(ds.scaling_stats[3].mean == doctest::Approx(2.5));
  CHECK(ds.scaling_stats[3].std == doctest::Approx(sd));
  for (Eigen::Index i = 0; i < 4; ++i) {
    CHECK(ds.features(i, 3) == doctest::Approx((static_cast<double>(i) + 1.0 - 2.5) / sd));
  }
  // Constant column: std 1, centered to zero.
  CHECK(ds.scaling_stats[4].std == 1.0);
  CHECK(ds.features.col(4).isZero());
}

TEST_CASE("csv ingestion errors") {
  CHECK_THROWS_AS(dataset_from_table(parse_csv("x,y\n1,2\n3,4\n")), Error);  // no label column
  CHECK_THROWS_AS(dataset_from_table(parse_csv("x,label\n1,0\n")), Error);   // one usable row
  CHECK_THROWS_AS(dataset_from_table(parse_csv("x,label\na,0\nb,1\n")), Error);
  CsvLoadOptions opt;
  opt.categorical_columns = {"nope"};
  CHECK_THROWS_AS(dataset_from_table(parse_csv("x,label\n1,0\n2,1\n"), opt), Error);
  CHECK_THROWS_AS(load_csv(temp_path("does_not_exist.csv")), Error);
}

TEST_CASE("csv write and reload round-trip") {
  const Dataset ds = synth_anomaly(200, 4, 0.2, 2.0, 9);
  const fs::path path = temp_path("roundtrip.csv");
  write_csv(ds, path);
  const CsvTable t = read_csv_table(path);
  REQUIRE(t.rows.size() == 200);
  for (std::size_t i = 0; i < 200; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(std::stod(t.rows[i][j]) == ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    }
    CHECK(std::stod(t.rows[i][4]) == ds.labels[i]);
  }
}

TEST_CASE("synthetic anomalies: counts, shift, determinism") {
  const Dataset ds = synth_anomaly(20000, 20, 0.1, 2.0, 1);
  CHECK(ds.rows() == 20000);
  CHECK(ds.cols() == 20);
  CHECK(ds.positives() == 2000);
  // Mean projection on u separates the classes by `separation`.
  double pos = 0.0, neg = 0.0;
  for (std::size_t i = 0; i < ds.rows(); ++i) {
    const double proj = ds.features.row(static_cast<Eigen::Index>(i)).sum() / std::sqrt(20.0);
    (ds.labels[i] > 0.5 ? pos : neg) += proj;
  }
  CHECK(pos / 2000 - neg / 18000 == doctest::Approx(2.0).epsilon(0.05));
  CHECK(synth_anomaly(100, 3, 0.1, 1.0, 5).features == synth_anomaly(100, 3, 0.1, 1.0, 5).features);
  CHECK(synth_anomaly(100, 3, 0.1, 1.0, 5).features != synth_anomaly(100, 3, 0.1, 1.0, 6).features);
  CHECK(synth_anomaly(10, 2, 0.01, 1.0, 0).positives() == 1);
  CHECK_THROWS_AS(synth_anomaly(1, 2, 0.1, 1.0, 0), Error);
  CHECK_THROWS_AS(synth_anomaly(10, 2, 1.0, 1.0, 0), Error);
}

TEST_CASE("stratified split") {
  const Dataset ds = synth_anomaly(1000, 3, 0.1, 1.0, 2);
  const auto [train, test] = train_test_split(ds, 0.2, 4);
  CHECK(train.rows() + test.rows() == 1000);
  CHECK(test.positives() == 20);
  CHECK(test.rows() == 200);
  CHECK(train.positives() == 80);
  const auto [train2, test2] = train_test_split(ds, 0.2, 4);
  CHECK(test2.features == test.features);
  CHECK_THROWS_AS(train_test_split(ds, 0.0, 0), Error);
  CHECK_THROWS_AS(train_test_split(ds, 1.0, 0), Error);
}

TEST_CASE("iid partition deals balanced disjoint shards") {
  const Partition p = partition_iid(103, 10, 7);
  CHECK(p.num_clients() == 10);
  check_disjoint_cover(p, 103, true);
  for (const auto& a : p.assignments) CHECK((a.size() == 10 || a.size() == 11));
  CHECK(partition_iid(103, 10, 7).assignments == p.assignments);
  CHECK(partition_iid(103, 10, 8).assignments != p.assignments);
  CHECK_THROWS_AS(partition_iid(5, 10, 0), Error);
  CHECK_THROWS_AS(partition_iid(5, 0, 0), Error);
}

TEST_CASE("dirichlet partition: disjoint, non-empty, label skew grows as alpha shrinks") {
  const Dataset ds = synth_anomaly(5000, 2, 0.3, 1.0, 3);
  const auto skew = [&](double alpha) {
    const Partition p = partition_dirichlet(ds, 10, alpha, 11);
    check_disjoint_cover(p, ds.rows(), true);
    double dev = 0.0;
    for (const auto& a : p.assignments) {
      REQUIRE_FALSE(a.empty());
      double pos = 0.0;
      for (std::size_t r : a) pos += ds.labels[r];
      dev += std::abs(pos / static_cast<double>(a.size()) - 0.3);
    }
    return dev / 10.0;
  };
  CHECK(skew(0.1) > skew(100.0));
  CHECK(skew(100.0) < 0.05);

  const Partition half = partition_dirichlet(ds, 5, 1.0, 2, 0.5);
  check_disjoint_cover(half, ds.rows(), false);
  CHECK(std::abs(static_cast<double>(half.total_rows()) - 2500.0) <= 2.0);
  CHECK_THROWS_AS(partition_dirichlet(ds, 5, 0.0, 0), Error);
  CHECK_THROWS_AS(partition_dirichlet(ds, 5, 1.0, 0, 0.0), Error);
}

TEST_CASE("subset and batch views") {
  const Dataset ds = synth_anomaly(50, 3, 0.2, 1.0, 0);
  const Dataset s = ds.subset({4, 1, 30});
  CHECK(s.rows() == 3);
  CHECK(s.features.row(0) == ds.features.row(4));
  CHECK(s.labels[2] == ds.labels[30]);
  const Batch b = s.to_batch();
  CHECK(b.rows() == 3);
  CHECK(b.features == s.features);
}
