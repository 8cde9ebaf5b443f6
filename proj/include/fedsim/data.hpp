#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fedsim/model.hpp"

namespace fedsim {

struct ColumnStats {
  double mean = 0.0;
  double std = 1.0;
  bool operator==(const ColumnStats&) const = default;
};

struct Dataset {
  Matrix features;  // [n x d]
  std::vector<double> labels;
  std::vector<std::string> feature_names;
  std::vector<ColumnStats> scaling_stats;
  std::size_t dropped_rows = 0;  // rows discarded during ingestion

  std::size_t rows() const noexcept { return labels.size(); }
  std::size_t cols() const noexcept { return static_cast<std::size_t>(features.cols()); }
  std::size_t positives() const;

  Dataset subset(const std::vector<std::size_t>& rows) const;
  Batch to_batch() const;
};

// Per-client row indices into a Dataset.
struct Partition {
  std::vector<std::vector<std::size_t>> assignments;

  std::size_t num_clients() const noexcept { return assignments.size(); }
  std::size_t total_rows() const;
};

// Raw CSV table (header + string cells). RFC-4180 quoting is honored.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv_table(const std::filesystem::path& path);
CsvTable parse_csv(const std::string& text);
std::string csv_escape(const std::string& cell);

struct CsvLoadOptions {
  std::string label_column = "label";
  std::vector<std::string> categorical_columns;
  // Label strings mapped to {0, 1}; rows with unmapped labels are dropped.
  std::map<std::string, int> label_map{{"0", 0}, {"1", 1}, {"normal", 0}, {"anomaly", 1}};
  // Columns ignored entirely (identifiers, attack category names, ...).
  std::vector<std::string> drop_columns;
};

// Loads a CSV, one-hot encodes categorical columns and z-scores numeric ones
// with the population standard deviation (constant columns use std = 1).
Dataset load_csv(const std::filesystem::path& path, const CsvLoadOptions& options = {});
Dataset dataset_from_table(const CsvTable& table, const CsvLoadOptions& options = {});

// Writes features and a trailing "label" column; full round-trip precision.
void write_csv(const Dataset& ds, const std::filesystem::path& path);

std::vector<ColumnStats> compute_scaling(const Matrix& features);
void apply_scaling(Matrix& features, const std::vector<ColumnStats>& stats);

// Normals ~ N(0, I), anomalies ~ N(separation * u, I) with u = 1/sqrt(d).
// Exactly floor(n * anomaly_frac) anomalies, adjusted into [1, n - 1].
Dataset synth_anomaly(std::size_t n, std::size_t d, double anomaly_frac, double separation,
                      std::uint64_t seed);

// Stratified hold-out split. Returns {train, test}.
std::pair<Dataset, Dataset> train_test_split(const Dataset& ds, double test_frac,
                                             std::uint64_t seed);

// Shuffled rows dealt round-robin; shard sizes differ by at most one.
Partition partition_iid(std::size_t num_rows, std::size_t num_clients, std::uint64_t seed);

// Label-skewed Dirichlet allocation. Retries (at most 100 times) until every
// client owns at least one row; `coverage` is the fraction of rows assigned.
Partition partition_dirichlet(const Dataset& ds, std::size_t num_clients, double alpha,
                              std::uint64_t seed, double coverage = 1.0);

}  // namespace fedsim
