#include "fedsim/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "fedsim/error.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

std::size_t Dataset::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1.0));
}

Dataset Dataset::subset(const std::vector<std::size_t>& idx) const {
  Dataset out;
  out.features.resize(static_cast<Eigen::Index>(idx.size()), features.cols());
  out.labels.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(idx[i]));
    out.labels.push_back(labels[idx[i]]);
  }
  out.feature_names = feature_names;
  out.scaling_stats = scaling_stats;
  return out;
}

Batch Dataset::to_batch() const { return Batch{features, labels}; }

std::size_t Partition::total_rows() const {
  std::size_t n = 0;
  for (const auto& a : assignments) n += a.size();
  return n;
}

// ---------------------------------------------------------------------------
// CSV

CsvTable parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    // A blank line parses as a single empty field; skip it.
    if (!(record.size() == 1 && record[0].empty())) records.push_back(std::move(record));
    record.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field_started || field.empty()) in_quotes = true;
        else field.push_back(c);
        field_started = true;
        break;
      case ',':
        end_field();
        break;
      case '\r':
        break;
      case '\n':
        end_record();
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (in_quotes) throw Error("csv: unterminated quoted field");
  if (field_started || !field.empty() || !record.empty()) end_record();

  CsvTable table;
  if (records.empty()) return table;
  table.header = std::move(records.front());
  table.rows.assign(std::make_move_iterator(records.begin() + 1),
                    std::make_move_iterator(records.end()));
  return table;
}

CsvTable read_csv_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("csv: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string text = buf.str();
  if (text.size() >= 3 && text.compare(0, 3, "\xEF\xBB\xBF") == 0) text.erase(0, 3);
  return parse_csv(text);
}

std::string csv_escape(const std::string& cell) {
  if (cell.find_first_of(",\"\r\n") == std::string::npos) return cell;
  std::string out = "\"";
  for (char c : cell) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& raw, double& out) {
  const std::string s = trim(raw);
  if (s.empty()) return false;
  const char* first = s.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

}  // namespace

Dataset dataset_from_table(const CsvTable& table, const CsvLoadOptions& options) {
  if (table.header.empty() || table.rows.empty()) throw Error("csv: empty file");
  const auto& header = table.header;
  auto find = [&](const std::string& name) -> std::ptrdiff_t {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  };
  const auto label_idx = find(options.label_column);
  if (label_idx < 0) throw Error("csv: missing label column '" + options.label_column + "'");
  std::set<std::size_t> categorical;
  for (const auto& c : options.categorical_columns) {
    const auto i = find(c);
    if (i < 0) throw Error("csv: unknown categorical column '" + c + "'");
    categorical.insert(static_cast<std::size_t>(i));
  }
  std::set<std::size_t> ignored;
  for (const auto& c : options.drop_columns) {
    const auto i = find(c);
    if (i >= 0) ignored.insert(static_cast<std::size_t>(i));
  }

  // Pass 1: keep rows whose every used cell parses.
  std::vector<std::size_t> kept;
  std::vector<double> labels;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    if (row.size() != header.size()) continue;
    auto lab = options.label_map.find(trim(row[static_cast<std::size_t>(label_idx)]));
    if (lab == options.label_map.end() || (lab->second != 0 && lab->second != 1)) continue;
    bool ok = true;
    for (std::size_t c = 0; c < header.size() && ok; ++c) {
      if (c == static_cast<std::size_t>(label_idx) || ignored.count(c) || categorical.count(c)) continue;
      double v;
      ok = parse_double(row[c], v);
    }
    if (!ok) continue;
    kept.push_back(r);
    labels.push_back(static_cast<double>(lab->second));
  }
  if (kept.empty()) throw Error("csv: all rows dropped during parsing");
  if (kept.size() < 2) throw Error("csv: fewer than two usable rows");

  // Column layout: header order, categorical columns expanded in place.
  struct OutCol {
    std::size_t src;
    bool onehot;
    std::string level;
  };
  std::vector<OutCol> cols;
  Dataset ds;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == static_cast<std::size_t>(label_idx) || ignored.count(c)) continue;
    if (categorical.count(c)) {
      std::set<std::string> levels;
      for (std::size_t r : kept) levels.insert(trim(table.rows[r][c]));
      for (const auto& lv : levels) {
        cols.push_back({c, true, lv});
        ds.feature_names.push_back(header[c] + "=" + lv);
      }
    } else {
      cols.push_back({c, false, {}});
      ds.feature_names.push_back(header[c]);
    }
  }

  ds.features.resize(static_cast<Eigen::Index>(kept.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto& row = table.rows[kept[i]];
    for (std::size_t j = 0; j < cols.size(); ++j) {
      double v = 0.0;
      if (cols[j].onehot) v = trim(row[cols[j].src]) == cols[j].level ? 1.0 : 0.0;
      else parse_double(row[cols[j].src], v);
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
    }
  }
  ds.labels = std::move(labels);
  ds.dropped_rows = table.rows.size() - kept.size();

  // One-hot columns stay 0/1; numeric columns are z-scored.
  auto stats = compute_scaling(ds.features);
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (cols[j].onehot) stats[j] = ColumnStats{};
  }
  apply_scaling(ds.features, stats);
  ds.scaling_stats = std::move(stats);
  return ds;
}

Dataset load_csv(const std::filesystem::path& path, const CsvLoadOptions& options) {
  try {
    return dataset_from_table(read_csv_table(path), options);
  } catch (const Error& e) {
    throw Error(std::string(e.what()) + " [" + path.string() + "]");
  }
}

void write_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("csv: cannot write " + path.string());
  for (std::size_t j = 0; j < ds.cols(); ++j) {
    out << csv_escape(j < ds.feature_names.size() ? ds.feature_names[j] : "f" + std::to_string(j))
        << ',';
  }
  out << "label\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < ds.rows(); ++i) {
    for (std::size_t j = 0; j < ds.cols(); ++j) {
      out << ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) << ',';
    }
    out << static_cast<int>(ds.labels[i]) << '\n';
  }
  if (!out) throw Error("csv: write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Scaling

std::vector<ColumnStats> compute_scaling(const Matrix& features) {
  const auto n = features.rows();
  std::vector<ColumnStats> stats(static_cast<std::size_t>(features.cols()));
  if (n == 0) return stats;
  for (Eigen::Index j = 0; j < features.cols(); ++j) {
    auto col = features.col(j);
    ColumnStats s;
    if ((col.array() == col(0)).all()) {
      s.mean = col(0);
      s.std = 1.0;
    } else {
      s.mean = col.mean();
      const double var = (col.array() - s.mean).square().sum() / static_cast<double>(n);
      s.std = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    stats[static_cast<std::size_t>(j)] = s;
  }
  return stats;
}

void apply_scaling(Matrix& features, const std::vector<ColumnStats>& stats) {
  if (stats.size() != static_cast<std::size_t>(features.cols())) {
    throw Error("scaling: stats width does not match features");
  }
  for (Eigen::Index j = 0; j < features.cols(); ++j) {
    const auto& s = stats[static_cast<std::size_t>(j)];
    features.col(j) = (features.col(j).array() - s.mean) / s.std;
  }
}

// ---------------------------------------------------------------------------
// Synthetic data and splitting

Dataset synth_anomaly(std::size_t n, std::size_t d, double anomaly_frac, double separation,
                      std::uint64_t seed) {
  if (n < 2 || d < 1) throw Error("synth: need n >= 2 and d >= 1");
  if (!(anomaly_frac > 0.0 && anomaly_frac < 1.0)) throw Error("synth: anomaly_frac must lie in (0, 1)");
  auto n_anom = static_cast<std::size_t>(std::floor(static_cast<double>(n) * anomaly_frac));
  n_anom = std::clamp<std::size_t>(n_anom, 1, n - 1);

  Dataset ds;
  ds.labels.assign(n, 0.0);
  std::fill(ds.labels.begin(), ds.labels.begin() + static_cast<std::ptrdiff_t>(n_anom), 1.0);
  Engine label_eng = make_engine(derive_seed(seed, Stream::data, {0}));
  std::shuffle(ds.labels.begin(), ds.labels.end(), label_eng);

  const double shift = separation / std::sqrt(static_cast<double>(d));
  Engine eng = make_engine(derive_seed(seed, Stream::data, {1}));
  std::normal_distribution<double> normal(0.0, 1.0);
  ds.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    const double mu = ds.labels[i] > 0.5 ? shift : 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = mu + normal(eng);
    }
  }
  for (std::size_t j = 0; j < d; ++j) ds.feature_names.push_back("f" + std::to_string(j));
  ds.scaling_stats.assign(d, ColumnStats{});
  return ds;
}

std::pair<Dataset, Dataset> train_test_split(const Dataset& ds, double test_frac,
                                             std::uint64_t seed) {
  if (!(test_frac > 0.0 && test_frac < 1.0)) throw Error("split: test_frac must lie in (0, 1)");
  std::vector<std::size_t> train, test;
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.rows(); ++i) {
      if (ds.labels[i] == static_cast<double>(cls)) idx.push_back(i);
    }
    Engine eng = make_engine(derive_seed(seed, Stream::split, {static_cast<std::uint64_t>(cls)}));
    std::shuffle(idx.begin(), idx.end(), eng);
    auto k = static_cast<std::size_t>(std::llround(test_frac * static_cast<double>(idx.size())));
    if (idx.size() >= 2) k = std::clamp<std::size_t>(k, 1, idx.size() - 1);
    test.insert(test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {ds.subset(train), ds.subset(test)};
}

// ---------------------------------------------------------------------------
// Partitioning

Partition partition_iid(std::size_t num_rows, std::size_t num_clients, std::uint64_t seed) {
  if (num_clients == 0) throw Error("partition: num_clients must be >= 1");
  if (num_rows < num_clients) throw Error("partition: fewer rows than clients");
  std::vector<std::size_t> rows(num_rows);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  Engine eng = make_engine(derive_seed(seed, Stream::partition));
  std::shuffle(rows.begin(), rows.end(), eng);
  Partition p;
  p.assignments.resize(num_clients);
  for (std::size_t i = 0; i < num_rows; ++i) p.assignments[i % num_clients].push_back(rows[i]);
  for (auto& a : p.assignments) std::sort(a.begin(), a.end());
  return p;
}

Partition partition_dirichlet(const Dataset& ds, std::size_t num_clients, double alpha,
                              std::uint64_t seed, double coverage) {
  if (num_clients < 1) throw Error("partition: num_clients must be >= 1");
  if (!(alpha > 0.0)) throw Error("partition: alpha must be positive");
  if (!(coverage > 0.0 && coverage <= 1.0)) throw Error("partition: coverage must lie in (0, 1]");

  constexpr int kMaxAttempts = 100;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Engine eng = make_engine(derive_seed(seed, Stream::partition, {static_cast<std::uint64_t>(attempt)}));
    Partition part;
    part.assignments.resize(num_clients);
    bool degenerate = false;
    for (int cls = 0; cls < 2 && !degenerate; ++cls) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < ds.rows(); ++i) {
        if (ds.labels[i] == static_cast<double>(cls)) idx.push_back(i);
      }
      std::shuffle(idx.begin(), idx.end(), eng);
      const auto m = static_cast<std::size_t>(std::floor(coverage * static_cast<double>(idx.size())));

      std::gamma_distribution<double> gamma(alpha, 1.0);
      std::vector<double> share(num_clients);
      double total = 0.0;
      for (auto& s : share) total += (s = gamma(eng));
      if (!(total > 0.0) || !std::isfinite(total)) {
        degenerate = true;
        break;
      }
      double cum = 0.0;
      std::size_t begin = 0;
      for (std::size_t c = 0; c < num_clients; ++c) {
        cum += share[c];
        const std::size_t end = c + 1 == num_clients
                                    ? m
                                    : std::min(m, static_cast<std::size_t>(std::llround(cum / total * static_cast<double>(m))));
        for (std::size_t k = begin; k < end; ++k) part.assignments[c].push_back(idx[k]);
        begin = std::max(begin, end);
      }
    }
    if (degenerate) continue;
    bool all_nonempty = true;
    for (auto& a : part.assignments) {
      std::sort(a.begin(), a.end());
      all_nonempty = all_nonempty && !a.empty();
    }
    if (all_nonempty) return part;
  }
  throw Error("partition: could not give every client a row after 100 attempts");
}

}  // namespace fedsim
