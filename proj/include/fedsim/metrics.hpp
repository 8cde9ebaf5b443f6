#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fedsim {

struct EvalResult {
  double accuracy = 0.0;
  std::optional<double> auc;  // absent unless both classes are present
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  double threshold = 0.5;
};

// Fraction of rows where (score >= threshold) matches the 0/1 label.
double accuracy(std::span<const double> scores, std::span<const double> labels, double threshold = 0.5);

// (#concordant pos/neg pairs + 0.5 #tied pairs) / (n_pos n_neg), via midranks.
double auc_roc(std::span<const double> scores, std::span<const double> labels);

EvalResult evaluate_scores(std::span<const double> scores, std::span<const double> labels,
                           double threshold = 0.5);

enum class Alternative { two_sided, greater };
enum class UMethod { exact, normal_approx };

std::string to_string(Alternative a);
Alternative alternative_from_string(const std::string& s);
std::string to_string(UMethod m);

struct UTestResult {
  double u_statistic = 0.0;  // U for sample_a: #(a > b) + 0.5 #(a == b)
  double p_value = 1.0;
  std::size_t n1 = 0;
  std::size_t n2 = 0;
  UMethod method = UMethod::exact;
  Alternative alternative = Alternative::two_sided;
};

// "greater" tests whether sample_a tends to exceed sample_b. By default the
// exact permutation distribution (over midranks, so ties are allowed) is used
// when n1 n2 <= 400, and otherwise the normal approximation with
// tie-corrected variance and continuity correction. `method` forces either.
UTestResult mann_whitney_u(std::span<const double> sample_a, std::span<const double> sample_b,
                           Alternative alternative = Alternative::two_sided,
                           std::optional<UMethod> method = std::nullopt);

// Midranks (1-based) of `values`, ties sharing their mean rank.
std::vector<double> midranks(std::span<const double> values);

struct RoundReport {
  std::uint64_t round = 0;          // 1-based round, or round-equivalent in async runs
  double t_s = 0.0;                 // simulated time when the report was taken
  double round_time_s = 0.0;        // simulated span since the previous report
  std::size_t trained = 0;          // passes completed in the span
  std::size_t accepted = 0;         // updates passing the filter
  std::size_t failed = 0;           // client failures in the span
  std::size_t aggregations = 0;     // aggregation events in the span
  bool stalled = false;             // no update reached the server
  double accepted_frac = 0.0;
  std::optional<double> mean_relevance;
  double staleness_mean = 0.0;
  std::uint64_t staleness_max = 0;
  std::size_t sgd_steps = 0;
  std::optional<EvalResult> eval;

  std::string to_json() const;
  static RoundReport from_json(const std::string& line);
};

// One line per summary.csv row.
struct RunSummary {
  std::string mode;
  std::uint64_t seed = 0;
  std::size_t rounds = 0;
  double accuracy = 0.0;
  std::optional<double> auc;
  double comm_time_s = 0.0;
  std::size_t updates = 0;          // aggregation events
  std::size_t uploads = 0;          // updates applied into w_g
  double accepted_frac = 0.0;
  double staleness_mean = 0.0;
  std::uint64_t staleness_max = 0;
  std::size_t sgd_steps = 0;
};

const std::vector<std::string>& summary_columns();
std::string summary_row(const RunSummary& s);

// rounds.jsonl (one report per line) and summary.csv (header plus one row
// when `summary` is given). I/O failures throw with the offending path.
void write_reports(const std::filesystem::path& dir, const std::vector<RoundReport>& reports,
                   const std::optional<RunSummary>& summary);

std::vector<RoundReport> read_round_reports(const std::filesystem::path& path);

}  // namespace fedsim
