#include "fedsim/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "fedsim/error.hpp"
#include "fedsim/format.hpp"

namespace fedsim {

namespace {

void check_labels(std::span<const double> scores, std::span<const double> labels) {
  if (scores.empty()) throw Error("metrics: empty input");
  if (scores.size() != labels.size()) throw Error("metrics: scores and labels differ in length");
  for (double y : labels) {
    if (y != 0.0 && y != 1.0) throw Error("metrics: labels must be 0 or 1");
  }
}

// P(U >= u) and P(U <= u) under H0 by enumerating the permutation
// distribution of the rank sum: counts of size-k subsets of the pooled
// doubled midranks per subset sum, k being the smaller sample. Ties keep
// their midranks, so the distribution is conditional on the observed ties.
std::pair<double, double> exact_tails(const std::vector<double>& ranks, std::size_t n1, std::size_t n2,
                                      double u) {
  std::vector<std::size_t> r2(ranks.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) total += r2[i] = static_cast<std::size_t>(std::llround(2.0 * ranks[i]));
  const std::size_t k = std::min(n1, n2);
  // ways[j][s]: subsets of size j with doubled rank sum s.
  std::vector<std::vector<double>> ways(k + 1, std::vector<double>(total + 1, 0.0));
  ways[0][0] = 1.0;
  for (std::size_t i = 0; i < r2.size(); ++i) {
    for (std::size_t j = std::min(k, i + 1); j >= 1; --j) {
      auto& dst = ways[j];
      const auto& src = ways[j - 1];
      for (std::size_t sum = total; sum >= r2[i]; --sum) dst[sum] += src[sum - r2[i]];
    }
  }
  const auto& dist = ways[k];
  const double count = std::accumulate(dist.begin(), dist.end(), 0.0);
  // Doubled rank sum of sample A for the observed U, as a threshold on the enumerated sample.
  const double n1d = static_cast<double>(n1);
  const double ra2 = 2.0 * (u + n1d * (n1d + 1.0) / 2.0);
  double ge = 0.0, le = 0.0;
  for (std::size_t sum = 0; sum <= total; ++sum) {
    if (dist[sum] == 0.0) continue;
    // Rank sum of A implied by this subset.
    const double a2 = k == n1 ? static_cast<double>(sum) : static_cast<double>(total) - static_cast<double>(sum);
    if (a2 >= ra2 - 1e-9) ge += dist[sum];
    if (a2 <= ra2 + 1e-9) le += dist[sum];
  }
  return {std::min(ge / count, 1.0), std::min(le / count, 1.0)};
}

constexpr std::size_t kExactLimit = 400;

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

double clamp_p(double p) { return std::clamp(p, std::numeric_limits<double>::min(), 1.0); }

}  // namespace

double accuracy(std::span<const double> scores, std::span<const double> labels, double threshold) {
  check_labels(scores, labels);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double pred = scores[i] >= threshold ? 1.0 : 0.0;
    if (pred == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

std::vector<double> midranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double auc_roc(std::span<const double> scores, std::span<const double> labels) {
  check_labels(scores, labels);
  for (double s : scores) {
    if (std::isnan(s)) throw Error("auc_roc: NaN score");
  }
  const auto ranks = midranks(scores);
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1.0) {
      rank_sum += ranks[i];
      ++n_pos;
    }
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error("auc_roc: both classes must be present");
  const double np = static_cast<double>(n_pos);
  const double u_pos = rank_sum - np * (np + 1.0) / 2.0;
  return u_pos / (np * static_cast<double>(n_neg));
}

EvalResult evaluate_scores(std::span<const double> scores, std::span<const double> labels, double threshold) {
  EvalResult r;
  r.threshold = threshold;
  r.accuracy = accuracy(scores, labels, threshold);
  r.n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1.0));
  r.n_neg = labels.size() - r.n_pos;
  if (r.n_pos > 0 && r.n_neg > 0) r.auc = auc_roc(scores, labels);
  return r;
}

std::string to_string(Alternative a) { return a == Alternative::greater ? "greater" : "two_sided"; }

Alternative alternative_from_string(const std::string& s) {
  if (s == "two_sided" || s == "two-sided") return Alternative::two_sided;
  if (s == "greater") return Alternative::greater;
  throw Error("unknown alternative '" + s + "' (expected two_sided or greater)");
}

std::string to_string(UMethod m) { return m == UMethod::exact ? "exact" : "normal_approx"; }

UTestResult mann_whitney_u(std::span<const double> a, std::span<const double> b, Alternative alt,
                           std::optional<UMethod> method) {
  if (a.empty() || b.empty()) throw Error("mann_whitney_u: both samples need at least one value");
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  for (double v : pooled) {
    if (std::isnan(v)) throw Error("mann_whitney_u: NaN value");
  }
  const auto ranks = midranks(pooled);
  const double n1 = static_cast<double>(a.size());
  const double n2 = static_cast<double>(b.size());
  const double rank_sum_a = std::accumulate(ranks.begin(), ranks.begin() + static_cast<std::ptrdiff_t>(a.size()), 0.0);

  UTestResult res;
  res.n1 = a.size();
  res.n2 = b.size();
  res.alternative = alt;
  res.u_statistic = rank_sum_a - n1 * (n1 + 1.0) / 2.0;

  std::vector<double> sorted = pooled;
  std::sort(sorted.begin(), sorted.end());
  double tie_term = 0.0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }

  const UMethod chosen = method.value_or(res.n1 * res.n2 <= kExactLimit ? UMethod::exact : UMethod::normal_approx);
  if (chosen == UMethod::exact) {
    if (res.n1 * res.n2 > kExactLimit) throw Error("mann_whitney_u: exact method limited to n1 * n2 <= 400");
    res.method = UMethod::exact;
    const auto [ge, le] = exact_tails(ranks, res.n1, res.n2, res.u_statistic);
    res.p_value = alt == Alternative::greater ? ge : std::min(1.0, 2.0 * std::min(ge, le));
    res.p_value = clamp_p(res.p_value);
    return res;
  }

  res.method = UMethod::normal_approx;
  const double n = n1 + n2;
  const double mu = n1 * n2 / 2.0;
  const double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (!(var > 0.0)) {
    res.p_value = 1.0;
    return res;
  }
  const double sd = std::sqrt(var);
  if (alt == Alternative::greater) {
    res.p_value = normal_sf((res.u_statistic - mu - 0.5) / sd);
  } else {
    const double z = std::max(std::abs(res.u_statistic - mu) - 0.5, 0.0) / sd;
    res.p_value = std::min(1.0, 2.0 * normal_sf(z));
  }
  res.p_value = clamp_p(res.p_value);
  return res;
}

// ---------------------------------------------------------------------------

std::string RoundReport::to_json() const {
  nlohmann::ordered_json j;
  j["round"] = round;
  j["t_s"] = t_s;
  j["round_time_s"] = round_time_s;
  j["trained"] = trained;
  j["accepted"] = accepted;
  j["failed"] = failed;
  j["aggregations"] = aggregations;
  j["stalled"] = stalled;
  j["accepted_frac"] = accepted_frac;
  j["mean_relevance"] = mean_relevance ? nlohmann::ordered_json(*mean_relevance) : nlohmann::ordered_json();
  j["staleness_mean"] = staleness_mean;
  j["staleness_max"] = staleness_max;
  j["sgd_steps"] = sgd_steps;
  if (eval) {
    j["accuracy"] = eval->accuracy;
    j["auc"] = eval->auc ? nlohmann::ordered_json(*eval->auc) : nlohmann::ordered_json();
    j["n_pos"] = eval->n_pos;
    j["n_neg"] = eval->n_neg;
  }
  return j.dump();
}

RoundReport RoundReport::from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  RoundReport r;
  r.round = j.at("round").get<std::uint64_t>();
  r.t_s = j.at("t_s").get<double>();
  r.round_time_s = j.at("round_time_s").get<double>();
  r.trained = j.at("trained").get<std::size_t>();
  r.accepted = j.at("accepted").get<std::size_t>();
  r.failed = j.at("failed").get<std::size_t>();
  r.aggregations = j.at("aggregations").get<std::size_t>();
  r.stalled = j.at("stalled").get<bool>();
  r.accepted_frac = j.at("accepted_frac").get<double>();
  if (!j.at("mean_relevance").is_null()) r.mean_relevance = j["mean_relevance"].get<double>();
  r.staleness_mean = j.at("staleness_mean").get<double>();
  r.staleness_max = j.at("staleness_max").get<std::uint64_t>();
  r.sgd_steps = j.at("sgd_steps").get<std::size_t>();
  if (j.contains("accuracy")) {
    EvalResult e;
    e.accuracy = j["accuracy"].get<double>();
    if (!j.at("auc").is_null()) e.auc = j["auc"].get<double>();
    e.n_pos = j.at("n_pos").get<std::size_t>();
    e.n_neg = j.at("n_neg").get<std::size_t>();
    r.eval = e;
  }
  return r;
}

const std::vector<std::string>& summary_columns() {
  static const std::vector<std::string> cols{
      "mode",     "seed",          "rounds",          "accuracy",       "auc",          "comm_time_s",
      "updates",  "uploads",       "accepted_frac",   "staleness_mean", "staleness_max", "sgd_steps"};
  return cols;
}

std::string summary_row(const RunSummary& s) {
  std::ostringstream os;
  os << s.mode << ',' << s.seed << ',' << s.rounds << ',' << format_double(s.accuracy) << ','
     << (s.auc ? format_double(*s.auc) : std::string()) << ',' << format_double(s.comm_time_s) << ','
     << s.updates << ',' << s.uploads << ',' << format_double(s.accepted_frac) << ','
     << format_double(s.staleness_mean) << ',' << s.staleness_max << ',' << s.sgd_steps;
  return os.str();
}

void write_reports(const std::filesystem::path& dir, const std::vector<RoundReport>& reports,
                   const std::optional<RunSummary>& summary) {
  std::filesystem::create_directories(dir);
  const auto rounds_path = dir / "rounds.jsonl";
  std::ofstream rounds(rounds_path, std::ios::binary | std::ios::trunc);
  if (!rounds) throw Error("cannot write " + rounds_path.string());
  for (const auto& r : reports) rounds << r.to_json() << '\n';
  rounds.flush();
  if (!rounds) throw Error("write failed: " + rounds_path.string());

  const auto summary_path = dir / "summary.csv";
  std::ofstream csv(summary_path, std::ios::binary | std::ios::trunc);
  if (!csv) throw Error("cannot write " + summary_path.string());
  const auto& cols = summary_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) csv << (i ? "," : "") << cols[i];
  csv << '\n';
  if (summary) csv << summary_row(*summary) << '\n';
  csv.flush();
  if (!csv) throw Error("write failed: " + summary_path.string());
}

std::vector<RoundReport> read_round_reports(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<RoundReport> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(RoundReport::from_json(line));
  }
  return out;
}

}  // namespace fedsim
