#include "fedsim/selection.hpp"

#include <iomanip>
#include <ostream>

#include "fedsim/error.hpp"

namespace fedsim {

std::string to_string(SelectionMode mode) {
  return mode == SelectionMode::weight_sign ? "weight_sign" : "delta_sign";
}

SelectionMode selection_mode_from_string(const std::string& s) {
  if (s == "weight_sign") return SelectionMode::weight_sign;
  if (s == "delta_sign") return SelectionMode::delta_sign;
  throw Error("unknown selection mode '" + s + "'");
}

void SelectionPolicy::validate() const {
  if (!(theta >= 0.0 && theta <= 1.0)) throw Error("selection: theta must lie in [0, 1]");
}

RelevanceScore calculate_relevance(const ParamVector& client, const ParamVector& global,
                                   const ParamVector* global_prev, SelectionMode mode) {
  const std::size_t m = client.size();
  if (global.size() != m) throw Error("relevance: client/global length mismatch");
  if (m == 0) throw Error("relevance: empty parameter vector");
  RelevanceScore s;
  s.total = m;
  if (mode == SelectionMode::weight_sign) {
    for (std::size_t j = 0; j < m; ++j) {
      s.aligned += sign_class(client[j]) == sign_class(global[j]);
    }
  } else {
    if (global_prev == nullptr) throw Error("relevance: delta_sign mode needs the previous global model");
    if (global_prev->size() != m) throw Error("relevance: previous global length mismatch");
    const auto& prev = *global_prev;
    for (std::size_t j = 0; j < m; ++j) {
      s.aligned += sign_class(client[j] - global[j]) == sign_class(global[j] - prev[j]);
    }
  }
  s.ratio = static_cast<double>(s.aligned) / static_cast<double>(s.total);
  return s;
}

FilterResult filter_update(const ParamVector& update, const ParamVector& global,
                           const ParamVector* global_prev, const SelectionPolicy& policy) {
  FilterResult r;
  r.score = calculate_relevance(update, global, global_prev, policy.mode);
  r.decision = r.score.ratio >= policy.theta ? Decision::accept : Decision::reject;
  return r;
}

std::vector<ThresholdRow> sweep_threshold(const std::function<ThresholdRow(double)>& run,
                                          const std::vector<double>& thetas) {
  std::vector<ThresholdRow> rows;
  rows.reserve(thetas.size());
  for (double t : thetas) {
    if (!(t >= 0.0 && t <= 1.0)) throw Error("sweep_threshold: theta outside [0, 1]");
    ThresholdRow row = run(t);
    row.theta = t;
    rows.push_back(row);
  }
  return rows;
}

void write_threshold_csv(std::ostream& out, const std::vector<ThresholdRow>& rows) {
  out << "theta,accuracy,auc,comm_time_s,accepted_frac\n";
  out << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.theta << ',' << r.accuracy << ',' << r.auc << ',' << r.comm_time_s << ','
        << r.accepted_frac << '\n';
  }
}

}  // namespace fedsim
