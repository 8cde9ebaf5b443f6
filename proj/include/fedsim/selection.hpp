#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fedsim/model.hpp"

namespace fedsim {

struct RelevanceScore {
  std::size_t aligned = 0;
  std::size_t total = 0;
  double ratio = 0.0;

  bool operator==(const RelevanceScore&) const = default;
};

enum class SelectionMode {
  weight_sign,  // sign(w_client) vs sign(w_global)
  delta_sign,   // sign(w_client - w_global) vs sign(w_global - w_global_prev)
};

std::string to_string(SelectionMode mode);
SelectionMode selection_mode_from_string(const std::string& s);

struct SelectionPolicy {
  double theta = 0.65;
  SelectionMode mode = SelectionMode::weight_sign;

  void validate() const;
};

// Three-way sign; exact zero is its own class.
constexpr int sign_class(double v) noexcept { return (v > 0.0) - (v < 0.0); }

RelevanceScore calculate_relevance(const ParamVector& client, const ParamVector& global,
                                   const ParamVector* global_prev, SelectionMode mode);

enum class Decision { accept, reject };

struct FilterResult {
  Decision decision = Decision::reject;
  RelevanceScore score;
};

// Accepts iff ratio >= theta.
FilterResult filter_update(const ParamVector& update, const ParamVector& global,
                           const ParamVector* global_prev, const SelectionPolicy& policy);

struct ThresholdRow {
  double theta = 0.0;
  double accuracy = 0.0;
  double auc = 0.0;
  double comm_time_s = 0.0;
  double accepted_frac = 0.0;
};

// One experiment per theta; `run` owns seeding so all thetas share seeds.
std::vector<ThresholdRow> sweep_threshold(const std::function<ThresholdRow(double)>& run,
                                          const std::vector<double>& thetas);

// Columns: theta,accuracy,auc,comm_time_s,accepted_frac
void write_threshold_csv(std::ostream& out, const std::vector<ThresholdRow>& rows);

}  // namespace fedsim
