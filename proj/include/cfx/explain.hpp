#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/candidates.hpp"
#include "cfx/model.hpp"
#include "cfx/schema.hpp"

namespace cfx {

/// Low-risk reference for one feature: an interval for continuous features,
/// a label index otherwise.
struct IdealRange {
  bool continuous = true;
  double lo = 0.0;
  double hi = 0.0;
  int label = 0;

  bool Contains(double value) const { return continuous ? value >= lo && value <= hi : value == label; }
  double Representative() const { return continuous ? 0.5 * (lo + hi) : label; }
};

/// Interquartile range of the negative class (intersected with the feature's
/// target_range when one is declared), or the negative-class modal label.
/// When the quartiles and the target band do not overlap, the band wins.
IdealRange ComputeIdealRange(const DataDictionary& dict, std::size_t feature, const Dataset& data);

struct FeaturePanel {
  std::string feature;
  bool continuous = true;
  bool actionable = false;
  std::vector<double> bin_edges;  // kHistogramBins + 1 edges; empty for categorical
  std::vector<std::string> bin_labels;  // categorical only
  std::array<std::vector<std::size_t>, 2> counts;  // [negative, positive]
  IdealRange ideal;
  double current = 0.0;
  bool warning = false;
  std::string delta_text;
};

std::vector<FeaturePanel> BuildPanels(const PatientRecord& record, const Dataset& data, const DataDictionary& dict);

struct ImportanceEntry {
  std::string feature;
  double delta_probability = 0.0;
  int rank = 0;
};

/// Stable sort by descending delta, then 1-based ranks.
void RankImportance(std::vector<ImportanceEntry>& entries);

/// Drop in risk probability when each actionable feature alone is moved to
/// its ideal value (interval midpoint or ideal label).
std::vector<ImportanceEntry> LocalImportance(const PatientRecord& record, const RiskModel& model,
                                             const Dataset& data, const DataDictionary& dict);

/// Baseline plus what-if overrides; overrides are restricted to actionable
/// features and validated against the dictionary.
class ScenarioRecord {
 public:
  ScenarioRecord() = default;
  ScenarioRecord(PatientRecord baseline, const DataDictionary& dict);

  /// Merges overrides given as {feature: label or number}. Throws
  /// ValidationError on non-actionable features or out-of-spec values; the
  /// scenario is unchanged on error.
  void Apply(const nlohmann::json& overrides, const DataDictionary& dict);
  void Set(std::size_t feature, double value, const DataDictionary& dict);
  void Reset();

  const PatientRecord& baseline() const { return baseline_; }
  const PatientRecord& effective() const { return effective_; }
  const std::map<std::size_t, double>& overrides() const { return overrides_; }
  nlohmann::json OverridesJson(const DataDictionary& dict) const;

 private:
  PatientRecord baseline_;
  PatientRecord effective_;
  std::map<std::size_t, double> overrides_;
};

struct WhatIfResult {
  Prediction before;
  Prediction after;
  std::vector<FeatureChange> changed;
};

WhatIfResult WhatIf(const ScenarioRecord& scenario, const RiskModel& model);

nlohmann::json ToJson(const Prediction& p);
nlohmann::json ToJson(const FeaturePanel& panel, const DataDictionary& dict);
nlohmann::json ToJson(const std::vector<ImportanceEntry>& entries);
nlohmann::json ToJson(const WhatIfResult& r, const DataDictionary& dict);

}  // namespace cfx
