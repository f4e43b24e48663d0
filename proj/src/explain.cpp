#include "cfx/explain.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "cfx/errors.hpp"

namespace cfx {

IdealRange ComputeIdealRange(const DataDictionary& dict, std::size_t feature, const Dataset& data) {
  const auto& spec = dict.feature(feature);
  if (data.stats.size() != dict.size()) throw ValidationError("dataset stats not computed");
  if (data.ClassCounts()[0] == 0) {
    throw ValidationError(fmt::format("ideal range for '{}': no low-risk records", spec.name));
  }
  const auto& st = data.stats[feature];
  IdealRange r;
  r.continuous = spec.continuous();
  if (!spec.continuous()) {
    const auto& counts = st.counts[0];
    r.label = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    return r;
  }
  r.lo = st.quartiles[0][0];
  r.hi = st.quartiles[0][2];
  if (spec.target_range) {
    const auto [tlo, thi] = *spec.target_range;
    const double lo = std::max(r.lo, tlo);
    const double hi = std::min(r.hi, thi);
    if (lo <= hi) {
      r.lo = lo;
      r.hi = hi;
    } else {
      r.lo = tlo;
      r.hi = thi;
    }
  }
  return r;
}

namespace {

std::string DeltaText(const FeatureSpec& spec, const IdealRange& ideal, double current) {
  if (!spec.continuous()) {
    const auto& cur = spec.labels.at(static_cast<std::size_t>(current));
    const auto& want = spec.labels.at(static_cast<std::size_t>(ideal.label));
    if (current == ideal.label) return fmt::format("{} is {}, the most common value among low-risk patients", spec.name, cur);
    return fmt::format("{} is {}; most low-risk patients report {}", spec.name, cur, want);
  }
  const std::string unit = spec.unit.empty() ? "" : " " + spec.unit;
  if (current > ideal.hi) {
    return fmt::format("{} is {:.1f}{} above the low-risk range [{:.1f}, {:.1f}]", spec.name, current - ideal.hi,
                       unit, ideal.lo, ideal.hi);
  }
  if (current < ideal.lo) {
    return fmt::format("{} is {:.1f}{} below the low-risk range [{:.1f}, {:.1f}]", spec.name, ideal.lo - current,
                       unit, ideal.lo, ideal.hi);
  }
  return fmt::format("{} is within the low-risk range [{:.1f}, {:.1f}]", spec.name, ideal.lo, ideal.hi);
}

}  // namespace

std::vector<FeaturePanel> BuildPanels(const PatientRecord& record, const Dataset& data, const DataDictionary& dict) {
  std::vector<FeaturePanel> panels;
  panels.reserve(dict.size());
  for (std::size_t f = 0; f < dict.size(); ++f) {
    const auto& spec = dict.feature(f);
    const auto& st = data.stats.at(f);
    FeaturePanel p;
    p.feature = spec.name;
    p.continuous = spec.continuous();
    p.actionable = spec.actionable;
    p.counts = st.counts;
    if (spec.continuous()) {
      for (int b = 0; b <= kHistogramBins; ++b) {
        p.bin_edges.push_back(st.min + (st.max - st.min) * b / kHistogramBins);
      }
    } else {
      p.bin_labels = spec.labels;
    }
    p.ideal = ComputeIdealRange(dict, f, data);
    p.current = record.values.at(f);
    p.warning = spec.actionable && !p.ideal.Contains(p.current);
    p.delta_text = DeltaText(spec, p.ideal, p.current);
    panels.push_back(std::move(p));
  }
  return panels;
}

void RankImportance(std::vector<ImportanceEntry>& entries) {
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.delta_probability > b.delta_probability; });
  for (std::size_t i = 0; i < entries.size(); ++i) entries[i].rank = static_cast<int>(i + 1);
}

std::vector<ImportanceEntry> LocalImportance(const PatientRecord& record, const RiskModel& model,
                                             const Dataset& data, const DataDictionary& dict) {
  const double p0 = model.Probability(record);
  std::vector<ImportanceEntry> out;
  for (auto f : dict.ActionableIndices()) {
    const auto ideal = ComputeIdealRange(dict, f, data);
    PatientRecord moved = record;
    moved.values[f] = ideal.Representative();
    out.push_back({dict.feature(f).name, p0 - model.Probability(moved), 0});
  }
  RankImportance(out);
  return out;
}

ScenarioRecord::ScenarioRecord(PatientRecord baseline, const DataDictionary& dict)
    : baseline_(std::move(baseline)), effective_(baseline_) {
  dict.ValidateRecord(baseline_);
}

void ScenarioRecord::Set(std::size_t feature, double value, const DataDictionary& dict) {
  const auto& spec = dict.feature(feature);
  if (!spec.actionable) {
    throw ValidationError(fmt::format("'{}' is not actionable and cannot be overridden", spec.name));
  }
  if (!dict.InSpec(feature, value)) {
    throw ValidationError(fmt::format("override for '{}' is out of range", spec.name));
  }
  if (value == baseline_.values[feature]) {
    overrides_.erase(feature);
  } else {
    overrides_[feature] = value;
  }
  effective_.values[feature] = value;
}

void ScenarioRecord::Apply(const nlohmann::json& overrides, const DataDictionary& dict) {
  if (!overrides.is_object()) throw ValidationError("overrides must be an object");
  std::vector<std::pair<std::size_t, double>> parsed;
  for (auto it = overrides.begin(); it != overrides.end(); ++it) {
    const auto f = dict.IndexOrThrow(it.key());
    const auto& spec = dict.feature(f);
    if (!spec.actionable) {
      throw ValidationError(fmt::format("'{}' is not actionable and cannot be overridden", spec.name));
    }
    double v = 0.0;
    if (it->is_number()) {
      if (!spec.continuous()) throw ValidationError(fmt::format("'{}' expects a label", spec.name));
      v = it->get<double>();
      if (!dict.InSpec(f, v)) {
        throw ValidationError(fmt::format("override for '{}': {} outside [{}, {}]", spec.name, v, spec.min, spec.max));
      }
    } else if (it->is_string()) {
      v = dict.ParseValue(f, it->get<std::string>());
    } else {
      throw ValidationError(fmt::format("override for '{}' must be a number or label", spec.name));
    }
    parsed.emplace_back(f, v);
  }
  for (auto [f, v] : parsed) Set(f, v, dict);
}

void ScenarioRecord::Reset() {
  overrides_.clear();
  effective_ = baseline_;
}

nlohmann::json ScenarioRecord::OverridesJson(const DataDictionary& dict) const {
  nlohmann::json j = nlohmann::json::object();
  for (auto [f, v] : overrides_) {
    if (dict.feature(f).continuous()) {
      j[dict.feature(f).name] = v;
    } else {
      j[dict.feature(f).name] = dict.FormatValue(f, v);
    }
  }
  return j;
}

WhatIfResult WhatIf(const ScenarioRecord& scenario, const RiskModel& model) {
  WhatIfResult r;
  r.before = model.Predict(scenario.baseline());
  r.after = model.Predict(scenario.effective());
  r.changed = DiffRecords(scenario.baseline(), scenario.effective(), model.dictionary());
  return r;
}

nlohmann::json ToJson(const Prediction& p) {
  return {{"probability", p.probability}, {"risk_score", p.risk_score}, {"label", ToString(p.label)}};
}

nlohmann::json ToJson(const FeaturePanel& panel, const DataDictionary& dict) {
  const auto f = dict.IndexOrThrow(panel.feature);
  nlohmann::json ideal;
  if (panel.continuous) {
    ideal = {{"lo", panel.ideal.lo}, {"hi", panel.ideal.hi}};
  } else {
    ideal = {{"label", dict.FormatValue(f, panel.ideal.label)}};
  }
  nlohmann::json j = {{"feature", panel.feature},
                      {"kind", panel.continuous ? "continuous" : "categorical"},
                      {"actionable", panel.actionable},
                      {"bins", {{"low_risk", panel.counts[0]}, {"high_risk", panel.counts[1]}}},
                      {"ideal_range", ideal},
                      {"warning", panel.warning},
                      {"delta_text", panel.delta_text}};
  if (panel.continuous) {
    j["bin_edges"] = panel.bin_edges;
    j["current"] = panel.current;
  } else {
    j["bin_labels"] = panel.bin_labels;
    j["current"] = dict.FormatValue(f, panel.current);
  }
  return j;
}

nlohmann::json ToJson(const std::vector<ImportanceEntry>& entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries) {
    arr.push_back({{"feature", e.feature}, {"delta_probability", e.delta_probability}, {"rank", e.rank}});
  }
  return arr;
}

nlohmann::json ToJson(const WhatIfResult& r, const DataDictionary& dict) {
  nlohmann::json changed = nlohmann::json::array();
  for (const auto& c : r.changed) {
    changed.push_back({{"feature", c.name},
                       {"from", dict.FormatValue(c.feature, c.old_value)},
                       {"to", dict.FormatValue(c.feature, c.new_value)}});
  }
  return {{"before", ToJson(r.before)}, {"after", ToJson(r.after)}, {"changed", changed}};
}

}  // namespace cfx
