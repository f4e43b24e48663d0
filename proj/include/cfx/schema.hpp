#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace cfx {

enum class FeatureKind { kContinuous, kCategorical, kBinary };
enum class HealthyDirection { kIncrease, kDecrease, kTargetRange, kNone };

std::string_view ToString(FeatureKind kind);
std::string_view ToString(HealthyDirection dir);

struct FeatureSpec {
  std::string name;
  std::string description;
  FeatureKind kind = FeatureKind::kContinuous;
  std::vector<std::string> labels;  // categorical and binary only, in declared order
  double min = 0.0;                 // continuous only
  double max = 0.0;
  std::string unit;
  bool actionable = false;
  HealthyDirection healthy_direction = HealthyDirection::kNone;
  std::optional<std::pair<double, double>> target_range;
  std::string practical_note;

  bool continuous() const { return kind == FeatureKind::kContinuous; }
  double range() const { return max - min; }
  std::optional<int> LabelIndex(std::string_view label) const;

  /// Health rank of a label: higher is healthier. Uses the declared label
  /// order, reversed when healthy_direction is kDecrease.
  int HealthRank(int label_index) const;
};

/// A patient's predictor values in dictionary order. Continuous features
/// hold the number; categorical and binary features hold the label index.
struct PatientRecord {
  std::string id;
  std::vector<double> values;

  bool operator==(const PatientRecord& other) const = default;
};

class DataDictionary {
 public:
  static DataDictionary Load(const std::string& path);
  static DataDictionary Parse(std::string_view text);
  DataDictionary(std::vector<FeatureSpec> features, std::string target_name,
                 std::vector<std::string> target_labels, std::string target_positive_label);
  DataDictionary() = default;

  const std::vector<FeatureSpec>& features() const { return features_; }
  const FeatureSpec& feature(std::size_t i) const { return features_.at(i); }
  std::size_t size() const { return features_.size(); }
  std::optional<std::size_t> IndexOf(std::string_view name) const;
  std::size_t IndexOrThrow(std::string_view name) const;
  const FeatureSpec& Spec(std::string_view name) const { return features_[IndexOrThrow(name)]; }

  const std::string& target_name() const { return target_name_; }
  const std::vector<std::string>& target_labels() const { return target_labels_; }
  const std::string& target_positive_label() const { return target_positive_; }
  /// 1 for the positive label, 0 for the other; nullopt when unknown.
  std::optional<int> TargetClass(std::string_view label) const;
  const std::string& TargetLabel(int cls) const;

  /// Parses a raw text value for feature i. Throws ValidationError when out of spec.
  double ParseValue(std::size_t i, std::string_view text) const;
  std::string FormatValue(std::size_t i, double value) const;
  bool InSpec(std::size_t i, double value) const;

  /// Throws ValidationError naming the first offending feature.
  void ValidateRecord(const PatientRecord& record) const;

  nlohmann::json RecordToJson(const PatientRecord& record) const;
  PatientRecord RecordFromJson(const nlohmann::json& j) const;

  /// Value-map view: feature name to label or number.
  nlohmann::json ValuesToJson(const PatientRecord& record) const;
  PatientRecord RecordFromValues(const nlohmann::json& values, std::string id) const;

  std::vector<std::size_t> ActionableIndices() const;

 private:
  void Validate() const;

  std::vector<FeatureSpec> features_;
  std::string target_name_;
  std::vector<std::string> target_labels_;
  std::string target_positive_;
};

constexpr int kHistogramBins = 20;

struct FeatureStats {
  double min = 0.0;
  double max = 0.0;
  // counts[cls][bin]: continuous features use kHistogramBins equal-width bins
  // over [min, max]; categorical features use one bin per label.
  std::array<std::vector<std::size_t>, 2> counts;
  // quartiles[cls] = {p25, p50, p75}; continuous features only.
  std::array<std::array<double, 3>, 2> quartiles{};
};

struct Dataset {
  std::vector<PatientRecord> records;
  std::vector<int> labels;  // 1 = positive target label
  std::vector<FeatureStats> stats;
  std::size_t source_rows = 0;
  std::size_t dropped_rows = 0;
  std::optional<std::uint64_t> subsample_seed;

  std::size_t size() const { return records.size(); }
  std::array<std::size_t, 2> ClassCounts() const;
  double PositiveFraction() const;
  const PatientRecord* FindById(std::string_view id) const;

  /// Recomputes stats from records; idempotent.
  void RefreshStats(const DataDictionary& dict);
};

struct IngestOptions {
  std::optional<std::size_t> max_rows;
  std::uint64_t seed = 42;
};

Dataset IngestCsv(const std::string& path, const DataDictionary& dict,
                  const IngestOptions& options = {});

/// Linear-interpolation quantile over sorted values.
double Quantile(const std::vector<double>& sorted, double q);

/// Indices of a class-stratified subsample of the given size, ascending.
std::vector<std::size_t> StratifiedSample(const std::vector<int>& labels, std::size_t n,
                                          std::uint64_t seed);

/// Splits indices into (train, held-out) with the held-out fraction taken per class.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> StratifiedSplit(
    const std::vector<int>& labels, double holdout_fraction, std::uint64_t seed);

std::string RenderContextBlock(const DataDictionary& dict, const PatientRecord* record);

}  // namespace cfx
