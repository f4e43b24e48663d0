#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfx/schema.hpp"

namespace cfx {

/// Maps a record onto a fixed-width real vector: continuous features are
/// min-max scaled to [0, 1] over the dictionary range, categorical and
/// binary features are one-hot.
class Encoder {
 public:
  struct Slot {
    std::size_t feature = 0;
    std::size_t offset = 0;
    std::size_t width = 1;
  };

  explicit Encoder(const DataDictionary& dict);

  std::size_t width() const { return width_; }
  const std::vector<Slot>& slots() const { return slots_; }
  const DataDictionary& dictionary() const { return dict_; }

  void Encode(const PatientRecord& record, std::span<double> out) const;
  std::vector<double> Encode(const PatientRecord& record) const;
  PatientRecord Decode(std::span<const double> encoded, std::string id = {}) const;

  /// Slot index for "Feature" (continuous) or "Feature=Label" (one-hot).
  std::size_t SlotFor(std::string_view key) const;

 private:
  DataDictionary dict_;
  std::vector<Slot> slots_;
  std::size_t width_ = 0;
};

enum class Architecture { kLogistic, kMlp };
enum class RiskLabel { kLowRisk, kHighRisk };

std::string_view ToString(Architecture a);
std::string_view ToString(RiskLabel l);
std::optional<RiskLabel> ParseRiskLabel(std::string_view s);

struct Prediction {
  double probability = 0.0;
  int risk_score = 0;
  RiskLabel label = RiskLabel::kLowRisk;

  bool operator==(const Prediction&) const = default;
};

/// round(100 p) and the threshold rule.
Prediction MakePrediction(double probability, double threshold);

struct EvalReport {
  double accuracy = 0.0;
  std::optional<double> auc;  // nullopt when only one class is present
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::size_t n() const { return tp + tn + fp + fn; }
};

struct TrainConfig {
  Architecture architecture = Architecture::kMlp;
  int hidden_width = 32;
  int epochs = 10;
  double learning_rate = 0.005;
  int batch_size = 64;
  std::uint64_t seed = 42;
  bool class_weighting = false;
  double holdout_fraction = 0.2;
};

class RiskModel {
 public:
  struct Layer {
    std::size_t rows = 0;  // outputs
    std::size_t cols = 0;  // inputs
    std::size_t offset = 0;  // into params; weights row-major then bias
    std::size_t size() const { return rows * cols + rows; }
  };

  RiskModel(const DataDictionary& dict, Architecture arch, int hidden_width);

  /// Logistic model with explicit coefficients keyed as in Encoder::SlotFor.
  static RiskModel Logistic(const DataDictionary& dict, double bias,
                            const std::map<std::string, double>& weights);

  static RiskModel Load(const std::string& path, const DataDictionary& dict);
  static RiskModel Parse(std::string_view text, const DataDictionary& dict);
  std::string Serialize() const;
  void Save(const std::string& path) const;

  Architecture architecture() const { return arch_; }
  const Encoder& encoder() const { return encoder_; }
  const DataDictionary& dictionary() const { return encoder_.dictionary(); }
  const std::vector<Layer>& layers() const { return layers_; }
  std::span<const double> params() const { return params_; }
  std::span<double> mutable_params() { return params_; }
  double threshold() const { return threshold_; }
  const EvalReport& metrics() const { return metrics_; }
  void set_metrics(const EvalReport& m) { metrics_ = m; }
  std::uint64_t split_seed() const { return split_seed_; }
  void set_split_seed(std::uint64_t s) { split_seed_ = s; }

  double ProbabilityEncoded(std::span<const double> x) const;
  /// Unchecked probability for a record already known to be valid.
  double Probability(const PatientRecord& record) const;
  /// Validates the record against the dictionary first.
  Prediction Predict(const PatientRecord& record) const;
  Prediction FromProbability(double p) const { return MakePrediction(p, threshold_); }

  /// Mean weighted cross-entropy over the batch and its gradient with
  /// respect to params(). `grad` is resized to params().size().
  double LossAndGradient(std::span<const double> rows, std::span<const int> labels,
                         std::span<const double> weights, std::vector<double>& grad) const;
  double Loss(std::span<const double> rows, std::span<const int> labels,
              std::span<const double> weights) const;

 private:
  double Logit(std::span<const double> x, std::vector<double>* hidden) const;

  Encoder encoder_;
  Architecture arch_;
  std::vector<Layer> layers_;
  std::vector<double> params_;
  double threshold_ = 0.5;
  EvalReport metrics_;
  std::uint64_t split_seed_ = 42;
};

RiskModel Train(const Dataset& data, const DataDictionary& dict, const TrainConfig& config);

EvalReport Evaluate(const RiskModel& model, const Dataset& data);
EvalReport Evaluate(const RiskModel& model, const Dataset& data, std::span<const std::size_t> indices);

/// Tie-corrected rank statistic. nullopt when one class is absent.
std::optional<double> RankAuc(std::span<const double> scores, std::span<const int> labels);

/// Held-out indices for a dataset as produced by Train with the same seed.
std::vector<std::size_t> HeldOutIndices(const Dataset& data, std::uint64_t seed, double fraction = 0.2);

}  // namespace cfx
