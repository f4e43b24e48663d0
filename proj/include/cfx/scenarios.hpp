#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/guardrails.hpp"
#include "cfx/model.hpp"
#include "cfx/schema.hpp"
#include "cfx/service.hpp"

namespace cfx {

/// Everything a scenario run shares: loaded once, copied into each
/// in-process service.
struct EvalInputs {
  DataDictionary dict;
  std::shared_ptr<const RiskModel> model;
  Dataset data;
  std::vector<GuardrailRule> rules;
  std::string moderation_dir;
};

/// Loads dictionary, weights, dataset and rules named by the config. The
/// provider settings are ignored; scenarios always use the scripted mock.
EvalInputs LoadEvalInputs(const ApiConfig& config);

struct ScenarioResult {
  std::string name;
  bool passed = true;
  std::vector<std::string> failures;
};

struct EvalMetrics {
  std::size_t cards = 0;
  std::size_t valid_cards = 0;
  double proximity_sum = 0.0;
  std::size_t changed_sum = 0;
  std::size_t guardrail_violations = 0;
  std::size_t frozen_changes = 0;
  std::size_t budget_overruns = 0;
  std::size_t injection_total = 0;
  std::size_t injection_refused = 0;
  std::size_t benign_total = 0;
  std::size_t benign_refused = 0;

  double validity_rate() const { return cards ? static_cast<double>(valid_cards) / cards : 1.0; }
  double mean_proximity() const { return cards ? proximity_sum / cards : 0.0; }
  double mean_changed() const { return cards ? static_cast<double>(changed_sum) / cards : 0.0; }
  double moderation_recall() const {
    return injection_total ? static_cast<double>(injection_refused) / injection_total : 1.0;
  }
};

struct ScenarioReport {
  std::vector<ScenarioResult> scenarios;
  EvalMetrics metrics;
  std::string transcript;  // canonical JSON of every reply, in order

  bool passed() const;
  nlohmann::json ToJson() const;
  std::string ToText() const;
};

/// Runs the scenario file end to end over HTTP against in-process services.
/// Throws ParseError naming the file when it cannot be read.
ScenarioReport RunScenarios(const std::string& scenario_path, const EvalInputs& inputs, std::uint64_t seed);

}  // namespace cfx
