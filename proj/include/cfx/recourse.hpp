#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/candidates.hpp"
#include "cfx/guardrails.hpp"
#include "cfx/model.hpp"
#include "cfx/schema.hpp"

namespace cfx {

struct RecourseQuery {
  PatientRecord baseline;
  RiskLabel desired_label = RiskLabel::kLowRisk;
  int k = 3;
  std::vector<std::string> frozen;  // non-actionable features are always added
  std::vector<GuardrailRule> extra_constraints;
  std::uint64_t seed = 0;
};

struct SearchConfig {
  int population = 200;
  int generations = 50;
  double mutation_rate = 0.2;
  double elite_fraction = 0.1;
  double proximity_weight = 0.5;
  double diversity_weight = 1.0;
  // Diversity reward saturates at this distance so later slots are not
  // pushed to the edges of the domain.
  double diversity_cap = 0.1;
  double min_pairwise_proximity = 0.02;
};

/// Features a query may change: actionable, not frozen by the query, and
/// not made immutable by an active constraint. Dictionary order.
std::vector<std::size_t> FreeFeatures(const RecourseQuery& query, const DataDictionary& dict);

/// Proximity scope for a query: actionable features not frozen by the query.
std::vector<std::size_t> ProximityScope(const RecourseQuery& query, const DataDictionary& dict);

/// Builds a candidate for `record` with all derived fields filled in.
RecourseCandidate MakeCandidate(PatientRecord record, const PatientRecord& baseline, const RiskModel& model,
                                RiskLabel desired, std::span<const std::size_t> scope);

RecourseSet Generate(const RecourseQuery& query, const RiskModel& model, const SearchConfig& config = {});

/// Reverts changed features to baseline, largest normalised change first,
/// keeping each reversion only if the candidate stays valid.
RecourseCandidate SparsityRevert(const RecourseCandidate& candidate, const PatientRecord& baseline,
                                 const RiskModel& model, std::span<const std::size_t> scope = {});

/// Exhaustive search over a grid of the free features (at most 3). Continuous
/// axes take `grid_steps` evenly spaced values over the permitted interval
/// plus the baseline value; categorical axes take every permitted label.
/// Throws ValidationError for more than 3 free features.
std::optional<RecourseCandidate> BruteForceOracle(const RecourseQuery& query, const RiskModel& model,
                                                  int grid_steps);

nlohmann::json ToJson(const RecourseCandidate& c, const DataDictionary& dict);
nlohmann::json ToJson(const RecourseSet& set, const DataDictionary& dict);

}  // namespace cfx
