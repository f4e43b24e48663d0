#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cfx/model.hpp"
#include "cfx/schema.hpp"

namespace cfx {

struct FeatureChange {
  std::size_t feature = 0;
  std::string name;
  double old_value = 0.0;
  double new_value = 0.0;

  bool operator==(const FeatureChange&) const = default;
};

struct RecourseCandidate {
  PatientRecord record;
  bool valid = false;
  double proximity = 0.0;
  std::vector<FeatureChange> changed;  // dictionary order
  Prediction prediction;
};

struct SearchStats {
  int generations = 0;
  std::size_t evaluations = 0;
  std::uint64_t seed = 0;
};

struct RecourseSet {
  std::vector<RecourseCandidate> candidates;
  double diversity = 0.0;  // mean pairwise proximity
  SearchStats stats;
};

/// Normalised distance between two records: mean range-scaled |delta| over
/// continuous features plus the mismatch share over categorical and binary
/// features. Sums run over `scope` (all features when empty); a kind absent
/// from the scope contributes 0.
double Proximity(const PatientRecord& a, const PatientRecord& b, const DataDictionary& dict,
                 std::span<const std::size_t> scope = {});

/// Mean Proximity over all unordered pairs; 0 for fewer than two candidates.
double MeanPairwiseProximity(const std::vector<RecourseCandidate>& candidates, const DataDictionary& dict,
                             std::span<const std::size_t> scope = {});

/// Coordinates where `record` differs from `baseline`, in dictionary order.
std::vector<FeatureChange> DiffRecords(const PatientRecord& baseline, const PatientRecord& record,
                                       const DataDictionary& dict);

}  // namespace cfx
