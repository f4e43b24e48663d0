#include "cfx/candidates.hpp"

#include <cmath>

namespace cfx {

double Proximity(const PatientRecord& a, const PatientRecord& b, const DataDictionary& dict,
                 std::span<const std::size_t> scope) {
  std::size_t n_cont = 0, n_cat = 0;
  double cont = 0.0, cat = 0.0;
  auto add = [&](std::size_t f) {
    const auto& s = dict.feature(f);
    if (s.continuous()) {
      ++n_cont;
      cont += std::abs(a.values[f] - b.values[f]) / s.range();
    } else {
      ++n_cat;
      cat += a.values[f] != b.values[f] ? 1.0 : 0.0;
    }
  };
  if (scope.empty()) {
    for (std::size_t f = 0; f < dict.size(); ++f) add(f);
  } else {
    for (auto f : scope) add(f);
  }
  return (n_cont ? cont / static_cast<double>(n_cont) : 0.0) + (n_cat ? cat / static_cast<double>(n_cat) : 0.0);
}

double MeanPairwiseProximity(const std::vector<RecourseCandidate>& candidates, const DataDictionary& dict,
                             std::span<const std::size_t> scope) {
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    for (std::size_t j = i + 1; j < candidates.size(); ++j) {
      sum += Proximity(candidates[i].record, candidates[j].record, dict, scope);
      ++pairs;
    }
  }
  return pairs ? sum / static_cast<double>(pairs) : 0.0;
}

std::vector<FeatureChange> DiffRecords(const PatientRecord& baseline, const PatientRecord& record,
                                       const DataDictionary& dict) {
  std::vector<FeatureChange> out;
  for (std::size_t i = 0; i < dict.size(); ++i) {
    if (baseline.values[i] != record.values[i]) {
      out.push_back({i, dict.feature(i).name, baseline.values[i], record.values[i]});
    }
  }
  return out;
}

}  // namespace cfx
