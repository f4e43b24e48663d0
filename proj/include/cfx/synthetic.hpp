#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfx/schema.hpp"

namespace cfx {

struct SyntheticOptions {
  std::size_t rows = 319796;
  std::uint64_t seed = 7;
  double positive_rate = 0.0856;  // prevalence of HeartDisease = Yes in the public release
};

/// Generates a cohort with the CVD dictionary's 18 columns, realistic
/// marginals, and labels drawn from a known logistic mechanism. Used when
/// the public CSV is unavailable. Requires the bundled feature roster.
/// Returns CSV text lines, header first.
std::vector<std::string> GenerateSyntheticCsv(const DataDictionary& dict,
                                              const SyntheticOptions& options);

void WriteSyntheticCsv(const std::string& path, const DataDictionary& dict,
                       const SyntheticOptions& options);

}  // namespace cfx
