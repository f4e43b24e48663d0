#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "cfx/guardrails.hpp"
#include "cfx/model.hpp"
#include "cfx/schema.hpp"
#include "cfx/service.hpp"

namespace cfx::testing {

std::string DataPath(const std::string& name);

/// Fresh directory under the system temp dir, removed at exit.
std::filesystem::path TempDir(const std::string& tag);

/// Synthetic cohort and a small trained model shared by the unit tests.
struct World {
  std::filesystem::path dir;
  std::string csv_path;
  std::string weights_path;
  DataDictionary dict;
  Dataset data;
  std::unique_ptr<RiskModel> model;
  std::vector<GuardrailRule> rules;

  ApiConfig Config() const;  // mock provider, bundled script
  ServiceParts Parts() const;
  /// First held-out patient the model calls high risk (after `skip` matches).
  const PatientRecord& HighRiskPatient(std::size_t skip = 0) const;
};

const World& SharedWorld();

}  // namespace cfx::testing
