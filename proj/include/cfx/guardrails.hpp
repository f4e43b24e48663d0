#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfx/candidates.hpp"
#include "cfx/schema.hpp"

namespace cfx {

enum class RuleKind { kImmutable, kNoDecrease, kNoIncrease, kMinBound, kMaxBound };
enum class CompareOp { kLt, kLe, kGt, kGe, kEq, kNe };

std::string_view ToString(RuleKind kind);
std::string_view ToString(CompareOp op);

/// Comparison of one baseline feature against a constant. Categorical
/// constants are label indices; ordering ops compare by declared label order.
struct Condition {
  std::string feature;
  std::size_t feature_index = 0;
  CompareOp op = CompareOp::kEq;
  double value = 0.0;

  bool Holds(const PatientRecord& baseline) const;
  bool operator==(const Condition&) const = default;
};

/// A direction or bound constraint on one feature's recommended change.
/// With `when` set the rule is conditional: the predicate is evaluated on the
/// baseline, the constraint on the candidate's change. Rules only constrain
/// features that a candidate actually changes.
struct GuardrailRule {
  std::string feature;
  std::size_t feature_index = 0;
  RuleKind kind = RuleKind::kImmutable;
  std::optional<double> bound;
  std::optional<Condition> when;
  std::string message;

  bool operator==(const GuardrailRule&) const = default;
};

struct Violation {
  GuardrailRule rule;
  std::size_t candidate_id = 0;
  double old_value = 0.0;
  double new_value = 0.0;
};

struct CheckResult {
  RecourseSet passed;
  std::vector<Violation> violations;
};

std::vector<GuardrailRule> ParseRules(std::string_view text, const DataDictionary& dict);
std::vector<GuardrailRule> LoadRules(const std::string& path, const DataDictionary& dict);

/// Throws ValidationError when the rule does not fit the dictionary.
void ValidateRule(const GuardrailRule& rule, const DataDictionary& dict);

/// True when moving `feature` from old_value to new_value breaches the rule,
/// given the baseline for conditional predicates.
bool Breaches(const GuardrailRule& rule, const PatientRecord& baseline, double old_value, double new_value,
              const DataDictionary& dict);

/// All rules breached by a candidate record, in rule order.
std::vector<const GuardrailRule*> BreachedRules(std::span<const GuardrailRule> rules, const PatientRecord& baseline,
                                                const PatientRecord& candidate, const DataDictionary& dict);

CheckResult Check(const RecourseSet& candidates, const PatientRecord& baseline,
                  std::span<const GuardrailRule> rules, const DataDictionary& dict);

/// Deduplicated violated rules, in first-seen order.
std::vector<GuardrailRule> ToConstraints(std::span<const Violation> violations);

/// Values a feature may take in a recommendation: the baseline value plus a
/// permitted interval (continuous) or label set (categorical).
struct PermittedDomain {
  bool frozen = false;
  double lo = 0.0;
  double hi = 0.0;
  bool empty_interval = false;
  std::vector<int> labels;
};

PermittedDomain DomainFor(std::size_t feature, std::span<const GuardrailRule> rules, const PatientRecord& baseline,
                          const DataDictionary& dict);

/// One-line plain-language reading of a rule.
std::string Describe(const GuardrailRule& rule, const DataDictionary& dict);

}  // namespace cfx
