#include "cfx/guardrails.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "cfx/block_file.hpp"
#include "cfx/errors.hpp"

namespace cfx {

std::string_view ToString(RuleKind kind) {
  switch (kind) {
    case RuleKind::kImmutable: return "immutable";
    case RuleKind::kNoDecrease: return "no_decrease";
    case RuleKind::kNoIncrease: return "no_increase";
    case RuleKind::kMinBound: return "min_bound";
    case RuleKind::kMaxBound: return "max_bound";
  }
  return "?";
}

std::string_view ToString(CompareOp op) {
  switch (op) {
    case CompareOp::kLt: return "<";
    case CompareOp::kLe: return "<=";
    case CompareOp::kGt: return ">";
    case CompareOp::kGe: return ">=";
    case CompareOp::kEq: return "==";
    case CompareOp::kNe: return "!=";
  }
  return "?";
}

bool Condition::Holds(const PatientRecord& baseline) const {
  const double v = baseline.values.at(feature_index);
  switch (op) {
    case CompareOp::kLt: return v < value;
    case CompareOp::kLe: return v <= value;
    case CompareOp::kGt: return v > value;
    case CompareOp::kGe: return v >= value;
    case CompareOp::kEq: return v == value;
    case CompareOp::kNe: return v != value;
  }
  return false;
}

namespace {

RuleKind ParseKind(const std::string& s, int line) {
  if (s == "immutable") return RuleKind::kImmutable;
  if (s == "no_decrease") return RuleKind::kNoDecrease;
  if (s == "no_increase") return RuleKind::kNoIncrease;
  if (s == "min_bound") return RuleKind::kMinBound;
  if (s == "max_bound") return RuleKind::kMaxBound;
  throw ParseError(fmt::format("rule at line {}: unknown kind '{}'", line, s));
}

Condition ParseCondition(const std::string& text, const DataDictionary& dict, int line) {
  static constexpr std::pair<std::string_view, CompareOp> kOps[] = {
      {"<=", CompareOp::kLe}, {">=", CompareOp::kGe}, {"==", CompareOp::kEq},
      {"!=", CompareOp::kNe}, {"<", CompareOp::kLt},  {">", CompareOp::kGt}};
  for (const auto& [tok, op] : kOps) {
    const auto pos = text.find(tok);
    if (pos == std::string::npos) continue;
    Condition c;
    c.feature = Trim(std::string_view(text).substr(0, pos));
    c.op = op;
    const auto idx = dict.IndexOf(c.feature);
    if (!idx) throw ValidationError(fmt::format("rule at line {}: unknown feature '{}' in condition", line, c.feature));
    c.feature_index = *idx;
    try {
      c.value = dict.ParseValue(*idx, Trim(std::string_view(text).substr(pos + tok.size())));
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("rule at line {}: condition value: {}", line, e.what()));
    }
    return c;
  }
  throw ParseError(fmt::format("rule at line {}: condition '{}' has no comparison operator", line, text));
}

int Rank(const FeatureSpec& spec, double v) { return spec.HealthRank(static_cast<int>(v)); }

}  // namespace

void ValidateRule(const GuardrailRule& rule, const DataDictionary& dict) {
  const auto idx = dict.IndexOf(rule.feature);
  if (!idx || *idx != rule.feature_index) {
    throw ValidationError(fmt::format("guardrail on unknown feature '{}'", rule.feature));
  }
  const auto& spec = dict.feature(*idx);
  const bool bounded = rule.kind == RuleKind::kMinBound || rule.kind == RuleKind::kMaxBound;
  if (bounded) {
    if (!spec.continuous()) {
      throw ValidationError(fmt::format("guardrail {} on '{}': bounds need a continuous feature",
                                        ToString(rule.kind), rule.feature));
    }
    if (!rule.bound) {
      throw ValidationError(fmt::format("guardrail {} on '{}': missing bound", ToString(rule.kind), rule.feature));
    }
    if (*rule.bound < spec.min || *rule.bound > spec.max) {
      throw ValidationError(fmt::format("guardrail {} on '{}': bound {} outside allowed range [{}, {}]",
                                        ToString(rule.kind), rule.feature, *rule.bound, spec.min, spec.max));
    }
  } else if (rule.bound) {
    throw ValidationError(fmt::format("guardrail {} on '{}' takes no bound", ToString(rule.kind), rule.feature));
  }
  if (rule.when) {
    const auto cidx = dict.IndexOf(rule.when->feature);
    if (!cidx || *cidx != rule.when->feature_index || !dict.InSpec(*cidx, rule.when->value)) {
      throw ValidationError(fmt::format("guardrail on '{}': invalid condition", rule.feature));
    }
  }
}

std::vector<GuardrailRule> ParseRules(std::string_view text, const DataDictionary& dict) {
  const auto blocks = ParseBlocks(text);
  std::vector<GuardrailRule> rules;
  for (std::size_t b = 1; b < blocks.size(); ++b) {
    const Block& blk = blocks[b];
    if (blk.header != "rule") {
      throw ParseError(fmt::format("line {}: expected [rule], got [{}]", blk.line, blk.header));
    }
    const std::string ctx = fmt::format("rule at line {}", blk.line);
    GuardrailRule r;
    r.feature = blk.Require("feature", ctx);
    const auto idx = dict.IndexOf(r.feature);
    if (!idx) throw ValidationError(fmt::format("{}: unknown feature '{}'", ctx, r.feature));
    r.feature_index = *idx;
    r.kind = ParseKind(blk.Require("kind", ctx), blk.line);
    if (auto bound = blk.Get("bound")) {
      try {
        std::size_t used = 0;
        r.bound = std::stod(*bound, &used);
        if (used != bound->size()) throw std::invalid_argument(*bound);
      } catch (const std::exception&) {
        throw ParseError(fmt::format("{}: bound '{}' is not a number", ctx, *bound));
      }
    }
    if (auto when = blk.Get("when")) r.when = ParseCondition(*when, dict, blk.line);
    r.message = blk.Get("message").value_or("");
    try {
      ValidateRule(r, dict);
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("{}: {}", ctx, e.what()));
    }
    rules.push_back(std::move(r));
  }
  return rules;
}

std::vector<GuardrailRule> LoadRules(const std::string& path, const DataDictionary& dict) {
  try {
    return ParseRules(ReadFile(path), dict);
  } catch (const ParseError& e) {
    throw ParseError(fmt::format("{}: {}", path, e.what()));
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("{}: {}", path, e.what()));
  }
}

bool Breaches(const GuardrailRule& rule, const PatientRecord& baseline, double old_value, double new_value,
              const DataDictionary& dict) {
  if (old_value == new_value) return false;
  if (rule.when && !rule.when->Holds(baseline)) return false;
  const auto& spec = dict.feature(rule.feature_index);
  switch (rule.kind) {
    case RuleKind::kImmutable:
      return true;
    case RuleKind::kNoDecrease:
      return spec.continuous() ? new_value < old_value : Rank(spec, new_value) < Rank(spec, old_value);
    case RuleKind::kNoIncrease:
      return spec.continuous() ? new_value > old_value : Rank(spec, new_value) > Rank(spec, old_value);
    case RuleKind::kMinBound:
      return new_value < *rule.bound;
    case RuleKind::kMaxBound:
      return new_value > *rule.bound;
  }
  return false;
}

std::vector<const GuardrailRule*> BreachedRules(std::span<const GuardrailRule> rules, const PatientRecord& baseline,
                                                const PatientRecord& candidate, const DataDictionary& dict) {
  std::vector<const GuardrailRule*> out;
  for (const auto& r : rules) {
    if (Breaches(r, baseline, baseline.values[r.feature_index], candidate.values[r.feature_index], dict)) {
      out.push_back(&r);
    }
  }
  return out;
}

CheckResult Check(const RecourseSet& candidates, const PatientRecord& baseline,
                  std::span<const GuardrailRule> rules, const DataDictionary& dict) {
  CheckResult res;
  res.passed.stats = candidates.stats;
  for (std::size_t c = 0; c < candidates.candidates.size(); ++c) {
    const auto& cand = candidates.candidates[c];
    const auto breached = BreachedRules(rules, baseline, cand.record, dict);
    if (breached.empty()) {
      res.passed.candidates.push_back(cand);
      continue;
    }
    for (const auto* r : breached) {
      res.violations.push_back(
          {*r, c, baseline.values[r->feature_index], cand.record.values[r->feature_index]});
    }
  }
  res.passed.diversity = MeanPairwiseProximity(res.passed.candidates, dict);
  return res;
}

std::vector<GuardrailRule> ToConstraints(std::span<const Violation> violations) {
  std::vector<GuardrailRule> out;
  for (const auto& v : violations) {
    if (std::find(out.begin(), out.end(), v.rule) == out.end()) out.push_back(v.rule);
  }
  return out;
}

PermittedDomain DomainFor(std::size_t feature, std::span<const GuardrailRule> rules, const PatientRecord& baseline,
                          const DataDictionary& dict) {
  const auto& spec = dict.feature(feature);
  const double old_value = baseline.values[feature];
  PermittedDomain d;
  if (spec.continuous()) {
    d.lo = spec.min;
    d.hi = spec.max;
  }
  std::vector<const GuardrailRule*> active;
  for (const auto& r : rules) {
    if (r.feature_index != feature) continue;
    if (r.when && !r.when->Holds(baseline)) continue;
    if (r.kind == RuleKind::kImmutable) d.frozen = true;
    active.push_back(&r);
  }
  if (d.frozen) return d;
  if (spec.continuous()) {
    for (const auto* r : active) {
      switch (r->kind) {
        case RuleKind::kNoDecrease: d.lo = std::max(d.lo, old_value); break;
        case RuleKind::kNoIncrease: d.hi = std::min(d.hi, old_value); break;
        case RuleKind::kMinBound: d.lo = std::max(d.lo, *r->bound); break;
        case RuleKind::kMaxBound: d.hi = std::min(d.hi, *r->bound); break;
        case RuleKind::kImmutable: break;
      }
    }
    d.empty_interval = d.lo > d.hi;
    return d;
  }
  for (int l = 0; l < static_cast<int>(spec.labels.size()); ++l) {
    if (l == static_cast<int>(old_value)) continue;
    const bool ok = std::none_of(active.begin(), active.end(), [&](const GuardrailRule* r) {
      return Breaches(*r, baseline, old_value, l, dict);
    });
    if (ok) d.labels.push_back(l);
  }
  return d;
}

std::string Describe(const GuardrailRule& rule, const DataDictionary& dict) {
  const auto& spec = dict.feature(rule.feature_index);
  std::string what;
  switch (rule.kind) {
    case RuleKind::kImmutable:
      what = fmt::format("never recommend changing {}", rule.feature);
      break;
    case RuleKind::kNoDecrease:
      what = spec.continuous()
                 ? fmt::format("never recommend lowering {}", rule.feature)
                 : fmt::format("never recommend moving {} to a less healthy label", rule.feature);
      break;
    case RuleKind::kNoIncrease:
      what = spec.continuous()
                 ? fmt::format("never recommend raising {}", rule.feature)
                 : fmt::format("never recommend moving {} to a healthier label", rule.feature);
      break;
    case RuleKind::kMinBound:
      what = fmt::format("never recommend {} below {}", rule.feature, *rule.bound);
      break;
    case RuleKind::kMaxBound:
      what = fmt::format("never recommend {} above {}", rule.feature, *rule.bound);
      break;
  }
  if (rule.when) {
    what += fmt::format(" when baseline {} {} {}", rule.when->feature, ToString(rule.when->op),
                        dict.FormatValue(rule.when->feature_index, rule.when->value));
  }
  return what;
}

}  // namespace cfx
