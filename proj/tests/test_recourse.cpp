#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cfx/errors.hpp"
#include "cfx/guardrails.hpp"
#include "cfx/recourse.hpp"
#include "fixture.hpp"

using namespace cfx;
using cfx::testing::DataPath;
using cfx::testing::SharedWorld;

namespace {

DataDictionary Dict() { return DataDictionary::Load(DataPath("cvd_dictionary")); }

PatientRecord Patient(const DataDictionary& dict, nlohmann::json overrides = nlohmann::json::object()) {
  nlohmann::json v = {{"BMI", 32.0},          {"Smoking", "Yes"},      {"AlcoholDrinking", "No"},
                      {"Stroke", "No"},       {"PhysicalHealth", 10},  {"MentalHealth", 5},
                      {"DiffWalking", "No"},  {"Sex", "Male"},         {"AgeCategory", "60-64"},
                      {"Race", "White"},      {"Diabetic", "No"},      {"PhysicalActivity", "No"},
                      {"GenHealth", "Fair"},  {"SleepTime", 6},        {"Asthma", "No"},
                      {"KidneyDisease", "No"}, {"SkinCancer", "No"}};
  v.update(overrides);
  return dict.RecordFromValues(v, "p1");
}

std::vector<std::string> AllBut(const DataDictionary& dict, std::vector<std::string> keep) {
  std::vector<std::string> frozen;
  for (auto i : dict.ActionableIndices()) {
    if (std::find(keep.begin(), keep.end(), dict.feature(i).name) == keep.end()) frozen.push_back(dict.feature(i).name);
  }
  return frozen;
}

}  // namespace

TEST(Proximity, MatchesHandComputation) {
  const auto dict = Dict();
  const auto a = Patient(dict);
  auto b = a;
  b.values[dict.IndexOrThrow("BMI")] = 32.0 - 0.1 * dict.Spec("BMI").range();
  b.values[dict.IndexOrThrow("Smoking")] = 0;
  // 4 continuous features, 13 categorical ones
  EXPECT_NEAR(Proximity(a, b, dict), 0.1 / 4 + 1.0 / 13, 1e-12);
  const std::vector<std::size_t> scope = {dict.IndexOrThrow("BMI"), dict.IndexOrThrow("SleepTime"),
                                          dict.IndexOrThrow("Smoking")};
  EXPECT_NEAR(Proximity(a, b, dict, scope), 0.1 / 2 + 1.0, 1e-12);
  EXPECT_EQ(Proximity(a, a, dict), 0.0);
  const auto diff = DiffRecords(a, b, dict);
  ASSERT_EQ(diff.size(), 2u);
  EXPECT_EQ(diff[0].name, "BMI");
  EXPECT_EQ(diff[1].name, "Smoking");
  EXPECT_EQ(diff[1].old_value, 1.0);
}

TEST(Rules, BundledFileParses) {
  const auto dict = Dict();
  const auto rules = LoadRules(DataPath("cvd_rules"), dict);
  EXPECT_EQ(rules.size(), 11u);
  EXPECT_EQ(rules[0].feature, "PhysicalActivity");
  EXPECT_EQ(rules[0].kind, RuleKind::kNoDecrease);
  ASSERT_TRUE(rules[1].when);
  EXPECT_EQ(rules[1].when->op, CompareOp::kLt);
}

TEST(Rules, RejectsBadRules) {
  const auto dict = Dict();
  EXPECT_THROW(ParseRules("[rule]\nfeature = Height\nkind = immutable\n", dict), ValidationError);
  EXPECT_THROW(ParseRules("[rule]\nfeature = BMI\nkind = sideways\n", dict), ParseError);
  EXPECT_THROW(ParseRules("[rule]\nfeature = Smoking\nkind = min_bound\nbound = 1\n", dict), ValidationError);
  EXPECT_THROW(ParseRules("[rule]\nfeature = BMI\nkind = min_bound\n", dict), ValidationError);
  EXPECT_THROW(ParseRules("[rule]\nfeature = BMI\nkind = min_bound\nbound = 999\n", dict), ValidationError);
  EXPECT_THROW(ParseRules("[rule]\nfeature = BMI\nkind = no_increase\nwhen = BMI ~ 3\n", dict), ParseError);
}

TEST(Rules, BreachSemantics) {
  const auto dict = Dict();
  const auto rules = LoadRules(DataPath("cvd_rules"), dict);
  auto rule = [&](const std::string& f, RuleKind k) {
    for (const auto& r : rules) {
      if (r.feature == f && r.kind == k) return r;
    }
    throw std::runtime_error("missing rule");
  };
  const auto base = Patient(dict);  // BMI 32, sleeps 6 h, inactive
  const auto pa = rule("PhysicalActivity", RuleKind::kNoDecrease);
  EXPECT_TRUE(Breaches(pa, base, 1, 0, dict));   // Yes -> No
  EXPECT_FALSE(Breaches(pa, base, 0, 1, dict));  // No -> Yes
  const auto gain = rule("BMI", RuleKind::kNoIncrease);
  EXPECT_TRUE(Breaches(gain, base, 32, 33, dict));
  EXPECT_FALSE(Breaches(gain, Patient(dict, {{"BMI", 20.0}}), 20, 21, dict));  // condition BMI >= 25 is false
  const auto floor = rule("BMI", RuleKind::kMinBound);
  EXPECT_TRUE(Breaches(floor, base, 32, 18.0, dict));
  EXPECT_FALSE(Breaches(floor, base, 32, 18.5, dict));
  const auto gen = rule("GenHealth", RuleKind::kNoDecrease);
  EXPECT_TRUE(Breaches(gen, base, 1, 0, dict));  // Fair -> Poor
  EXPECT_FALSE(Breaches(gen, base, 1, 4, dict));
  const auto less_sleep = rule("SleepTime", RuleKind::kNoDecrease);
  EXPECT_TRUE(Breaches(less_sleep, base, 6, 5, dict));
  EXPECT_FALSE(Breaches(less_sleep, Patient(dict, {{"SleepTime", 8}}), 8, 7.5, dict));
}

TEST(Rules, CheckSplitsCandidates) {
  const auto dict = Dict();
  const auto rules = LoadRules(DataPath("cvd_rules"), dict);
  const auto base = Patient(dict);
  RecourseSet set;
  auto good = base;
  good.values[dict.IndexOrThrow("Smoking")] = 0;
  auto bad = base;
  bad.values[dict.IndexOrThrow("BMI")] = 15;
  bad.values[dict.IndexOrThrow("SleepTime")] = 12;
  set.candidates.push_back({good});
  set.candidates.push_back({bad});
  set.candidates.push_back({bad});
  const auto res = Check(set, base, rules, dict);
  ASSERT_EQ(res.passed.candidates.size(), 1u);
  EXPECT_EQ(res.passed.candidates[0].record, good);
  EXPECT_EQ(res.violations.size(), 4u);  // min_bound and max_bound, twice
  EXPECT_EQ(ToConstraints(res.violations).size(), 2u);
}

TEST(Rules, PermittedDomain) {
  const auto dict = Dict();
  const auto rules = LoadRules(DataPath("cvd_rules"), dict);
  const auto base = Patient(dict);
  const auto bmi = DomainFor(dict.IndexOrThrow("BMI"), rules, base, dict);
  EXPECT_DOUBLE_EQ(bmi.lo, 18.5);
  EXPECT_DOUBLE_EQ(bmi.hi, 32.0);
  const auto sleep = DomainFor(dict.IndexOrThrow("SleepTime"), rules, base, dict);
  EXPECT_DOUBLE_EQ(sleep.lo, 6.0);
  EXPECT_DOUBLE_EQ(sleep.hi, 10.0);
  const auto gen = DomainFor(dict.IndexOrThrow("GenHealth"), rules, base, dict);
  EXPECT_EQ(gen.labels, (std::vector<int>{2, 3, 4}));
  const auto active = DomainFor(dict.IndexOrThrow("PhysicalActivity"), rules, Patient(dict, {{"PhysicalActivity", "Yes"}}), dict);
  EXPECT_TRUE(active.labels.empty());
  GuardrailRule freeze{"Smoking", dict.IndexOrThrow("Smoking"), RuleKind::kImmutable, {}, {}, "fixed"};
  EXPECT_TRUE(DomainFor(dict.IndexOrThrow("Smoking"), std::vector{freeze}, base, dict).frozen);
}

TEST(Generate, CandidatesAreValidActionableAndDeterministic) {
  const auto& w = SharedWorld();
  for (std::size_t n = 0; n < 5; ++n) {
    RecourseQuery q;
    q.baseline = w.HighRiskPatient(n);
    q.k = 3;
    q.frozen = {"GenHealth"};
    q.seed = 100 + n;
    const auto set = Generate(q, *w.model);
    EXPECT_LE(set.candidates.size(), 3u);
    for (const auto& c : set.candidates) {
      EXPECT_TRUE(c.valid);
      EXPECT_EQ(w.model->Predict(c.record).label, RiskLabel::kLowRisk);
      EXPECT_EQ(c.prediction, w.model->Predict(c.record));
      for (const auto& ch : c.changed) {
        EXPECT_TRUE(w.dict.feature(ch.feature).actionable) << ch.name;
        EXPECT_NE(ch.name, "GenHealth");
      }
      EXPECT_EQ(c.changed, DiffRecords(q.baseline, c.record, w.dict));
    }
    const auto again = Generate(q, *w.model);
    ASSERT_EQ(again.candidates.size(), set.candidates.size());
    for (std::size_t i = 0; i < set.candidates.size(); ++i) {
      EXPECT_EQ(again.candidates[i].record, set.candidates[i].record);
    }
  }
}

TEST(Generate, RespectsExtraConstraints) {
  const auto& w = SharedWorld();
  const auto rules = w.rules;
  RecourseQuery q;
  q.baseline = w.HighRiskPatient(1);
  q.extra_constraints = rules;
  q.seed = 5;
  const auto set = Generate(q, *w.model);
  for (const auto& c : set.candidates) EXPECT_TRUE(BreachedRules(rules, q.baseline, c.record, w.dict).empty());
}

TEST(Generate, SingleContinuousFeatureHitsAnalyticBoundary) {
  // p = sigmoid(-2 + 4 * scaled BMI): the decision boundary is at scaled BMI 0.5.
  const auto dict = Dict();
  const auto m = RiskModel::Logistic(dict, -2.0, {{"BMI", 4.0}});
  const auto& spec = dict.Spec("BMI");
  const double boundary = spec.min + 0.5 * spec.range();
  RecourseQuery q;
  q.baseline = Patient(dict, {{"BMI", 70.0}});
  q.frozen = AllBut(dict, {"BMI"});
  q.k = 1;
  q.seed = 1;
  const auto set = Generate(q, m);
  ASSERT_EQ(set.candidates.size(), 1u);
  const double got = set.candidates[0].record.values[0];
  const double optimum = (70.0 - boundary) / spec.range();
  EXPECT_LT(got, boundary);
  EXPECT_LE(set.candidates[0].proximity, 1.05 * optimum);
  const auto oracle = BruteForceOracle(q, m, 201);
  ASSERT_TRUE(oracle);
  EXPECT_GE(oracle->proximity + 1e-12, optimum);
  const auto d = DomainFor(0, {}, q.baseline, dict);
  EXPECT_LE(oracle->proximity, optimum + (d.hi - d.lo) / 200.0 / spec.range() + 1e-9);  // within one grid step
}

TEST(Oracle, RejectsTooManyFreeFeatures) {
  const auto dict = Dict();
  const auto m = RiskModel::Logistic(dict, -2.0, {{"BMI", 4.0}});
  RecourseQuery q;
  q.baseline = Patient(dict, {{"BMI", 70.0}});
  EXPECT_THROW(BruteForceOracle(q, m, 11), ValidationError);
}

TEST(Oracle, UnreachableTargetGivesNothing) {
  const auto dict = Dict();
  const auto m = RiskModel::Logistic(dict, 5.0, {{"BMI", 1.0}});  // always high risk
  RecourseQuery q;
  q.baseline = Patient(dict);
  q.frozen = AllBut(dict, {"BMI", "Smoking"});
  EXPECT_FALSE(BruteForceOracle(q, m, 21));
  EXPECT_TRUE(Generate(q, m).candidates.empty());
}

TEST(Sparsity, RevertsChangesThatDoNotMatter) {
  const auto dict = Dict();
  const auto m = RiskModel::Logistic(dict, -1.0, {{"Smoking=Yes", 2.0}});
  const auto base = Patient(dict);
  auto rec = base;
  rec.values[dict.IndexOrThrow("Smoking")] = 0;
  rec.values[dict.IndexOrThrow("SleepTime")] = 8;
  rec.values[dict.IndexOrThrow("GenHealth")] = 4;
  const auto scope = dict.ActionableIndices();
  const auto c = MakeCandidate(rec, base, m, RiskLabel::kLowRisk, scope);
  ASSERT_TRUE(c.valid);
  EXPECT_EQ(c.changed.size(), 3u);
  const auto s = SparsityRevert(c, base, m, scope);
  ASSERT_EQ(s.changed.size(), 1u);
  EXPECT_EQ(s.changed[0].name, "Smoking");
  EXPECT_TRUE(s.valid);
  EXPECT_LT(s.proximity, c.proximity);
}

TEST(Json, CandidateSerialization) {
  const auto dict = Dict();
  const auto m = RiskModel::Logistic(dict, -1.0, {{"Smoking=Yes", 2.0}});
  const auto base = Patient(dict);
  auto rec = base;
  rec.values[dict.IndexOrThrow("Smoking")] = 0;
  const auto c = MakeCandidate(rec, base, m, RiskLabel::kLowRisk, dict.ActionableIndices());
  const auto j = ToJson(c, dict);
  EXPECT_EQ(j["changed_features"][0]["feature"], "Smoking");
  EXPECT_EQ(j["changed_features"][0]["from"], "Yes");
  EXPECT_EQ(j["changed_features"][0]["to"], "No");
  EXPECT_EQ(j["valid"], true);
}
