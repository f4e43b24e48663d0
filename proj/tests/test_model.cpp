#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cfx/errors.hpp"
#include "cfx/model.hpp"
#include "fixture.hpp"

using namespace cfx;
using cfx::testing::DataPath;
using cfx::testing::SharedWorld;

namespace {

double Sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Pair-counting AUC with ties worth one half.
double PairAuc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0;
  double pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

}  // namespace

TEST(Encoder, ScalesAndOneHots) {
  const auto dict = DataDictionary::Load(DataPath("cvd_dictionary"));
  Encoder enc(dict);
  EXPECT_EQ(enc.width(), 50u);  // 4 continuous + 46 labels
  PatientRecord r;
  r.values.assign(dict.size(), 0.0);
  r.values[dict.IndexOrThrow("SleepTime")] = 1;  // range minimum
  r.values[dict.IndexOrThrow("BMI")] = 12.02 + 0.25 * (94.85 - 12.02);
  r.values[dict.IndexOrThrow("GenHealth")] = 3;
  const auto x = enc.Encode(r);
  EXPECT_NEAR(x[enc.SlotFor("BMI")], 0.25, 1e-12);
  EXPECT_EQ(x[enc.SlotFor("GenHealth=Very good")], 1.0);
  EXPECT_EQ(x[enc.SlotFor("GenHealth=Good")], 0.0);
  double sum = 0;
  for (double v : x) sum += v;
  EXPECT_NEAR(sum, 0.25 + 13.0, 1e-12);  // 13 categorical features each contribute one 1
  const auto back = enc.Decode(x, "p");
  for (std::size_t f = 0; f < dict.size(); ++f) EXPECT_NEAR(back.values[f], r.values[f], 1e-9);
  EXPECT_THROW(enc.SlotFor("BMI=3"), ValidationError);
  EXPECT_THROW(enc.SlotFor("GenHealth"), ValidationError);
}

TEST(Prediction, RoundsScoreAndThresholds) {
  EXPECT_EQ(MakePrediction(0.734, 0.5).risk_score, 73);
  EXPECT_EQ(MakePrediction(0.735, 0.5).risk_score, 74);
  EXPECT_EQ(MakePrediction(0.5, 0.5).label, RiskLabel::kHighRisk);
  EXPECT_EQ(MakePrediction(0.4999, 0.5).label, RiskLabel::kLowRisk);
  EXPECT_EQ(MakePrediction(0.4999, 0.5).risk_score, 50);
}

TEST(Logistic, ExplicitWeightsMatchHandComputation) {
  const auto dict = DataDictionary::Load(DataPath("cvd_dictionary"));
  const auto m = RiskModel::Logistic(dict, -1.0, {{"BMI", 2.0}, {"Smoking=Yes", 0.7}});
  PatientRecord r;
  r.values.assign(dict.size(), 0.0);
  r.values[dict.IndexOrThrow("BMI")] = 53.435;  // scaled 0.5
  r.values[dict.IndexOrThrow("Smoking")] = 1;
  EXPECT_NEAR(m.Probability(r), Sigmoid(-1.0 + 1.0 + 0.7), 1e-12);
  r.values[dict.IndexOrThrow("Smoking")] = 0;
  EXPECT_NEAR(m.Probability(r), Sigmoid(0.0), 1e-12);
  r.values[dict.IndexOrThrow("BMI")] = 500;
  EXPECT_THROW(m.Predict(r), ValidationError);
}

TEST(Auc, MatchesPairCount) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<int> score(0, 9);  // coarse scores force ties
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 300; ++i) {
    y.push_back(coin(rng));
    s.push_back(score(rng) + 0.5 * y.back());
  }
  EXPECT_NEAR(*RankAuc(s, y), PairAuc(s, y), 1e-12);
  EXPECT_FALSE(RankAuc(std::vector<double>{1, 2}, std::vector<int>{0, 0}));
}

TEST(Gradient, AnalyticMatchesCentralDifference) {
  const auto& w = SharedWorld();
  RiskModel m = *w.model;
  const auto& enc = m.encoder();
  std::vector<double> rows;
  std::vector<int> labels;
  std::vector<double> weights;
  for (std::size_t i = 0; i < 32; ++i) {
    const auto x = enc.Encode(w.data.records[i * 7]);
    rows.insert(rows.end(), x.begin(), x.end());
    labels.push_back(w.data.labels[i * 7]);
    weights.push_back(i % 3 ? 1.0 : 2.5);
  }
  std::vector<double> grad;
  m.LossAndGradient(rows, labels, weights, grad);
  auto params = m.mutable_params();
  ASSERT_EQ(grad.size(), params.size());
  const double h = 1e-5;
  for (std::size_t k = 0; k < params.size(); k += 3) {
    const double saved = params[k];
    params[k] = saved + h;
    const double up = m.Loss(rows, labels, weights);
    params[k] = saved - h;
    const double down = m.Loss(rows, labels, weights);
    params[k] = saved;
    const double numeric = (up - down) / (2 * h);
    const double scale = std::max({std::abs(numeric), std::abs(grad[k]), 1e-6});
    EXPECT_LE(std::abs(numeric - grad[k]) / scale, 1e-4) << "param " << k;
  }
}

TEST(Training, LearnsSyntheticCohort) {
  const auto& w = SharedWorld();
  const auto& m = w.model->metrics();
  EXPECT_GE(m.accuracy, 0.90);
  ASSERT_TRUE(m.auc);
  EXPECT_GE(*m.auc, 0.80);
  // held-out evaluation recomputed from the stored split
  const auto held = HeldOutIndices(w.data, w.model->split_seed());
  const auto again = Evaluate(*w.model, w.data, held);
  EXPECT_DOUBLE_EQ(again.accuracy, m.accuracy);
  EXPECT_EQ(again.n(), held.size());
}

TEST(Training, SingleClassIsRejected) {
  const auto& w = SharedWorld();
  Dataset d;
  for (std::size_t i = 0; i < w.data.size() && d.size() < 200; ++i) {
    if (w.data.labels[i] == 0) {
      d.records.push_back(w.data.records[i]);
      d.labels.push_back(0);
    }
  }
  d.RefreshStats(w.dict);
  EXPECT_THROW(Train(d, w.dict, {}), TrainingError);
}

TEST(Weights, SerializeRoundTripIsExact) {
  const auto& w = SharedWorld();
  const auto text = w.model->Serialize();
  const auto back = RiskModel::Parse(text, w.dict);
  EXPECT_EQ(back.Serialize(), text);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(back.Probability(w.data.records[i]), w.model->Probability(w.data.records[i]));
  }
  EXPECT_EQ(back.split_seed(), w.model->split_seed());
  EXPECT_THROW(RiskModel::Parse("garbage", w.dict), ParseError);
}
