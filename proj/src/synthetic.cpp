#include "cfx/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <fmt/format.h>

#include "cfx/csv.hpp"
#include "cfx/errors.hpp"

namespace cfx {
namespace {

struct Person {
  int sex, age, race, smoking, alcohol, stroke, diffwalk, diabetic, activity, genhealth, asthma, kidney, skin;
  double bmi, phys, ment, sleep;
};

int Pick(std::mt19937_64& rng, std::initializer_list<double> weights) {
  std::discrete_distribution<int> d(weights);
  return d(rng);
}

bool Coin(std::mt19937_64& rng, double p) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < std::clamp(p, 0.0, 1.0);
}

double Sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

Person Draw(std::mt19937_64& rng) {
  Person p{};
  std::normal_distribution<double> unit(0.0, 1.0);
  p.sex = Coin(rng, 0.476) ? 1 : 0;
  p.age = Pick(rng, {6.6, 5.3, 5.9, 6.4, 6.6, 6.8, 7.9, 9.3, 10.5, 10.7, 9.7, 6.7, 7.6});
  // White, Black, Asian, American Indian/Alaskan Native, Hispanic, Other
  p.race = Pick(rng, {76.7, 7.2, 2.5, 1.6, 8.6, 3.4});
  const double age01 = p.age / 12.0;

  p.bmi = std::clamp(std::exp(std::log(27.6) + 0.21 * unit(rng)), 12.02, 94.85);
  p.bmi = std::round(p.bmi * 100.0) / 100.0;
  p.smoking = Coin(rng, 0.33 + 0.15 * age01) ? 1 : 0;
  p.alcohol = Coin(rng, 0.08 - 0.03 * age01) ? 1 : 0;
  p.activity = Coin(rng, 0.86 - 0.15 * age01 - 0.01 * std::max(0.0, p.bmi - 30.0)) ? 1 : 0;
  p.stroke = Coin(rng, 0.008 + 0.07 * age01 * age01) ? 1 : 0;
  p.asthma = Coin(rng, 0.134) ? 1 : 0;
  p.kidney = Coin(rng, 0.01 + 0.06 * age01 * age01) ? 1 : 0;
  p.skin = Coin(rng, 0.01 + 0.2 * age01 * age01) ? 1 : 0;
  // No, No borderline, Yes (during pregnancy), Yes
  const double diab = 0.03 + 0.16 * age01 + 0.012 * std::max(0.0, p.bmi - 27.0);
  p.diabetic = Coin(rng, diab) ? 3 : Pick(rng, {95.5, 2.8, 1.7 * (1.0 - age01), 0.0});
  p.diffwalk = Coin(rng, 0.03 + 0.18 * age01 + 0.01 * std::max(0.0, p.bmi - 30.0) + 0.1 * p.stroke) ? 1 : 0;

  // Self-rated health: latent score from conditions, then 5 ordered bands.
  const double burden = 0.5 * age01 + 0.6 * p.diffwalk + 0.5 * (p.diabetic == 3) + 0.4 * p.stroke +
                        0.3 * p.kidney + 0.25 * p.smoking - 0.45 * p.activity +
                        0.03 * std::max(0.0, p.bmi - 27.0) + 0.6 * unit(rng);
  const double cuts[] = {-0.2, 0.45, 1.05, 1.6};  // Excellent | Very good | Good | Fair | Poor
  int band = 0;
  while (band < 4 && burden > cuts[band]) ++band;
  p.genhealth = 4 - band;  // label order Poor..Excellent

  const double poor_health = 0.18 + 0.1 * band;
  p.phys = Coin(rng, poor_health) ? (Coin(rng, 0.2) ? 30.0 : std::round(1 + 10 * std::abs(unit(rng)))) : 0.0;
  p.phys = std::clamp(p.phys, 0.0, 30.0);
  p.ment = Coin(rng, 0.36) ? (Coin(rng, 0.15) ? 30.0 : std::round(1 + 12 * std::abs(unit(rng)))) : 0.0;
  p.ment = std::clamp(p.ment, 0.0, 30.0);
  p.sleep = std::clamp(std::round(7.1 + 1.4 * unit(rng)), 1.0, 24.0);
  return p;
}

double Logit(const Person& p) {
  static constexpr double kGen[] = {2.3, 1.75, 1.1, 0.5, 0.0};  // Poor..Excellent
  static constexpr double kDiab[] = {0.0, 0.2, 0.1, 0.65};
  static constexpr double kRace[] = {0.0, -0.1, -0.35, 0.15, -0.25, 0.0};
  return 0.3 * p.age + 0.75 * p.sex + 1.1 * p.stroke + kGen[p.genhealth] + kDiab[p.diabetic] +
         0.6 * p.kidney + 0.35 * p.diffwalk + 0.45 * p.smoking + 0.35 * p.alcohol - 0.3 * p.activity +
         0.035 * std::max(0.0, p.bmi - 25.0) + 0.12 * std::abs(p.sleep - 7.5) + 0.01 * p.phys +
         0.2 * p.asthma + 0.1 * p.skin + kRace[p.race];
}

double CalibrateIntercept(std::uint64_t seed, double rate) {
  std::mt19937_64 rng(seed ^ 0xC0FFEEULL);
  std::vector<double> logits(60000);
  for (auto& z : logits) z = Logit(Draw(rng));
  double lo = -20.0, hi = 5.0;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    double mean = 0.0;
    for (double z : logits) mean += Sigmoid(z + mid);
    mean /= static_cast<double>(logits.size());
    (mean < rate ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

std::vector<std::string> GenerateSyntheticCsv(const DataDictionary& dict, const SyntheticOptions& options) {
  static const char* kColumns[] = {"HeartDisease", "BMI", "Smoking", "AlcoholDrinking", "Stroke",
                                   "PhysicalHealth", "MentalHealth", "DiffWalking", "Sex", "AgeCategory",
                                   "Race", "Diabetic", "PhysicalActivity", "GenHealth", "SleepTime",
                                   "Asthma", "KidneyDisease", "SkinCancer"};
  for (std::size_t i = 1; i < std::size(kColumns); ++i) {
    if (!dict.IndexOf(kColumns[i])) {
      throw ValidationError(fmt::format("synthetic generator needs feature '{}'", kColumns[i]));
    }
  }
  auto label = [&](std::string_view name, int idx) { return dict.Spec(name).labels.at(idx); };
  const double intercept = CalibrateIntercept(options.seed, options.positive_rate);

  std::vector<std::string> lines;
  lines.reserve(options.rows + 1);
  lines.push_back(csv::JoinRow({std::begin(kColumns), std::end(kColumns)}));
  std::mt19937_64 rng(options.seed);
  for (std::size_t r = 0; r < options.rows; ++r) {
    const Person p = Draw(rng);
    const bool y = Coin(rng, Sigmoid(Logit(p) + intercept));
    lines.push_back(csv::JoinRow({
        y ? "Yes" : "No",
        fmt::format("{:.2f}", p.bmi),
        label("Smoking", p.smoking),
        label("AlcoholDrinking", p.alcohol),
        label("Stroke", p.stroke),
        fmt::format("{:.1f}", p.phys),
        fmt::format("{:.1f}", p.ment),
        label("DiffWalking", p.diffwalk),
        label("Sex", p.sex),
        label("AgeCategory", p.age),
        label("Race", p.race),
        label("Diabetic", p.diabetic),
        label("PhysicalActivity", p.activity),
        label("GenHealth", p.genhealth),
        fmt::format("{:.1f}", p.sleep),
        label("Asthma", p.asthma),
        label("KidneyDisease", p.kidney),
        label("SkinCancer", p.skin),
    }));
  }
  return lines;
}

void WriteSyntheticCsv(const std::string& path, const DataDictionary& dict, const SyntheticOptions& options) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(fmt::format("cannot write '{}'", path));
  for (const auto& line : GenerateSyntheticCsv(dict, options)) out << line << '\n';
}

}  // namespace cfx
