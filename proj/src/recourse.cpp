#include "cfx/recourse.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include <fmt/format.h>

#include "cfx/errors.hpp"

namespace cfx {

std::vector<std::size_t> ProximityScope(const RecourseQuery& query, const DataDictionary& dict) {
  std::set<std::string> frozen(query.frozen.begin(), query.frozen.end());
  std::vector<std::size_t> scope;
  for (std::size_t f = 0; f < dict.size(); ++f) {
    if (dict.feature(f).actionable && !frozen.count(dict.feature(f).name)) scope.push_back(f);
  }
  return scope;
}

std::vector<std::size_t> FreeFeatures(const RecourseQuery& query, const DataDictionary& dict) {
  std::vector<std::size_t> free;
  for (auto f : ProximityScope(query, dict)) {
    const auto d = DomainFor(f, query.extra_constraints, query.baseline, dict);
    if (d.frozen) continue;
    const bool has_alternative = dict.feature(f).continuous() ? !d.empty_interval : !d.labels.empty();
    if (has_alternative) free.push_back(f);
  }
  return free;
}

RecourseCandidate MakeCandidate(PatientRecord record, const PatientRecord& baseline, const RiskModel& model,
                                RiskLabel desired, std::span<const std::size_t> scope) {
  RecourseCandidate c;
  c.prediction = model.FromProbability(model.Probability(record));
  c.valid = c.prediction.label == desired;
  c.proximity = Proximity(baseline, record, model.dictionary(), scope);
  c.changed = DiffRecords(baseline, record, model.dictionary());
  c.record = std::move(record);
  return c;
}

RecourseCandidate SparsityRevert(const RecourseCandidate& candidate, const PatientRecord& baseline,
                                 const RiskModel& model, std::span<const std::size_t> scope) {
  if (!candidate.valid) return candidate;
  const auto& dict = model.dictionary();
  const RiskLabel desired = candidate.prediction.label;
  auto changed = candidate.changed;
  auto magnitude = [&](const FeatureChange& c) {
    const auto& s = dict.feature(c.feature);
    return s.continuous() ? std::abs(c.new_value - c.old_value) / s.range() : 1.0;
  };
  std::stable_sort(changed.begin(), changed.end(),
                   [&](const auto& a, const auto& b) { return magnitude(a) > magnitude(b); });
  PatientRecord rec = candidate.record;
  for (const auto& c : changed) {
    rec.values[c.feature] = c.old_value;
    if (model.FromProbability(model.Probability(rec)).label != desired) rec.values[c.feature] = c.new_value;
  }
  return MakeCandidate(std::move(rec), baseline, model, desired, scope);
}

namespace {

struct Gene {
  std::size_t feature = 0;
  bool continuous = false;
  double base = 0.0;
  double lo = 0.0, hi = 0.0;
  bool interval = false;
  std::vector<int> labels;  // permitted labels plus the baseline label
};

struct Individual {
  PatientRecord record;
  double fitness = 0.0;
  bool valid = false;
};

class Search {
 public:
  Search(const RecourseQuery& query, const RiskModel& model, const SearchConfig& config)
      : query_(query), model_(model), dict_(model.dictionary()), config_(config) {
    scope_ = ProximityScope(query, dict_);
    for (auto f : FreeFeatures(query, dict_)) {
      const auto d = DomainFor(f, query.extra_constraints, query.baseline, dict_);
      Gene g;
      g.feature = f;
      g.continuous = dict_.feature(f).continuous();
      g.base = query.baseline.values[f];
      g.lo = d.lo;
      g.hi = d.hi;
      g.interval = g.continuous && !d.empty_interval;
      g.labels = d.labels;
      if (!g.continuous) g.labels.push_back(static_cast<int>(g.base));
      genes_.push_back(std::move(g));
    }
  }

  bool has_free_features() const { return !genes_.empty(); }
  std::size_t evaluations() const { return evaluations_; }

  bool IsValid(const PatientRecord& r) {
    ++evaluations_;
    return model_.FromProbability(model_.Probability(r)).label == query_.desired_label;
  }

  double Fitness(const PatientRecord& r, bool& valid) {
    ++evaluations_;
    const double p = model_.Probability(r);
    valid = model_.FromProbability(p).label == query_.desired_label;
    const double hinge = valid ? 0.0 : 1.0 + std::abs(p - model_.threshold());
    double fit = hinge + config_.proximity_weight * Proximity(query_.baseline, r, dict_, scope_);
    if (!kept_.empty()) {
      double nearest = std::numeric_limits<double>::infinity();
      for (const auto& k : kept_) nearest = std::min(nearest, Proximity(k.record, r, dict_, scope_));
      fit -= config_.diversity_weight * std::min(nearest, config_.diversity_cap);
    }
    return fit;
  }

  double Sample(const Gene& g, std::mt19937_64& rng) const {
    if (g.continuous) {
      if (!g.interval) return g.base;
      return std::uniform_real_distribution<double>(g.lo, g.hi)(rng);
    }
    std::uniform_int_distribution<std::size_t> pick(0, g.labels.size() - 1);
    return g.labels[pick(rng)];
  }

  /// Pulls each changed continuous feature as close to baseline as validity allows.
  void Polish(PatientRecord& rec) {
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& g : genes_) {
        if (!g.continuous || !g.interval) continue;
        const double cur = rec.values[g.feature];
        const double target = std::clamp(g.base, g.lo, g.hi);
        if (cur == target || cur == g.base) continue;
        rec.values[g.feature] = g.base;
        if (IsValid(rec)) continue;
        rec.values[g.feature] = target;
        if (IsValid(rec)) continue;
        double bad = target, good = cur;
        for (int it = 0; it < 40; ++it) {
          const double mid = 0.5 * (bad + good);
          rec.values[g.feature] = mid;
          (IsValid(rec) ? good : bad) = mid;
        }
        rec.values[g.feature] = good;
      }
    }
  }

  std::optional<RecourseCandidate> RunSlot(std::uint64_t slot_seed) {
    std::mt19937_64 rng(slot_seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto pop_size = static_cast<std::size_t>(std::max(config_.population, 2));
    std::vector<Individual> pop(pop_size);
    for (auto& ind : pop) {
      ind.record = query_.baseline;
      for (const auto& g : genes_) {
        if (unit(rng) < 0.5) ind.record.values[g.feature] = Sample(g, rng);
      }
      ind.fitness = Fitness(ind.record, ind.valid);
    }
    auto by_fitness = [](const Individual& a, const Individual& b) { return a.fitness < b.fitness; };
    const auto n_elite = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(config_.elite_fraction * static_cast<double>(pop_size))));
    std::uniform_int_distribution<std::size_t> any(0, pop_size - 1);
    auto tournament = [&]() -> const Individual& {
      const auto& a = pop[any(rng)];
      const auto& b = pop[any(rng)];
      return a.fitness <= b.fitness ? a : b;
    };
    for (int gen = 0; gen < config_.generations; ++gen) {
      std::stable_sort(pop.begin(), pop.end(), by_fitness);
      std::vector<Individual> next(pop.begin(), pop.begin() + static_cast<std::ptrdiff_t>(n_elite));
      while (next.size() < pop_size) {
        const auto& pa = tournament();
        const auto& pb = tournament();
        Individual child;
        child.record = pa.record;
        for (const auto& g : genes_) {
          if (unit(rng) < 0.5) child.record.values[g.feature] = pb.record.values[g.feature];
          if (unit(rng) < config_.mutation_rate) {
            child.record.values[g.feature] = unit(rng) < 0.3 ? g.base : Sample(g, rng);
          }
        }
        child.fitness = Fitness(child.record, child.valid);
        next.push_back(std::move(child));
      }
      pop = std::move(next);
      ++generations_;
    }
    std::stable_sort(pop.begin(), pop.end(), by_fitness);

    constexpr int kMaxAttempts = 25;
    int attempts = 0;
    std::set<std::vector<double>> tried;
    for (const auto& ind : pop) {
      if (!ind.valid) continue;
      if (!tried.insert(ind.record.values).second) continue;
      if (++attempts > kMaxAttempts) break;
      PatientRecord rec = ind.record;
      Polish(rec);
      auto cand = MakeCandidate(rec, query_.baseline, model_, query_.desired_label, scope_);
      if (!cand.valid) continue;
      cand = SparsityRevert(cand, query_.baseline, model_, scope_);
      evaluations_ += cand.changed.size() + 1;
      if (!cand.valid || cand.changed.empty()) continue;
      const bool distinct = std::all_of(kept_.begin(), kept_.end(), [&](const RecourseCandidate& k) {
        return k.record.values != cand.record.values &&
               Proximity(k.record, cand.record, dict_, scope_) >= config_.min_pairwise_proximity;
      });
      if (distinct) return cand;
    }
    return std::nullopt;
  }

  void Keep(RecourseCandidate c) { kept_.push_back(std::move(c)); }
  std::vector<RecourseCandidate>& kept() { return kept_; }
  const std::vector<std::size_t>& scope() const { return scope_; }
  int generations() const { return generations_; }

 private:
  const RecourseQuery& query_;
  const RiskModel& model_;
  const DataDictionary& dict_;
  SearchConfig config_;
  std::vector<std::size_t> scope_;
  std::vector<Gene> genes_;
  std::vector<RecourseCandidate> kept_;
  std::size_t evaluations_ = 0;
  int generations_ = 0;
};

bool RespectsQuery(const RecourseCandidate& c, const RecourseQuery& query, const DataDictionary& dict) {
  std::set<std::string> frozen(query.frozen.begin(), query.frozen.end());
  for (const auto& ch : c.changed) {
    if (frozen.count(ch.name) || !dict.feature(ch.feature).actionable) return false;
  }
  return c.valid && BreachedRules(query.extra_constraints, query.baseline, c.record, dict).empty();
}

}  // namespace

RecourseSet Generate(const RecourseQuery& query, const RiskModel& model, const SearchConfig& config) {
  const auto& dict = model.dictionary();
  dict.ValidateRecord(query.baseline);
  if (query.k < 1) throw ValidationError("recourse query needs k >= 1");
  for (const auto& name : query.frozen) dict.IndexOrThrow(name);
  for (const auto& rule : query.extra_constraints) ValidateRule(rule, dict);

  RecourseSet out;
  out.stats.seed = query.seed;
  const auto scope = ProximityScope(query, dict);
  const auto current = model.Predict(query.baseline);
  out.stats.evaluations = 1;
  if (current.label == query.desired_label) {
    out.candidates.push_back(MakeCandidate(query.baseline, query.baseline, model, query.desired_label, scope));
    return out;
  }

  Search search(query, model, config);
  if (!search.has_free_features()) return out;
  for (int slot = 0; slot < query.k; ++slot) {
    auto cand = search.RunSlot(query.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(slot));
    if (!cand) continue;
    if (!RespectsQuery(*cand, query, dict)) continue;
    search.Keep(std::move(*cand));
  }
  out.candidates = std::move(search.kept());
  std::stable_sort(out.candidates.begin(), out.candidates.end(),
                   [](const auto& a, const auto& b) { return a.proximity < b.proximity; });
  out.diversity = MeanPairwiseProximity(out.candidates, dict, scope);
  out.stats.generations = search.generations();
  out.stats.evaluations += search.evaluations();
  return out;
}

std::optional<RecourseCandidate> BruteForceOracle(const RecourseQuery& query, const RiskModel& model,
                                                  int grid_steps) {
  const auto& dict = model.dictionary();
  const auto scope = ProximityScope(query, dict);
  const auto current = model.Predict(query.baseline);
  if (current.label == query.desired_label) {
    return MakeCandidate(query.baseline, query.baseline, model, query.desired_label, scope);
  }
  const auto free = FreeFeatures(query, dict);
  if (free.size() > 3) {
    throw ValidationError(fmt::format("brute-force oracle supports at most 3 free features, got {}", free.size()));
  }
  if (grid_steps < 2) throw ValidationError("grid_steps must be >= 2");

  std::vector<std::vector<double>> axes;
  for (auto f : free) {
    const auto d = DomainFor(f, query.extra_constraints, query.baseline, dict);
    std::vector<double> axis{query.baseline.values[f]};
    if (dict.feature(f).continuous()) {
      for (int s = 0; s < grid_steps; ++s) {
        const double v = d.lo + (d.hi - d.lo) * static_cast<double>(s) / static_cast<double>(grid_steps - 1);
        if (v != axis.front()) axis.push_back(v);
      }
    } else {
      for (int l : d.labels) axis.push_back(l);
    }
    axes.push_back(std::move(axis));
  }

  std::optional<RecourseCandidate> best;
  auto better = [](const RecourseCandidate& a, const RecourseCandidate& b) {
    if (a.proximity != b.proximity) return a.proximity < b.proximity;
    if (a.changed.size() != b.changed.size()) return a.changed.size() < b.changed.size();
    std::vector<std::string> na, nb;
    for (const auto& c : a.changed) na.push_back(c.name);
    for (const auto& c : b.changed) nb.push_back(c.name);
    return na < nb;
  };
  std::vector<std::size_t> pos(axes.size(), 0);
  PatientRecord rec = query.baseline;
  while (true) {
    for (std::size_t a = 0; a < axes.size(); ++a) rec.values[free[a]] = axes[a][pos[a]];
    if (model.FromProbability(model.Probability(rec)).label == query.desired_label) {
      auto cand = MakeCandidate(rec, query.baseline, model, query.desired_label, scope);
      if (!best || better(cand, *best)) best = std::move(cand);
    }
    std::size_t a = 0;
    while (a < axes.size() && ++pos[a] == axes[a].size()) pos[a++] = 0;
    if (a == axes.size()) break;
  }
  return best;
}

nlohmann::json ToJson(const RecourseCandidate& c, const DataDictionary& dict) {
  auto value = [&](std::size_t f, double v) {
    return dict.feature(f).continuous() ? nlohmann::json(v) : nlohmann::json(dict.FormatValue(f, v));
  };
  nlohmann::json changes = nlohmann::json::array();
  for (const auto& ch : c.changed) {
    changes.push_back(
        {{"feature", ch.name}, {"from", value(ch.feature, ch.old_value)}, {"to", value(ch.feature, ch.new_value)}});
  }
  return {{"record", dict.RecordToJson(c.record)},
          {"valid", c.valid},
          {"proximity", c.proximity},
          {"changed_features", changes},
          {"risk_score", c.prediction.risk_score},
          {"probability", c.prediction.probability},
          {"label", ToString(c.prediction.label)}};
}

nlohmann::json ToJson(const RecourseSet& set, const DataDictionary& dict) {
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : set.candidates) cands.push_back(ToJson(c, dict));
  return {{"candidates", cands},
          {"diversity", set.diversity},
          {"search_stats",
           {{"generations", set.stats.generations},
            {"evaluations", set.stats.evaluations},
            {"seed", set.stats.seed}}}};
}

}  // namespace cfx
