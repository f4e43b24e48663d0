#include "cfx/schema.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <unordered_map>

#include <fmt/format.h>

#include "cfx/block_file.hpp"
#include "cfx/csv.hpp"
#include "cfx/errors.hpp"

namespace cfx {

std::string_view ToString(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::kContinuous: return "continuous";
    case FeatureKind::kCategorical: return "categorical";
    case FeatureKind::kBinary: return "binary";
  }
  return "?";
}

std::string_view ToString(HealthyDirection dir) {
  switch (dir) {
    case HealthyDirection::kIncrease: return "increase";
    case HealthyDirection::kDecrease: return "decrease";
    case HealthyDirection::kTargetRange: return "target_range";
    case HealthyDirection::kNone: return "none";
  }
  return "?";
}

std::optional<int> FeatureSpec::LabelIndex(std::string_view label) const {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) return static_cast<int>(i);
  }
  return std::nullopt;
}

int FeatureSpec::HealthRank(int label_index) const {
  return healthy_direction == HealthyDirection::kDecrease ? -label_index : label_index;
}

namespace {

std::optional<double> ParseDouble(std::string_view text) {
  auto t = Trim(text);
  if (t.empty()) return std::nullopt;
  double v = 0.0;
  const char* first = t.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

bool ParseBool(const std::string& v, const std::string& feature) {
  if (v == "true" || v == "yes") return true;
  if (v == "false" || v == "no") return false;
  throw ParseError(fmt::format("feature '{}': actionable must be true or false, got '{}'", feature, v));
}

FeatureKind ParseKind(const std::string& v, const std::string& feature) {
  if (v == "continuous") return FeatureKind::kContinuous;
  if (v == "categorical") return FeatureKind::kCategorical;
  if (v == "binary") return FeatureKind::kBinary;
  throw ParseError(fmt::format("feature '{}': unknown kind '{}'", feature, v));
}

HealthyDirection ParseDirection(const std::string& v, const std::string& feature) {
  if (v == "increase") return HealthyDirection::kIncrease;
  if (v == "decrease") return HealthyDirection::kDecrease;
  if (v == "target_range") return HealthyDirection::kTargetRange;
  if (v == "none") return HealthyDirection::kNone;
  throw ParseError(fmt::format("feature '{}': unknown healthy_direction '{}'", feature, v));
}

std::pair<double, double> ParsePair(const std::string& v, const std::string& feature,
                                    std::string_view key) {
  auto parts = SplitList(v, ',');
  if (parts.size() != 2) {
    throw ParseError(fmt::format("feature '{}': {} must be 'lo, hi'", feature, key));
  }
  auto lo = ParseDouble(parts[0]);
  auto hi = ParseDouble(parts[1]);
  if (!lo || !hi) throw ParseError(fmt::format("feature '{}': {} is not numeric", feature, key));
  return {*lo, *hi};
}

}  // namespace

DataDictionary::DataDictionary(std::vector<FeatureSpec> features, std::string target_name,
                               std::vector<std::string> target_labels,
                               std::string target_positive_label)
    : features_(std::move(features)),
      target_name_(std::move(target_name)),
      target_labels_(std::move(target_labels)),
      target_positive_(std::move(target_positive_label)) {
  Validate();
}

DataDictionary DataDictionary::Load(const std::string& path) {
  try {
    return Parse(ReadFile(path));
  } catch (const ParseError& e) {
    throw ParseError(fmt::format("{}: {}", path, e.what()));
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("{}: {}", path, e.what()));
  }
}

DataDictionary DataDictionary::Parse(std::string_view text) {
  const auto blocks = ParseBlocks(text);
  const Block& pre = blocks.front();
  std::string target = pre.Require("target", "dictionary preamble");
  std::vector<std::string> target_labels;
  for (auto& l : SplitList(pre.Require("target_labels", "dictionary preamble"), '|')) {
    target_labels.push_back(l);
  }
  std::string positive = pre.Require("target_positive", "dictionary preamble");

  std::vector<FeatureSpec> specs;
  for (std::size_t b = 1; b < blocks.size(); ++b) {
    const Block& blk = blocks[b];
    constexpr std::string_view kPrefix = "feature ";
    if (blk.header.rfind(kPrefix, 0) != 0) {
      throw ParseError(fmt::format("line {}: expected [feature <name>], got [{}]", blk.line, blk.header));
    }
    FeatureSpec s;
    s.name = Trim(std::string_view(blk.header).substr(kPrefix.size()));
    const std::string ctx = fmt::format("feature '{}'", s.name);
    s.description = blk.Get("description").value_or("");
    s.kind = ParseKind(blk.Require("kind", ctx), s.name);
    if (s.continuous()) {
      auto [lo, hi] = ParsePair(blk.Require("range", ctx), s.name, "range");
      s.min = lo;
      s.max = hi;
    } else {
      s.labels = SplitList(blk.Require("labels", ctx), '|');
    }
    s.unit = blk.Get("unit").value_or("");
    s.actionable = ParseBool(blk.Require("actionable", ctx), s.name);
    s.healthy_direction = ParseDirection(blk.Get("healthy_direction").value_or("none"), s.name);
    if (auto tr = blk.Get("target_range")) s.target_range = ParsePair(*tr, s.name, "target_range");
    s.practical_note = blk.Get("practical_note").value_or("");
    specs.push_back(std::move(s));
  }
  return DataDictionary(std::move(specs), std::move(target), std::move(target_labels),
                        std::move(positive));
}

void DataDictionary::Validate() const {
  std::set<std::string> seen;
  for (const auto& s : features_) {
    if (s.name.empty()) throw ValidationError("feature with empty name");
    if (!seen.insert(s.name).second) {
      throw ValidationError(fmt::format("duplicate feature name '{}'", s.name));
    }
    if (s.continuous()) {
      if (!(s.min < s.max)) {
        throw ValidationError(fmt::format("feature '{}': empty range [{}, {}]", s.name, s.min, s.max));
      }
    } else {
      std::set<std::string> distinct(s.labels.begin(), s.labels.end());
      if (distinct.size() != s.labels.size() || s.labels.size() < 2) {
        throw ValidationError(fmt::format("feature '{}': needs at least 2 distinct labels", s.name));
      }
      if (s.kind == FeatureKind::kBinary && s.labels.size() != 2) {
        throw ValidationError(fmt::format("feature '{}': binary features take exactly 2 labels", s.name));
      }
    }
    if (!s.actionable && s.healthy_direction != HealthyDirection::kNone) {
      throw ValidationError(
          fmt::format("feature '{}': non-actionable features must have healthy_direction none", s.name));
    }
    if (s.healthy_direction == HealthyDirection::kTargetRange) {
      if (!s.continuous() || !s.target_range) {
        throw ValidationError(fmt::format(
            "feature '{}': target_range direction needs a continuous feature with target_range", s.name));
      }
    }
    if (s.target_range) {
      auto [lo, hi] = *s.target_range;
      if (!(lo < hi) || lo < s.min || hi > s.max) {
        throw ValidationError(
            fmt::format("feature '{}': target_range [{}, {}] outside [{}, {}]", s.name, lo, hi, s.min, s.max));
      }
    }
  }
  if (target_name_.empty()) throw ValidationError("missing target name");
  if (seen.count(target_name_)) {
    throw ValidationError(fmt::format("target '{}' is also a predictor", target_name_));
  }
  if (target_labels_.size() != 2 || target_labels_[0] == target_labels_[1]) {
    throw ValidationError("target needs exactly 2 distinct labels");
  }
  if (!TargetClass(target_positive_)) {
    throw ValidationError(fmt::format("target positive label '{}' not among target labels", target_positive_));
  }
}

std::optional<std::size_t> DataDictionary::IndexOf(std::string_view name) const {
  for (std::size_t i = 0; i < features_.size(); ++i) {
    if (features_[i].name == name) return i;
  }
  return std::nullopt;
}

std::size_t DataDictionary::IndexOrThrow(std::string_view name) const {
  auto i = IndexOf(name);
  if (!i) throw ValidationError(fmt::format("unknown feature '{}'", name));
  return *i;
}

std::optional<int> DataDictionary::TargetClass(std::string_view label) const {
  if (label != target_labels_[0] && label != target_labels_[1]) return std::nullopt;
  return label == target_positive_ ? 1 : 0;
}

const std::string& DataDictionary::TargetLabel(int cls) const {
  if (cls == 1) return target_positive_;
  return target_labels_[0] == target_positive_ ? target_labels_[1] : target_labels_[0];
}

bool DataDictionary::InSpec(std::size_t i, double value) const {
  const auto& s = features_.at(i);
  if (!std::isfinite(value)) return false;
  if (s.continuous()) return value >= s.min && value <= s.max;
  return value == std::floor(value) && value >= 0 && value < static_cast<double>(s.labels.size());
}

double DataDictionary::ParseValue(std::size_t i, std::string_view text) const {
  const auto& s = features_.at(i);
  if (s.continuous()) {
    auto v = ParseDouble(text);
    if (!v) throw ValidationError(fmt::format("feature '{}': '{}' is not a number", s.name, text));
    if (*v < s.min || *v > s.max) {
      throw ValidationError(fmt::format("feature '{}': {} outside [{}, {}]", s.name, *v, s.min, s.max));
    }
    return *v;
  }
  auto idx = s.LabelIndex(Trim(text));
  if (!idx) throw ValidationError(fmt::format("feature '{}': unknown label '{}'", s.name, text));
  return *idx;
}

std::string DataDictionary::FormatValue(std::size_t i, double value) const {
  const auto& s = features_.at(i);
  if (s.continuous()) return fmt::format("{}", value);
  return s.labels.at(static_cast<std::size_t>(value));
}

void DataDictionary::ValidateRecord(const PatientRecord& record) const {
  if (record.values.size() != features_.size()) {
    throw ValidationError(fmt::format("record '{}' has {} values, dictionary has {} predictors", record.id,
                                      record.values.size(), features_.size()));
  }
  for (std::size_t i = 0; i < features_.size(); ++i) {
    if (!InSpec(i, record.values[i])) {
      throw ValidationError(fmt::format("record '{}': feature '{}' value out of spec", record.id,
                                        features_[i].name));
    }
  }
}

nlohmann::json DataDictionary::ValuesToJson(const PatientRecord& record) const {
  nlohmann::json values = nlohmann::json::object();
  for (std::size_t i = 0; i < features_.size(); ++i) {
    if (features_[i].continuous()) {
      values[features_[i].name] = record.values[i];
    } else {
      values[features_[i].name] = FormatValue(i, record.values[i]);
    }
  }
  return values;
}

nlohmann::json DataDictionary::RecordToJson(const PatientRecord& record) const {
  return {{"id", record.id}, {"values", ValuesToJson(record)}};
}

PatientRecord DataDictionary::RecordFromValues(const nlohmann::json& values, std::string id) const {
  if (!values.is_object()) throw ValidationError("patient values must be an object");
  PatientRecord r;
  r.id = std::move(id);
  r.values.resize(features_.size());
  for (std::size_t i = 0; i < features_.size(); ++i) {
    auto it = values.find(features_[i].name);
    if (it == values.end()) {
      throw ValidationError(fmt::format("record '{}': missing feature '{}'", r.id, features_[i].name));
    }
    if (it->is_number()) {
      if (!features_[i].continuous()) {
        throw ValidationError(fmt::format("feature '{}': expected a label", features_[i].name));
      }
      r.values[i] = it->get<double>();
      if (!InSpec(i, r.values[i])) {
        throw ValidationError(fmt::format("feature '{}': {} outside [{}, {}]", features_[i].name,
                                          r.values[i], features_[i].min, features_[i].max));
      }
    } else if (it->is_string()) {
      r.values[i] = ParseValue(i, it->get<std::string>());
    } else {
      throw ValidationError(fmt::format("feature '{}': unsupported value type", features_[i].name));
    }
  }
  for (auto it = values.begin(); it != values.end(); ++it) {
    if (!IndexOf(it.key())) throw ValidationError(fmt::format("unknown feature '{}'", it.key()));
  }
  return r;
}

PatientRecord DataDictionary::RecordFromJson(const nlohmann::json& j) const {
  if (!j.is_object() || !j.contains("values")) throw ValidationError("patient record needs 'values'");
  return RecordFromValues(j.at("values"), j.value("id", std::string("patient")));
}

std::vector<std::size_t> DataDictionary::ActionableIndices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < features_.size(); ++i) {
    if (features_[i].actionable) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset

std::array<std::size_t, 2> Dataset::ClassCounts() const {
  std::array<std::size_t, 2> c{0, 0};
  for (int l : labels) ++c[l ? 1 : 0];
  return c;
}

double Dataset::PositiveFraction() const {
  if (labels.empty()) return 0.0;
  return static_cast<double>(ClassCounts()[1]) / static_cast<double>(labels.size());
}

const PatientRecord* Dataset::FindById(std::string_view id) const {
  for (const auto& r : records) {
    if (r.id == id) return &r;
  }
  return nullptr;
}

double Quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

void Dataset::RefreshStats(const DataDictionary& dict) {
  stats.assign(dict.size(), FeatureStats{});
  for (std::size_t f = 0; f < dict.size(); ++f) {
    const auto& spec = dict.feature(f);
    auto& st = stats[f];
    if (!spec.continuous()) {
      st.min = 0;
      st.max = static_cast<double>(spec.labels.size() - 1);
      for (auto& c : st.counts) c.assign(spec.labels.size(), 0);
      for (std::size_t r = 0; r < records.size(); ++r) {
        ++st.counts[labels[r] ? 1 : 0][static_cast<std::size_t>(records[r].values[f])];
      }
      continue;
    }
    std::array<std::vector<double>, 2> by_class;
    st.min = std::numeric_limits<double>::infinity();
    st.max = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < records.size(); ++r) {
      const double v = records[r].values[f];
      by_class[labels[r] ? 1 : 0].push_back(v);
      st.min = std::min(st.min, v);
      st.max = std::max(st.max, v);
    }
    if (records.empty()) st.min = st.max = 0;
    const double width = (st.max - st.min) / kHistogramBins;
    for (int cls = 0; cls < 2; ++cls) {
      st.counts[cls].assign(kHistogramBins, 0);
      for (double v : by_class[cls]) {
        int bin = width > 0 ? static_cast<int>((v - st.min) / width) : 0;
        bin = std::clamp(bin, 0, kHistogramBins - 1);
        ++st.counts[cls][bin];
      }
      std::sort(by_class[cls].begin(), by_class[cls].end());
      st.quartiles[cls] = {Quantile(by_class[cls], 0.25), Quantile(by_class[cls], 0.5),
                           Quantile(by_class[cls], 0.75)};
    }
  }
}

std::vector<std::size_t> StratifiedSample(const std::vector<int>& labels, std::size_t n,
                                          std::uint64_t seed) {
  if (n >= labels.size()) {
    std::vector<std::size_t> all(labels.size());
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  std::array<std::vector<std::size_t>, 2> idx;
  for (std::size_t i = 0; i < labels.size(); ++i) idx[labels[i] ? 1 : 0].push_back(i);
  const double frac = static_cast<double>(idx[1].size()) / static_cast<double>(labels.size());
  std::size_t take_pos = static_cast<std::size_t>(std::llround(frac * static_cast<double>(n)));
  take_pos = std::min(take_pos, idx[1].size());
  std::size_t take_neg = std::min(n - take_pos, idx[0].size());
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (int cls = 0; cls < 2; ++cls) {
    std::shuffle(idx[cls].begin(), idx[cls].end(), rng);
    const std::size_t take = cls ? take_pos : take_neg;
    out.insert(out.end(), idx[cls].begin(), idx[cls].begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> StratifiedSplit(
    const std::vector<int>& labels, double holdout_fraction, std::uint64_t seed) {
  std::array<std::vector<std::size_t>, 2> idx;
  for (std::size_t i = 0; i < labels.size(); ++i) idx[labels[i] ? 1 : 0].push_back(i);
  std::mt19937_64 rng(seed ^ 0x5eed5eedULL);
  std::vector<std::size_t> train, held;
  for (auto& cls : idx) {
    std::shuffle(cls.begin(), cls.end(), rng);
    const auto n_held = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(cls.size())));
    held.insert(held.end(), cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(n_held));
    train.insert(train.end(), cls.begin() + static_cast<std::ptrdiff_t>(n_held), cls.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(held.begin(), held.end());
  return {std::move(train), std::move(held)};
}

Dataset IngestCsv(const std::string& path, const DataDictionary& dict, const IngestOptions& options) {
  std::ifstream in(path);
  if (!in) throw ParseError(fmt::format("cannot open '{}'", path));
  std::string line;
  if (!std::getline(in, line)) throw ParseError(fmt::format("{}: empty file", path));
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  const auto header = csv::SplitRow(line);
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[Trim(header[i])] = i;

  std::vector<std::size_t> feature_col(dict.size());
  for (std::size_t f = 0; f < dict.size(); ++f) {
    auto it = col.find(dict.feature(f).name);
    if (it == col.end()) {
      throw ParseError(fmt::format("{}: missing column '{}'", path, dict.feature(f).name));
    }
    feature_col[f] = it->second;
  }
  auto target_it = col.find(dict.target_name());
  if (target_it == col.end()) {
    throw ParseError(fmt::format("{}: missing column '{}'", path, dict.target_name()));
  }
  const std::size_t target_col = target_it->second;

  Dataset ds;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    const auto fields = csv::SplitRow(line);
    if (fields.size() != header.size()) {
      ++ds.dropped_rows;
      continue;
    }
    auto cls = dict.TargetClass(Trim(fields[target_col]));
    if (!cls) {
      ++ds.dropped_rows;
      continue;
    }
    PatientRecord rec;
    rec.id = fmt::format("r{}", row);
    rec.values.resize(dict.size());
    bool ok = true;
    for (std::size_t f = 0; f < dict.size() && ok; ++f) {
      try {
        rec.values[f] = dict.ParseValue(f, fields[feature_col[f]]);
      } catch (const ValidationError&) {
        ok = false;
      }
    }
    if (!ok) {
      ++ds.dropped_rows;
      continue;
    }
    ds.records.push_back(std::move(rec));
    ds.labels.push_back(*cls);
  }
  ds.source_rows = row;
  if (ds.records.empty()) throw ValidationError(fmt::format("{}: no valid rows after filtering", path));

  if (options.max_rows && *options.max_rows < ds.records.size()) {
    auto keep = StratifiedSample(ds.labels, *options.max_rows, options.seed);
    Dataset sub;
    sub.source_rows = ds.source_rows;
    sub.dropped_rows = ds.dropped_rows;
    sub.subsample_seed = options.seed;
    sub.records.reserve(keep.size());
    for (auto i : keep) {
      sub.records.push_back(std::move(ds.records[i]));
      sub.labels.push_back(ds.labels[i]);
    }
    ds = std::move(sub);
  }
  ds.RefreshStats(dict);
  return ds;
}

std::string RenderContextBlock(const DataDictionary& dict, const PatientRecord* record) {
  std::string out = fmt::format("DATA DICTIONARY (target: {}; positive label: {})\n", dict.target_name(),
                                dict.target_positive_label());
  for (const auto& s : dict.features()) {
    std::string domain;
    if (s.continuous()) {
      domain = fmt::format("range [{}, {}]", s.min, s.max);
    } else {
      domain = "labels {";
      for (std::size_t i = 0; i < s.labels.size(); ++i) {
        if (i) domain += " | ";
        domain += s.labels[i];
      }
      domain += "}";
    }
    out += fmt::format("- {} ({}): {}; {}; unit: {}; actionable: {}", s.name, ToString(s.kind), s.description,
                       domain, s.unit.empty() ? "none" : s.unit, s.actionable ? "yes" : "no");
    if (s.target_range) {
      out += fmt::format("; recommended band [{}, {}]", s.target_range->first, s.target_range->second);
    }
    if (!s.practical_note.empty()) out += fmt::format("; note: {}", s.practical_note);
    out += '\n';
  }
  if (record) {
    out += fmt::format("\nCURRENT PATIENT (id {})\n", record->id);
    for (std::size_t i = 0; i < dict.size(); ++i) {
      out += fmt::format("{}: {}\n", dict.feature(i).name, dict.FormatValue(i, record->values[i]));
    }
  }
  return out;
}

}  // namespace cfx
