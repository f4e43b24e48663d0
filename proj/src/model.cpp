#include "cfx/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cfx/block_file.hpp"
#include "cfx/errors.hpp"

namespace cfx {

// ---------------------------------------------------------------------------
// Encoder

Encoder::Encoder(const DataDictionary& dict) : dict_(dict) {
  for (std::size_t f = 0; f < dict_.size(); ++f) {
    const auto& s = dict_.feature(f);
    const std::size_t w = s.continuous() ? 1 : s.labels.size();
    slots_.push_back({f, width_, w});
    width_ += w;
  }
}

void Encoder::Encode(const PatientRecord& record, std::span<double> out) const {
  std::fill(out.begin(), out.end(), 0.0);
  for (const auto& slot : slots_) {
    const auto& s = dict_.feature(slot.feature);
    const double v = record.values[slot.feature];
    if (s.continuous()) {
      out[slot.offset] = (v - s.min) / s.range();
    } else {
      out[slot.offset + static_cast<std::size_t>(v)] = 1.0;
    }
  }
}

std::vector<double> Encoder::Encode(const PatientRecord& record) const {
  std::vector<double> out(width_);
  Encode(record, out);
  return out;
}

PatientRecord Encoder::Decode(std::span<const double> encoded, std::string id) const {
  PatientRecord r;
  r.id = std::move(id);
  r.values.resize(dict_.size());
  for (const auto& slot : slots_) {
    const auto& s = dict_.feature(slot.feature);
    if (s.continuous()) {
      r.values[slot.feature] = std::clamp(s.min + encoded[slot.offset] * s.range(), s.min, s.max);
    } else {
      auto first = encoded.begin() + static_cast<std::ptrdiff_t>(slot.offset);
      r.values[slot.feature] =
          static_cast<double>(std::max_element(first, first + static_cast<std::ptrdiff_t>(slot.width)) - first);
    }
  }
  return r;
}

std::size_t Encoder::SlotFor(std::string_view key) const {
  const auto eq = key.find('=');
  const auto name = key.substr(0, eq);
  const auto f = dict_.IndexOrThrow(name);
  const auto& s = dict_.feature(f);
  if (s.continuous()) {
    if (eq != std::string_view::npos) throw ValidationError(fmt::format("'{}' is continuous", name));
    return slots_[f].offset;
  }
  if (eq == std::string_view::npos) throw ValidationError(fmt::format("'{}' needs Feature=Label", name));
  auto idx = s.LabelIndex(key.substr(eq + 1));
  if (!idx) throw ValidationError(fmt::format("unknown label in '{}'", key));
  return slots_[f].offset + static_cast<std::size_t>(*idx);
}

// ---------------------------------------------------------------------------

std::string_view ToString(Architecture a) { return a == Architecture::kMlp ? "mlp" : "logistic"; }
std::string_view ToString(RiskLabel l) { return l == RiskLabel::kHighRisk ? "high_risk" : "low_risk"; }

std::optional<RiskLabel> ParseRiskLabel(std::string_view s) {
  if (s == "high_risk") return RiskLabel::kHighRisk;
  if (s == "low_risk") return RiskLabel::kLowRisk;
  return std::nullopt;
}

Prediction MakePrediction(double probability, double threshold) {
  Prediction p;
  p.probability = probability;
  p.risk_score = static_cast<int>(std::lround(100.0 * probability));
  p.label = probability >= threshold ? RiskLabel::kHighRisk : RiskLabel::kLowRisk;
  return p;
}

namespace {

double Sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double Softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace

RiskModel::RiskModel(const DataDictionary& dict, Architecture arch, int hidden_width)
    : encoder_(dict), arch_(arch) {
  const std::size_t in = encoder_.width();
  if (arch == Architecture::kLogistic) {
    layers_.push_back({1, in, 0});
  } else {
    if (hidden_width < 1) throw ValidationError("hidden_width must be >= 1");
    const auto h = static_cast<std::size_t>(hidden_width);
    layers_.push_back({h, in, 0});
    layers_.push_back({1, h, layers_[0].size()});
  }
  params_.assign(layers_.back().offset + layers_.back().size(), 0.0);
}

RiskModel RiskModel::Logistic(const DataDictionary& dict, double bias,
                              const std::map<std::string, double>& weights) {
  RiskModel m(dict, Architecture::kLogistic, 0);
  for (const auto& [key, w] : weights) m.params_[m.encoder_.SlotFor(key)] = w;
  m.params_[m.encoder_.width()] = bias;
  return m;
}

double RiskModel::Logit(std::span<const double> x, std::vector<double>* hidden) const {
  const Layer& l0 = layers_[0];
  const double* w = params_.data() + l0.offset;
  const double* b = w + l0.rows * l0.cols;
  if (arch_ == Architecture::kLogistic) {
    double z = b[0];
    for (std::size_t i = 0; i < l0.cols; ++i) z += w[i] * x[i];
    return z;
  }
  const Layer& l1 = layers_[1];
  const double* w2 = params_.data() + l1.offset;
  const double b2 = w2[l1.cols];
  double z = b2;
  for (std::size_t j = 0; j < l0.rows; ++j) {
    const double* row = w + j * l0.cols;
    double a = b[j];
    for (std::size_t i = 0; i < l0.cols; ++i) {
      if (x[i] != 0.0) a += row[i] * x[i];
    }
    const double h = std::tanh(a);
    if (hidden) (*hidden)[j] = h;
    z += w2[j] * h;
  }
  return z;
}

double RiskModel::ProbabilityEncoded(std::span<const double> x) const { return Sigmoid(Logit(x, nullptr)); }

double RiskModel::Probability(const PatientRecord& record) const {
  thread_local std::vector<double> buf;
  buf.resize(encoder_.width());
  encoder_.Encode(record, buf);
  return ProbabilityEncoded(buf);
}

Prediction RiskModel::Predict(const PatientRecord& record) const {
  dictionary().ValidateRecord(record);
  return FromProbability(Probability(record));
}

double RiskModel::Loss(std::span<const double> rows, std::span<const int> labels,
                       std::span<const double> weights) const {
  const std::size_t in = encoder_.width();
  const std::size_t n = labels.size();
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double z = Logit(rows.subspan(r * in, in), nullptr);
    loss += weights[r] * (Softplus(z) - labels[r] * z);
  }
  return loss / static_cast<double>(n);
}

double RiskModel::LossAndGradient(std::span<const double> rows, std::span<const int> labels,
                                  std::span<const double> weights, std::vector<double>& grad) const {
  grad.assign(params_.size(), 0.0);
  const std::size_t in = encoder_.width();
  const std::size_t n = labels.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> hidden(arch_ == Architecture::kMlp ? layers_[0].rows : 0);
  double loss = 0.0;
  const Layer& l0 = layers_[0];
  for (std::size_t r = 0; r < n; ++r) {
    auto x = rows.subspan(r * in, in);
    const double z = Logit(x, &hidden);
    loss += weights[r] * (Softplus(z) - labels[r] * z);
    const double dz = weights[r] * (Sigmoid(z) - labels[r]) * inv_n;
    if (arch_ == Architecture::kLogistic) {
      for (std::size_t i = 0; i < in; ++i) grad[i] += dz * x[i];
      grad[in] += dz;
      continue;
    }
    const Layer& l1 = layers_[1];
    const double* w2 = params_.data() + l1.offset;
    double* gw2 = grad.data() + l1.offset;
    double* gw1 = grad.data() + l0.offset;
    double* gb1 = gw1 + l0.rows * l0.cols;
    gw2[l1.cols] += dz;
    for (std::size_t j = 0; j < l0.rows; ++j) {
      gw2[j] += dz * hidden[j];
      const double dh = dz * w2[j] * (1.0 - hidden[j] * hidden[j]);
      gb1[j] += dh;
      double* grow = gw1 + j * l0.cols;
      for (std::size_t i = 0; i < in; ++i) {
        if (x[i] != 0.0) grow[i] += dh * x[i];
      }
    }
  }
  return loss * inv_n;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {
constexpr std::string_view kMagic = "cfx-risk-model";
constexpr int kFormatVersion = 1;

std::string Num(double v) { return fmt::format("{}", v); }
}  // namespace

std::string RiskModel::Serialize() const {
  std::ostringstream out;
  const auto& dict = dictionary();
  out << kMagic << ' ' << kFormatVersion << '\n';
  out << "architecture " << ToString(arch_) << '\n';
  out << "threshold " << Num(threshold_) << '\n';
  out << "split_seed " << split_seed_ << '\n';
  out << "metrics " << Num(metrics_.accuracy) << ' ' << (metrics_.auc ? Num(*metrics_.auc) : "nan") << ' '
      << metrics_.tp << ' ' << metrics_.tn << ' ' << metrics_.fp << ' ' << metrics_.fn << '\n';
  out << "layout " << dict.size() << '\n';
  for (const auto& slot : encoder_.slots()) {
    const auto& s = dict.feature(slot.feature);
    out << "slot " << slot.offset << ' ' << std::quoted(s.name) << ' ' << ToString(s.kind);
    if (s.continuous()) {
      out << ' ' << Num(s.min) << ' ' << Num(s.max);
    } else {
      out << ' ' << s.labels.size();
      for (const auto& l : s.labels) out << ' ' << std::quoted(l);
    }
    out << '\n';
  }
  out << "layers " << layers_.size() << '\n';
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const auto& l = layers_[li];
    const bool last = li + 1 == layers_.size();
    out << "layer " << l.rows << ' ' << l.cols << ' ' << (last ? "sigmoid" : "tanh") << '\n';
    const double* w = params_.data() + l.offset;
    for (std::size_t r = 0; r < l.rows; ++r) {
      for (std::size_t c = 0; c < l.cols; ++c) out << (c ? " " : "") << Num(w[r * l.cols + c]);
      out << '\n';
    }
    out << "bias";
    for (std::size_t r = 0; r < l.rows; ++r) out << ' ' << Num(w[l.rows * l.cols + r]);
    out << '\n';
  }
  out << "end\n";
  return out.str();
}

void RiskModel::Save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(fmt::format("cannot write '{}'", path));
  out << Serialize();
}

RiskModel RiskModel::Load(const std::string& path, const DataDictionary& dict) {
  try {
    return Parse(ReadFile(path), dict);
  } catch (const ParseError& e) {
    throw ParseError(fmt::format("{}: {}", path, e.what()));
  }
}

RiskModel RiskModel::Parse(std::string_view text, const DataDictionary& dict) {
  std::istringstream in{std::string(text)};
  auto expect = [&](std::string_view word) {
    std::string tok;
    if (!(in >> tok) || tok != word) {
      throw ParseError(fmt::format("weights file: expected '{}', got '{}'", word, tok));
    }
  };
  auto number = [&]() {
    std::string tok;
    if (!(in >> tok)) throw ParseError("weights file: unexpected end");
    if (tok == "nan") return std::numeric_limits<double>::quiet_NaN();
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size()) throw ParseError(fmt::format("weights file: bad number '{}'", tok));
    return v;
  };
  auto count = [&]() {
    long long v = 0;
    if (!(in >> v) || v < 0) throw ParseError("weights file: bad count");
    return static_cast<std::size_t>(v);
  };

  expect(kMagic);
  if (count() != kFormatVersion) throw ParseError("weights file: unsupported version");
  expect("architecture");
  std::string arch;
  in >> arch;
  if (arch != "mlp" && arch != "logistic") throw ParseError(fmt::format("unknown architecture '{}'", arch));
  expect("threshold");
  const double threshold = number();
  expect("split_seed");
  std::uint64_t split_seed = 0;
  if (!(in >> split_seed)) throw ParseError("weights file: bad split_seed");
  expect("metrics");
  EvalReport metrics;
  metrics.accuracy = number();
  const double auc = number();
  if (!std::isnan(auc)) metrics.auc = auc;
  metrics.tp = count();
  metrics.tn = count();
  metrics.fp = count();
  metrics.fn = count();

  expect("layout");
  if (count() != dict.size()) throw ParseError("weights file: layout does not match dictionary size");
  Encoder enc(dict);
  for (const auto& slot : enc.slots()) {
    const auto& s = dict.feature(slot.feature);
    expect("slot");
    std::string name, kind;
    if (count() != slot.offset) throw ParseError("weights file: slot offset mismatch");
    in >> std::quoted(name) >> kind;
    if (name != s.name || kind != ToString(s.kind)) {
      throw ParseError(fmt::format("weights file: slot '{}' does not match dictionary feature '{}'", name, s.name));
    }
    if (s.continuous()) {
      if (number() != s.min || number() != s.max) {
        throw ParseError(fmt::format("weights file: range of '{}' differs from dictionary", name));
      }
    } else {
      if (count() != s.labels.size()) throw ParseError(fmt::format("weights file: labels of '{}' differ", name));
      for (const auto& l : s.labels) {
        std::string got;
        in >> std::quoted(got);
        if (got != l) throw ParseError(fmt::format("weights file: labels of '{}' differ", name));
      }
    }
  }

  expect("layers");
  const std::size_t n_layers = count();
  const Architecture a = arch == "mlp" ? Architecture::kMlp : Architecture::kLogistic;
  if ((a == Architecture::kMlp && n_layers != 2) || (a == Architecture::kLogistic && n_layers != 1)) {
    throw ParseError("weights file: layer count inconsistent with architecture");
  }
  std::size_t hidden = 0;
  std::vector<double> params;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  for (std::size_t li = 0; li < n_layers; ++li) {
    expect("layer");
    const std::size_t rows = count();
    const std::size_t cols = count();
    std::string act;
    in >> act;
    shapes.emplace_back(rows, cols);
    if (li == 0) hidden = rows;
    for (std::size_t k = 0; k < rows * cols; ++k) params.push_back(number());
    expect("bias");
    for (std::size_t k = 0; k < rows; ++k) params.push_back(number());
  }
  expect("end");

  RiskModel m(dict, a, a == Architecture::kMlp ? static_cast<int>(hidden) : 0);
  for (std::size_t li = 0; li < n_layers; ++li) {
    if (shapes[li].first != m.layers_[li].rows || shapes[li].second != m.layers_[li].cols) {
      throw ParseError(fmt::format("weights file: layer {} shape mismatch", li));
    }
  }
  if (params.size() != m.params_.size()) throw ParseError("weights file: parameter count mismatch");
  m.params_ = std::move(params);
  m.threshold_ = threshold;
  m.metrics_ = metrics;
  m.split_seed_ = split_seed;
  return m;
}

// ---------------------------------------------------------------------------
// Training and evaluation

std::optional<double> RankAuc(std::span<const double> scores, std::span<const int> labels) {
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += l ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based midrank
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]]) rank_sum += mid;
    }
    i = j + 1;
  }
  const double u = rank_sum - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

EvalReport Evaluate(const RiskModel& model, const Dataset& data, std::span<const std::size_t> indices) {
  EvalReport rep;
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(indices.size());
  for (auto i : indices) {
    const double p = model.Probability(data.records[i]);
    const bool pred = model.FromProbability(p).label == RiskLabel::kHighRisk;
    const bool pos = data.labels[i] != 0;
    if (pred && pos) ++rep.tp;
    else if (!pred && !pos) ++rep.tn;
    else if (pred) ++rep.fp;
    else ++rep.fn;
    scores.push_back(p);
    labels.push_back(data.labels[i]);
  }
  if (rep.n() == 0) throw ValidationError("evaluate: empty dataset");
  rep.accuracy = static_cast<double>(rep.tp + rep.tn) / static_cast<double>(rep.n());
  rep.auc = RankAuc(scores, labels);
  if (!rep.auc) spdlog::warn("evaluate: AUC undefined, only one class present");
  return rep;
}

EvalReport Evaluate(const RiskModel& model, const Dataset& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  return Evaluate(model, data, all);
}

std::vector<std::size_t> HeldOutIndices(const Dataset& data, std::uint64_t seed, double fraction) {
  return StratifiedSplit(data.labels, fraction, seed).second;
}

RiskModel Train(const Dataset& data, const DataDictionary& dict, const TrainConfig& config) {
  const auto counts = data.ClassCounts();
  if (counts[0] == 0 || counts[1] == 0) {
    throw TrainingError("training data contains a single class");
  }
  if (config.epochs < 1 || config.batch_size < 1 || !(config.learning_rate > 0)) {
    throw ValidationError("epochs, batch_size and learning_rate must be positive");
  }
  auto [train_idx, held_idx] = StratifiedSplit(data.labels, config.holdout_fraction, config.seed);

  RiskModel model(dict, config.architecture, config.hidden_width);
  model.set_split_seed(config.seed);
  const std::size_t in = model.encoder().width();

  std::vector<double> x(train_idx.size() * in);
  std::vector<int> y(train_idx.size());
  std::vector<double> w(train_idx.size(), 1.0);
  std::array<double, 2> class_n{0, 0};
  for (std::size_t k = 0; k < train_idx.size(); ++k) {
    model.encoder().Encode(data.records[train_idx[k]], std::span(x).subspan(k * in, in));
    y[k] = data.labels[train_idx[k]];
    class_n[y[k]] += 1;
  }
  if (config.class_weighting) {
    const double n = static_cast<double>(train_idx.size());
    for (std::size_t k = 0; k < y.size(); ++k) w[k] = n / (2.0 * class_n[y[k]]);
  }

  std::mt19937_64 rng(config.seed);
  auto params = model.mutable_params();
  for (const auto& layer : model.layers()) {
    const double limit = std::sqrt(6.0 / static_cast<double>(layer.rows + layer.cols));
    std::uniform_real_distribution<double> init(-limit, limit);
    for (std::size_t k = 0; k < layer.rows * layer.cols; ++k) params[layer.offset + k] = init(rng);
  }
  params[params.size() - 1] = std::log(class_n[1] / class_n[0]);

  std::vector<double> m1(params.size(), 0.0), m2(params.size(), 0.0), grad;
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  std::size_t step = 0;
  std::vector<std::size_t> order(train_idx.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(config.batch_size);
  std::vector<double> bx;
  std::vector<int> by;
  std::vector<double> bw;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      bx.resize((end - start) * in);
      by.resize(end - start);
      bw.resize(end - start);
      for (std::size_t k = start; k < end; ++k) {
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(order[k] * in), in,
                    bx.begin() + static_cast<std::ptrdiff_t>((k - start) * in));
        by[k - start] = y[order[k]];
        bw[k - start] = w[order[k]];
      }
      const double loss = model.LossAndGradient(bx, by, bw, grad);
      if (!std::isfinite(loss)) {
        throw TrainingError(fmt::format("non-finite loss at epoch {} batch {}", epoch, batches));
      }
      ++step;
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      for (std::size_t p = 0; p < params.size(); ++p) {
        m1[p] = kBeta1 * m1[p] + (1 - kBeta1) * grad[p];
        m2[p] = kBeta2 * m2[p] + (1 - kBeta2) * grad[p] * grad[p];
        params[p] -= config.learning_rate * (m1[p] / c1) / (std::sqrt(m2[p] / c2) + kEps);
      }
      epoch_loss += loss;
      ++batches;
    }
    spdlog::debug("epoch {}: mean loss {:.5f}", epoch, epoch_loss / static_cast<double>(batches));
  }
  model.set_metrics(Evaluate(model, data, held_idx));
  return model;
}

}  // namespace cfx
