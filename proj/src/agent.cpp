#include "cfx/agent.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cfx/block_file.hpp"
#include "cfx/errors.hpp"

namespace cfx {

namespace {

class ToolArgumentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t Fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string Digest(const nlohmann::json& j) { return fmt::format("{:016x}", Fnv1a(j.dump())); }

void CollectScores(const nlohmann::json& j, std::vector<int>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if ((it.key() == "risk_score" || it.key() == "projected_risk") && it->is_number_integer()) {
        out.push_back(it->get<int>());
      } else {
        CollectScores(*it, out);
      }
    }
  } else if (j.is_array()) {
    for (const auto& v : j) CollectScores(v, out);
  }
}

std::string Display(const DataDictionary& dict, std::size_t f, double v) {
  if (!dict.feature(f).continuous()) return dict.FormatValue(f, v);
  if (v == std::round(v)) return fmt::format("{}", static_cast<long long>(v));
  return fmt::format("{:.1f}", v);
}

nlohmann::json JsonValue(const DataDictionary& dict, std::size_t f, double v) {
  return dict.feature(f).continuous() ? nlohmann::json(v) : nlohmann::json(dict.FormatValue(f, v));
}

double ValueFromJson(const DataDictionary& dict, std::size_t f, const nlohmann::json& j) {
  return j.is_string() ? dict.ParseValue(f, j.get<std::string>()) : j.get<double>();
}

void ExpectObject(const nlohmann::json& args, std::initializer_list<std::string_view> allowed) {
  if (!args.is_object()) throw ToolArgumentError("arguments must be a JSON object");
  for (auto it = args.begin(); it != args.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw ToolArgumentError(fmt::format("unexpected argument '{}'", it.key()));
    }
  }
}

int IntArg(const nlohmann::json& args, const char* key, int fallback, int lo, int hi) {
  if (!args.contains(key)) return fallback;
  const auto& v = args[key];
  if (!v.is_number_integer()) throw ToolArgumentError(fmt::format("'{}' must be an integer", key));
  const int x = v.get<int>();
  if (x < lo || x > hi) throw ToolArgumentError(fmt::format("'{}' must be in [{}, {}]", key, lo, hi));
  return x;
}

std::vector<std::string> FeatureListArg(const nlohmann::json& args, const char* key, const DataDictionary& dict) {
  std::vector<std::string> out;
  if (!args.contains(key)) return out;
  const auto& v = args[key];
  if (!v.is_array()) throw ToolArgumentError(fmt::format("'{}' must be a list of feature names", key));
  for (const auto& x : v) {
    if (!x.is_string()) throw ToolArgumentError(fmt::format("'{}' must be a list of feature names", key));
    const auto name = x.get<std::string>();
    if (!dict.IndexOf(name)) throw ToolArgumentError(fmt::format("unknown feature '{}'", name));
    out.push_back(name);
  }
  return out;
}

bool IsWordChar(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

bool ContainsWord(std::string_view text, std::string_view word) {
  if (word.empty()) return false;
  for (std::size_t at = text.find(word); at != std::string_view::npos; at = text.find(word, at + 1)) {
    const bool left = at == 0 || !IsWordChar(text[at - 1]);
    const bool right = at + word.size() >= text.size() || !IsWordChar(text[at + word.size()]);
    if (left && right) return true;
  }
  return false;
}

std::string ReplaceWord(std::string text, std::string_view word, std::string_view with) {
  std::size_t at = 0;
  while ((at = text.find(word, at)) != std::string::npos) {
    const bool left = at == 0 || !IsWordChar(text[at - 1]);
    const bool right = at + word.size() >= text.size() || !IsWordChar(text[at + word.size()]);
    if (left && right) {
      text.replace(at, word.size(), with);
      at += with.size();
    } else {
      at += word.size();
    }
  }
  return text;
}

// Sentences end at . ! ? followed by whitespace, or at a line break.
std::string RemoveSentencesMentioning(const std::string& text, std::string_view word) {
  std::vector<std::string> pieces;
  std::string cur;
  for (std::size_t i = 0; i < text.size(); ++i) {
    cur += text[i];
    const char c = text[i];
    const bool end = c == '\n' || ((c == '.' || c == '!' || c == '?') &&
                                   (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]))));
    if (end) {
      while (i + 1 < text.size() && text[i + 1] == ' ') cur += text[++i];
      pieces.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) pieces.push_back(std::move(cur));
  std::string out;
  for (const auto& p : pieces) {
    if (!ContainsWord(p, word)) out += p;
  }
  return Trim(out);
}

int Closest(const std::vector<int>& scores, int claim) {
  int best = scores.front();
  for (int s : scores) {
    if (std::abs(s - claim) < std::abs(best - claim) || (std::abs(s - claim) == std::abs(best - claim) && s < best)) {
      best = s;
    }
  }
  return best;
}

std::string FixRiskClaims(std::string text, const std::vector<int>& scores, std::optional<int> only) {
  if (scores.empty()) return text;
  auto claims = FindRiskScoreClaims(text);
  for (auto it = claims.rbegin(); it != claims.rend(); ++it) {
    if (only && it->value != *only) continue;
    if (std::find(scores.begin(), scores.end(), it->value) != scores.end()) continue;
    text.replace(it->pos, it->len, std::to_string(Closest(scores, it->value)));
  }
  return text;
}

nlohmann::json ExtractJsonObject(const std::string& text) {
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (!j.is_discarded()) return j;
  const auto b = text.find('{');
  const auto e = text.rfind('}');
  if (b == std::string::npos || e == std::string::npos || e <= b) return nlohmann::json::value_t::discarded;
  return nlohmann::json::parse(text.substr(b, e - b + 1), nullptr, false);
}

}  // namespace

// ---- serialization ---------------------------------------------------------

nlohmann::json ToJson(const RecommendationCard& card, const DataDictionary& dict) {
  nlohmann::json deltas = nlohmann::json::array();
  for (const auto& d : card.deltas) {
    deltas.push_back({{"feature", d.name},
                      {"from", JsonValue(dict, d.feature, d.old_value)},
                      {"to", JsonValue(dict, d.feature, d.new_value)}});
  }
  return {{"steps", card.steps},
          {"justification", card.justification},
          {"deltas", deltas},
          {"projected_risk", card.projected_risk},
          {"proximity", card.proximity}};
}

nlohmann::json ToJson(const Turn& t, const DataDictionary& dict) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& e : t.tool_trace) {
    trace.push_back({{"tool", e.tool}, {"arguments", e.arguments}, {"result_digest", e.result_digest}});
  }
  nlohmann::json verdicts = nlohmann::json::array();
  for (const auto& v : t.judge_verdicts) {
    verdicts.push_back(
        {{"candidate_id", v.candidate_id}, {"feasible", v.feasible}, {"reason", v.reason}, {"features", v.features}});
  }
  nlohmann::json cards = nlohmann::json::array();
  for (const auto& c : t.reply.cards) cards.push_back(ToJson(c, dict));
  return {{"index", t.index},
          {"user_text", t.user_text},
          {"moderation", ToJson(t.moderation)},
          {"tool_trace", trace},
          {"judge_verdicts", verdicts},
          {"reply",
           {{"text", t.reply.text},
            {"recommendation_cards", cards},
            {"updated_risk", {{"before", ToJson(t.reply.before)}, {"after", ToJson(t.reply.after)}}},
            {"panels_dirty", t.reply.panels_dirty}}},
          {"provider_calls", t.provider_calls},
          {"degradations", t.degradations},
          {"error", t.error},
          {"overrides", t.overrides}};
}

namespace {

Prediction PredictionFromJson(const nlohmann::json& j) {
  Prediction p;
  p.probability = j.at("probability").get<double>();
  p.risk_score = j.at("risk_score").get<int>();
  const auto label = ParseRiskLabel(j.at("label").get<std::string>());
  if (!label) throw ParseError("bad risk label in turn record");
  p.label = *label;
  return p;
}

}  // namespace

Turn TurnFromJson(const nlohmann::json& j, const DataDictionary& dict) {
  Turn t;
  t.index = j.at("index").get<int>();
  t.user_text = j.at("user_text").get<std::string>();
  t.moderation = ModerationVerdictFromJson(j.at("moderation"));
  for (const auto& e : j.at("tool_trace")) {
    t.tool_trace.push_back({e.at("tool").get<std::string>(), e.at("arguments"), e.at("result_digest").get<std::string>()});
  }
  for (const auto& v : j.at("judge_verdicts")) {
    t.judge_verdicts.push_back({v.at("candidate_id").get<std::size_t>(), v.at("feasible").get<bool>(),
                                v.at("reason").get<std::string>(),
                                v.value("features", std::vector<std::string>{})});
  }
  const auto& r = j.at("reply");
  t.reply.text = r.at("text").get<std::string>();
  for (const auto& c : r.at("recommendation_cards")) {
    RecommendationCard card;
    card.steps = c.at("steps").get<std::vector<std::string>>();
    card.justification = c.at("justification").get<std::string>();
    card.projected_risk = c.at("projected_risk").get<int>();
    card.proximity = c.value("proximity", 0.0);
    for (const auto& d : c.at("deltas")) {
      const auto name = d.at("feature").get<std::string>();
      const auto f = dict.IndexOrThrow(name);
      card.deltas.push_back({f, name, ValueFromJson(dict, f, d.at("from")), ValueFromJson(dict, f, d.at("to"))});
    }
    t.reply.cards.push_back(std::move(card));
  }
  t.reply.before = PredictionFromJson(r.at("updated_risk").at("before"));
  t.reply.after = PredictionFromJson(r.at("updated_risk").at("after"));
  t.reply.panels_dirty = r.at("panels_dirty").get<bool>();
  t.provider_calls = j.at("provider_calls").get<int>();
  t.degradations = j.value("degradations", std::vector<std::string>{});
  t.error = j.value("error", false);
  t.overrides = j.value("overrides", nlohmann::json::object());
  return t;
}

std::vector<Icebreaker> DefaultIcebreakers() {
  return {
      {"Why is the current risk score high?", "Why is this patient high risk?", "T1"},
      {"How can the risk be reduced?", "How can this patient reduce their risk?", "T2"},
      {"What if the patient stopped drinking alcohol?", "What if they stop drinking alcohol?", "T3"},
  };
}

// ---- session ---------------------------------------------------------------

ChatSession::ChatSession(std::string id, PatientRecord patient, const DataDictionary& dict, std::string created_at)
    : id_(std::move(id)), patient_(patient), created_at_(std::move(created_at)), scenario_(std::move(patient), dict) {}

std::vector<Turn> ChatSession::turns() const {
  std::lock_guard lock(state_mu_);
  return turns_;
}

ScenarioRecord ChatSession::scenario() const {
  std::lock_guard lock(state_mu_);
  return scenario_;
}

void ChatSession::SetScenario(ScenarioRecord scenario) {
  std::lock_guard lock(state_mu_);
  scenario_ = std::move(scenario);
}

void ChatSession::AppendTurn(Turn turn) {
  std::lock_guard lock(state_mu_);
  turns_.push_back(std::move(turn));
}

// ---- judge / verify parsing -----------------------------------------------

std::vector<JudgeVerdict> ParseJudgeResponse(const std::string& text, std::size_t n_candidates, bool* parsed) {
  std::vector<JudgeVerdict> out(n_candidates);
  for (std::size_t i = 0; i < n_candidates; ++i) out[i] = {i, true, "judge unavailable", {}};
  std::vector<bool> seen(n_candidates, false);
  const auto j = ExtractJsonObject(text);
  const bool ok = !j.is_discarded() && j.is_object() && j.contains("verdicts") && j["verdicts"].is_array();
  if (parsed) *parsed = ok;
  if (!ok) return out;
  for (const auto& v : j["verdicts"]) {
    if (!v.is_object() || !v.contains("candidate_id") || !v["candidate_id"].is_number_integer()) continue;
    const auto id = v["candidate_id"].get<long long>();
    if (id < 0 || static_cast<std::size_t>(id) >= n_candidates || seen[id]) continue;
    if (!v.contains("feasible") || !v["feasible"].is_boolean()) continue;
    seen[id] = true;
    auto& verdict = out[id];
    verdict.feasible = v["feasible"].get<bool>();
    verdict.reason = v.contains("reason") && v["reason"].is_string() ? Trim(v["reason"].get<std::string>()) : "";
    if (verdict.reason.empty()) verdict.reason = "unspecified";
    if (v.contains("features") && v["features"].is_array()) {
      for (const auto& f : v["features"]) {
        if (f.is_string()) verdict.features.push_back(f.get<std::string>());
      }
    }
  }
  return out;
}

std::optional<std::vector<VerifyQuestion>> ParseVerifyQuestions(const std::string& text) {
  const auto j = ExtractJsonObject(text);
  if (j.is_discarded() || !j.is_object() || !j.contains("questions") || !j["questions"].is_array()) {
    return std::nullopt;
  }
  std::vector<VerifyQuestion> out;
  for (const auto& q : j["questions"]) {
    if (out.size() == 3) break;
    if (!q.is_object() || !q.contains("kind") || !q["kind"].is_string()) continue;
    VerifyQuestion v;
    v.kind = q["kind"].get<std::string>();
    auto str = [&](const char* key) {
      if (!q.contains(key)) return std::string();
      return q[key].is_string() ? q[key].get<std::string>() : q[key].dump();
    };
    v.name = v.kind == "feature_value" ? str("feature") : str("name");
    v.claim = str("claim");
    out.push_back(std::move(v));
  }
  return out;
}

std::string ApplyVerification(const std::string& draft, const std::vector<VerifyQuestion>& questions,
                              const VerifyFacts& facts) {
  std::string out = draft;
  for (const auto& q : questions) {
    if (q.kind == "risk_score") {
      int claim = 0;
      const auto* b = q.claim.data();
      if (std::from_chars(b, b + q.claim.size(), claim).ec != std::errc()) continue;
      out = FixRiskClaims(out, facts.risk_scores, claim);
    } else if (q.kind == "feature_exists" && facts.dict) {
      if (q.name.empty() || facts.dict->IndexOf(q.name)) continue;
      out = RemoveSentencesMentioning(out, q.name);
    } else if (q.kind == "feature_value" && facts.dict) {
      const auto f = facts.dict->IndexOf(q.name);
      if (!f || q.claim.empty()) continue;
      const double truth = facts.record.values.at(*f);
      bool agrees = false;
      if (facts.dict->feature(*f).continuous()) {
        char* end = nullptr;
        const double v = std::strtod(q.claim.c_str(), &end);
        agrees = end != q.claim.c_str() && std::abs(v - truth) <= 0.05;
      } else {
        agrees = q.claim == facts.dict->FormatValue(*f, truth);
      }
      if (!agrees) out = ReplaceWord(out, q.claim, Display(*facts.dict, *f, truth));
    }
  }
  return FixRiskClaims(out, facts.risk_scores, std::nullopt);
}

// ---- agent -----------------------------------------------------------------

struct Agent::TurnState {
  ChatSession* session = nullptr;
  Turn* turn = nullptr;
  ScenarioRecord scenario;
  std::vector<std::pair<std::string, nlohmann::json>> results;
  std::vector<RecourseCandidate> recourse;
  PatientRecord recourse_baseline;
  bool judged = false;
  bool what_if_ran = false;
  int recourse_calls = 0;
};

Agent::Agent(AgentDeps deps, AgentConfig config) : deps_(deps), config_(std::move(config)) {
  if (!deps_.model || !deps_.dict || !deps_.data || !deps_.rules || !deps_.moderator || !deps_.provider) {
    throw ValidationError("agent: missing dependency");
  }
}

std::vector<ToolSchema> Agent::ToolSchemas() {
  const nlohmann::json no_args = {{"type", "object"}, {"properties", nlohmann::json::object()}};
  return {
      {"predict_risk", "Risk score (0-100) and label for the patient's current values, including what-if changes.",
       no_args},
      {"get_importance",
       "Actionable factors ranked by how much moving each one alone to its low-risk value would lower the risk.",
       {{"type", "object"},
        {"properties", {{"top_k", {{"type", "integer"}, {"minimum", 1}, {"maximum", 17}}}}}}},
      {"generate_recourse",
       "Search for small changes to actionable features that bring the patient to the desired risk label.",
       {{"type", "object"},
        {"properties",
         {{"k", {{"type", "integer"}, {"minimum", 1}, {"maximum", 5}}},
          {"frozen", {{"type", "array"}, {"items", {{"type", "string"}}}}},
          {"desired", {{"type", "string"}, {"enum", {"low_risk", "high_risk"}}}}}}}},
      {"what_if",
       "Apply hypothetical values to actionable features and report the risk before and after. Changes persist for "
       "the rest of the conversation.",
       {{"type", "object"},
        {"properties",
         {{"overrides", {{"type", "object"}, {"description", "feature name -> number or label"}}},
          {"reset", {{"type", "boolean"}}}}}}},
      {"get_panels", "Where the patient's values sit relative to the low-risk population, with warnings.",
       {{"type", "object"}, {"properties", {{"features", {{"type", "array"}, {"items", {{"type", "string"}}}}}}}}},
  };
}

std::string Agent::SystemPrompt(const PatientRecord& effective) const {
  return RenderContextBlock(*deps_.dict, &effective) +
         "\nYou are a clinical decision-support assistant explaining a cardiovascular-risk model to a clinician.\n"
         "Use only the data dictionary, the patient values above and tool results.\n"
         "Reason step by step about which tool answers the question, then call it. Repeat until you can answer.\n"
         "Never suggest changing a feature marked actionable: no.\n"
         "When presenting recommendations, list the steps in order and give for each step the causal reasoning that "
         "links the change to cardiovascular risk.\n"
         "Quote risk scores exactly as the tools return them.\n";
}

RecommendationCard Agent::MakeCard(const RecourseCandidate& c, const PatientRecord& baseline) const {
  const auto& dict = *deps_.dict;
  const auto& model = *deps_.model;
  RecommendationCard card;
  card.deltas = c.changed;
  card.projected_risk = c.prediction.risk_score;
  card.proximity = c.proximity;
  const int base = model.FromProbability(model.Probability(baseline)).risk_score;
  std::vector<std::string> alone;
  for (const auto& ch : c.changed) {
    const auto& spec = dict.feature(ch.feature);
    const std::string unit = spec.continuous() && !spec.unit.empty() ? " " + spec.unit : "";
    if (spec.continuous()) {
      card.steps.push_back(fmt::format("{} {} from {} to {}{}", ch.new_value < ch.old_value ? "Reduce" : "Increase",
                                       ch.name, Display(dict, ch.feature, ch.old_value),
                                       Display(dict, ch.feature, ch.new_value), unit));
    } else {
      card.steps.push_back(fmt::format("Change {} from {} to {}", ch.name, Display(dict, ch.feature, ch.old_value),
                                       Display(dict, ch.feature, ch.new_value)));
    }
    PatientRecord one = baseline;
    one.values[ch.feature] = ch.new_value;
    alone.push_back(fmt::format("{} alone moves the score to {}", ch.name,
                                model.FromProbability(model.Probability(one)).risk_score));
  }
  std::string joined;
  for (std::size_t i = 0; i < alone.size(); ++i) joined += (i ? "; " : "") + alone[i];
  card.justification = fmt::format("{}. Together the changes move the score from {} to {} ({}).", joined, base,
                                   c.prediction.risk_score, ToString(c.prediction.label));
  return card;
}

nlohmann::json Agent::ToolPredict(const nlohmann::json& args, TurnState& st) {
  ExpectObject(args, {});
  const auto p = deps_.model->Predict(st.scenario.effective());
  return {{"risk_score", p.risk_score},
          {"probability", p.probability},
          {"label", ToString(p.label)},
          {"threshold_score", static_cast<int>(std::lround(100 * deps_.model->threshold()))},
          {"what_if_overrides", st.scenario.OverridesJson(*deps_.dict)}};
}

nlohmann::json Agent::ToolImportance(const nlohmann::json& args, TurnState& st) {
  ExpectObject(args, {"top_k"});
  const auto& dict = *deps_.dict;
  const int top_k = IntArg(args, "top_k", 5, 1, static_cast<int>(dict.size()));
  const auto& rec = st.scenario.effective();
  auto ranked = LocalImportance(rec, *deps_.model, *deps_.data, dict);
  nlohmann::json factors = nlohmann::json::array();
  for (const auto& e : ranked) {
    if (static_cast<int>(factors.size()) == top_k) break;
    const auto f = dict.IndexOrThrow(e.feature);
    const auto ideal = ComputeIdealRange(dict, f, *deps_.data);
    nlohmann::json ideal_json = ideal.continuous ? nlohmann::json{{"lo", ideal.lo}, {"hi", ideal.hi}}
                                                 : nlohmann::json{{"label", dict.FormatValue(f, ideal.label)}};
    factors.push_back({{"feature", e.feature},
                       {"rank", e.rank},
                       {"risk_drop", e.delta_probability},
                       {"current", JsonValue(dict, f, rec.values[f])},
                       {"low_risk_value", ideal_json}});
  }
  return {{"factors", factors}};
}

nlohmann::json Agent::ToolWhatIf(const nlohmann::json& args, TurnState& st) {
  ExpectObject(args, {"overrides", "reset"});
  if (args.contains("reset") && !args["reset"].is_boolean()) throw ToolArgumentError("'reset' must be a boolean");
  ScenarioRecord next = st.scenario;
  if (args.value("reset", false)) next.Reset();
  if (args.contains("overrides")) {
    try {
      next.Apply(args["overrides"], *deps_.dict);
    } catch (const ValidationError& e) {
      throw ToolArgumentError(e.what());
    }
  } else if (!args.value("reset", false)) {
    throw ToolArgumentError("'overrides' is required");
  }
  st.scenario = std::move(next);
  st.what_if_ran = true;
  const auto r = WhatIf(st.scenario, *deps_.model);
  auto j = ToJson(r, *deps_.dict);
  j["overrides"] = st.scenario.OverridesJson(*deps_.dict);
  return j;
}

nlohmann::json Agent::ToolPanels(const nlohmann::json& args, TurnState& st) {
  ExpectObject(args, {"features"});
  const auto& dict = *deps_.dict;
  auto wanted = FeatureListArg(args, "features", dict);
  const auto panels = BuildPanels(st.scenario.effective(), *deps_.data, dict);
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : panels) {
    const bool pick = wanted.empty() ? p.actionable
                                     : std::find(wanted.begin(), wanted.end(), p.feature) != wanted.end();
    if (!pick) continue;
    out.push_back({{"feature", p.feature},
                   {"current", JsonValue(dict, dict.IndexOrThrow(p.feature), p.current)},
                   {"warning", p.warning},
                   {"summary", p.delta_text}});
  }
  return {{"panels", out}};
}

nlohmann::json Agent::ToolRecourse(const nlohmann::json& args, TurnState& st) {
  ExpectObject(args, {"k", "frozen", "desired"});
  const auto& dict = *deps_.dict;
  const auto& model = *deps_.model;
  RecourseQuery query;
  query.baseline = st.scenario.effective();
  query.k = IntArg(args, "k", 3, 1, 5);
  query.frozen = FeatureListArg(args, "frozen", dict);
  if (args.contains("desired")) {
    const auto label = args["desired"].is_string() ? ParseRiskLabel(args["desired"].get<std::string>()) : std::nullopt;
    if (!label) throw ToolArgumentError("'desired' must be low_risk or high_risk");
    query.desired_label = *label;
  }
  query.seed = (config_.seed ^ Fnv1a(st.session->patient().id)) + 1000ull * st.turn->index + 10ull * st.recourse_calls;
  ++st.recourse_calls;
  const auto& baseline = query.baseline;

  int removed = 0;
  bool guard_regen = false;
  auto run = [&]() {
    auto set = Generate(query, model, config_.search);
    auto check = Check(set, baseline, *deps_.rules, dict);
    if (!check.violations.empty() && !guard_regen) {
      guard_regen = true;
      removed += static_cast<int>(check.violations.size());
      for (auto& c : ToConstraints(check.violations)) query.extra_constraints.push_back(std::move(c));
      set = Generate(query, model, config_.search);
      check = Check(set, baseline, *deps_.rules, dict);
    }
    removed += static_cast<int>(check.violations.size());
    std::vector<RecourseCandidate> kept;
    for (auto& c : check.passed.candidates) {
      if (!c.changed.empty()) kept.push_back(std::move(c));
    }
    check.passed.candidates = std::move(kept);
    return check.passed;
  };

  auto passed = run();
  int rejected = 0;
  bool regenerated = false;
  if (!passed.candidates.empty() && !st.judged) {
    st.judged = true;
    auto verdicts = Judge(passed, baseline, &st.turn->provider_calls, &st.turn->degradations);
    std::vector<RecourseCandidate> feasible;
    std::set<std::string> blocked;
    for (std::size_t i = 0; i < passed.candidates.size(); ++i) {
      if (verdicts[i].feasible) {
        feasible.push_back(passed.candidates[i]);
      } else {
        ++rejected;
        for (const auto& f : verdicts[i].features) {
          if (dict.IndexOf(f)) blocked.insert(f);
        }
      }
    }
    for (auto& v : verdicts) st.turn->judge_verdicts.push_back(std::move(v));
    if (feasible.empty()) {
      regenerated = true;
      for (const auto& f : blocked) {
        if (std::find(query.frozen.begin(), query.frozen.end(), f) == query.frozen.end()) query.frozen.push_back(f);
      }
      query.seed += 1;
      nlohmann::json regen_args = {{"k", query.k}, {"frozen", query.frozen}, {"regeneration", true}};
      passed = run();
      st.turn->tool_trace.push_back({"generate_recourse", regen_args, Digest(ToJson(passed, dict))});
    } else {
      passed.candidates = std::move(feasible);
    }
  }

  st.recourse = passed.candidates;
  st.recourse_baseline = baseline;
  const auto base = model.Predict(baseline);
  nlohmann::json options = nlohmann::json::array();
  for (std::size_t i = 0; i < passed.candidates.size(); ++i) {
    const auto& c = passed.candidates[i];
    nlohmann::json changes = nlohmann::json::array();
    for (const auto& ch : c.changed) {
      changes.push_back({{"feature", ch.name},
                         {"from", JsonValue(dict, ch.feature, ch.old_value)},
                         {"to", JsonValue(dict, ch.feature, ch.new_value)}});
    }
    options.push_back({{"id", i},
                       {"changes", changes},
                       {"projected_risk", c.prediction.risk_score},
                       {"projected_label", ToString(c.prediction.label)},
                       {"proximity", c.proximity}});
  }
  nlohmann::json out = {{"baseline_risk_score", base.risk_score},
                        {"options", options},
                        {"count", options.size()},
                        {"guardrail_violations_removed", removed},
                        {"judge_rejected", rejected},
                        {"regenerated", regenerated}};
  if (base.label == query.desired_label) {
    out["message"] = fmt::format("the patient is already {}", ToString(query.desired_label));
  } else if (options.empty()) {
    out["message"] = "no recommendation within the actionable features passed the safety checks";
  }
  return out;
}

nlohmann::json Agent::ExecuteTool(const ToolCall& call, TurnState& st) {
  if (call.name == "predict_risk") return ToolPredict(call.arguments, st);
  if (call.name == "get_importance") return ToolImportance(call.arguments, st);
  if (call.name == "generate_recourse") return ToolRecourse(call.arguments, st);
  if (call.name == "what_if") return ToolWhatIf(call.arguments, st);
  if (call.name == "get_panels") return ToolPanels(call.arguments, st);
  throw ToolArgumentError(fmt::format("unknown tool '{}'", call.name));
}

std::vector<JudgeVerdict> Agent::Judge(const RecourseSet& candidates, const PatientRecord& baseline,
                                       int* provider_calls, std::vector<std::string>* degradations) {
  const auto& dict = *deps_.dict;
  const auto& model = *deps_.model;
  const int base = model.FromProbability(model.Probability(baseline)).risk_score;
  std::string listing = fmt::format("CANDIDATES (current risk score {})\n", base);
  for (std::size_t i = 0; i < candidates.candidates.size(); ++i) {
    const auto& c = candidates.candidates[i];
    std::string changes;
    for (const auto& ch : c.changed) {
      if (!changes.empty()) changes += "; ";
      changes += fmt::format("{}: {} -> {}", ch.name, Display(dict, ch.feature, ch.old_value),
                             Display(dict, ch.feature, ch.new_value));
    }
    listing += fmt::format("candidate {}: {} (projected risk score {})\n", i, changes, c.prediction.risk_score);
  }
  ProviderRequest req;
  req.purpose = Purpose::kJudge;
  req.temperature = config_.temperature;
  req.messages.push_back(
      {Role::kSystem,
       RenderContextBlock(dict, &baseline) +
           "\nYou review recommended changes for the patient above. For each candidate decide whether a clinician "
           "would consider it practical and safe for this specific patient, given age, existing conditions and "
           "current values. Reject changes that demand unrealistic effort or could harm the patient.\n"
           "Respond with JSON only: {\"verdicts\": [{\"candidate_id\": <int>, \"feasible\": <bool>, \"reason\": "
           "<text>, \"features\": [<features that make it infeasible>]}]}\n",
       std::nullopt, "", ""});
  req.messages.push_back({Role::kUser, listing, std::nullopt, "", ""});
  ++*provider_calls;
  std::string text;
  try {
    text = deps_.provider->Complete(req).content;
  } catch (const ProviderError& e) {
    spdlog::warn("judge unavailable, keeping all candidates: {}", e.what());
    degradations->push_back("judge_unavailable");
    return ParseJudgeResponse("", candidates.candidates.size(), nullptr);
  }
  bool parsed = false;
  auto verdicts = ParseJudgeResponse(text, candidates.candidates.size(), &parsed);
  if (!parsed) {
    spdlog::warn("judge response unparseable, keeping all candidates");
    degradations->push_back("judge_unparseable");
  }
  return verdicts;
}

std::string Agent::Verify(const std::string& draft, const VerifyFacts& facts, int* provider_calls,
                          std::vector<std::string>* degradations) {
  nlohmann::json fact_json = {{"risk_scores", facts.risk_scores}};
  if (facts.dict) fact_json["patient"] = facts.dict->ValuesToJson(facts.record);
  ProviderRequest req;
  req.purpose = Purpose::kVerify;
  req.temperature = config_.temperature;
  req.messages.push_back(
      {Role::kSystem,
       "You check a draft reply for factual errors before it is shown. Ask at most 3 questions about facts stated "
       "in the draft that can be checked against the data. Respond with JSON only: {\"questions\": [{\"kind\": "
       "\"risk_score\", \"claim\": <int>} | {\"kind\": \"feature_exists\", \"name\": <text>} | {\"kind\": "
       "\"feature_value\", \"feature\": <name>, \"claim\": <text>}]}\n",
       std::nullopt, "", ""});
  req.messages.push_back({Role::kUser,
                          fmt::format("{}\n{}\n{}\n\nFACTS\n{}", kDraftBegin, draft, kDraftEnd, fact_json.dump()),
                          std::nullopt, "", ""});
  ++*provider_calls;
  std::string text;
  try {
    text = deps_.provider->Complete(req).content;
  } catch (const ProviderError& e) {
    spdlog::warn("verification unavailable, draft kept: {}", e.what());
    degradations->push_back("verify_unavailable");
    return draft;
  }
  auto questions = ParseVerifyQuestions(text);
  if (!questions) {
    spdlog::warn("verification response unparseable, draft kept");
    degradations->push_back("verify_unparseable");
    return draft;
  }
  return ApplyVerification(draft, *questions, facts);
}

Turn Agent::HandleMessage(ChatSession& session, const std::string& text) {
  if (Trim(text).empty()) throw ValidationError("message text is empty");
  std::unique_lock lock(session.turn_mutex(), std::defer_lock);
  if (config_.queue_turns) {
    lock.lock();
  } else if (!lock.try_lock()) {
    throw SessionBusy(fmt::format("session {} has a turn in flight", session.id()));
  }
  const auto& dict = *deps_.dict;
  const auto& model = *deps_.model;

  Turn t;
  t.index = static_cast<int>(session.turn_count_locked());
  t.user_text = text;
  TurnState st;
  st.session = &session;
  st.turn = &t;
  st.scenario = session.scenario();

  auto finish = [&]() {
    t.reply.before = model.Predict(st.scenario.baseline());
    t.reply.after = model.Predict(st.scenario.effective());
    t.overrides = st.scenario.OverridesJson(dict);
    session.SetScenario(st.scenario);
    session.AppendTurn(t);
    return t;
  };
  auto fail = [&](const std::string& why) {
    spdlog::error("session {} turn {}: {}", session.id(), t.index, why);
    t.error = true;
    t.degradations.push_back("error: " + why);
    t.reply.text = config_.error_text;
    t.reply.cards.clear();
    t.reply.panels_dirty = false;
    st.scenario = session.scenario();
    return finish();
  };

  t.moderation = deps_.moderator->Moderate(text, deps_.moderation_client, &t.degradations);
  if (!t.moderation.allowed) {
    t.reply.text = config_.refusal_text;
    return finish();
  }
  if (t.moderation.category == ModerationCategory::kOffScope) {
    t.reply.text = config_.redirect_text;
    return finish();
  }

  std::vector<ChatMessage> messages;
  messages.push_back({Role::kSystem, SystemPrompt(st.scenario.effective()), std::nullopt, "", ""});
  for (const auto& prev : session.turns()) {
    if (prev.error || prev.moderation.category != ModerationCategory::kClean) continue;
    messages.push_back({Role::kUser, prev.user_text, std::nullopt, "", ""});
    messages.push_back({Role::kAssistant, prev.reply.text, std::nullopt, "", ""});
  }
  messages.push_back({Role::kUser, text, std::nullopt, "", ""});

  const auto schemas = ToolSchemas();
  int rounds = 0;
  bool reprompted = false;
  std::string draft;
  try {
    for (;;) {
      ProviderRequest req;
      req.purpose = Purpose::kChat;
      req.messages = messages;
      if (rounds < config_.max_tool_rounds) req.tools = schemas;
      req.temperature = config_.temperature;
      ++t.provider_calls;
      auto resp = deps_.provider->Complete(req);
      if (!resp.tool_call) {
        draft = resp.content;
        break;
      }
      if (rounds >= config_.max_tool_rounds) return fail("tool call after the tool budget was spent");
      const auto& call = *resp.tool_call;
      nlohmann::json result;
      const std::size_t slot = t.tool_trace.size();
      t.tool_trace.push_back({call.name, call.arguments, ""});
      try {
        if (!call.arguments.is_object()) throw ToolArgumentError("arguments must be a JSON object");
        result = ExecuteTool(call, st);
      } catch (const ToolArgumentError& e) {
        t.tool_trace.resize(slot);
        if (reprompted) return fail(fmt::format("malformed arguments for {}: {}", call.name, e.what()));
        reprompted = true;
        messages.push_back({Role::kAssistant, resp.content, call, "", ""});
        messages.push_back({Role::kTool,
                            nlohmann::json{{"error", fmt::format("invalid arguments: {}. Correct them and retry.",
                                                                 e.what())}}
                                .dump(),
                            std::nullopt, call.name, call.id});
        continue;
      }
      ++rounds;
      t.tool_trace[slot].result_digest = Digest(result);
      st.results.emplace_back(call.name, result);
      messages.push_back({Role::kAssistant, resp.content, call, "", ""});
      messages.push_back({Role::kTool, result.dump(), std::nullopt, call.name, call.id});
    }
  } catch (const ProviderError& e) {
    return fail(fmt::format("provider failure: {}", e.what()));
  } catch (const std::exception& e) {
    return fail(e.what());
  }
  if (Trim(draft).empty()) return fail("provider returned an empty reply");

  const auto& recourse = st.recourse;
  for (std::size_t i = 0; i < recourse.size() && static_cast<int>(i) < config_.max_cards; ++i) {
    t.reply.cards.push_back(MakeCard(recourse[i], st.recourse_baseline));
  }
  t.reply.panels_dirty = st.what_if_ran;

  VerifyFacts facts;
  facts.dict = &dict;
  facts.record = st.scenario.effective();
  for (const auto& [name, result] : st.results) CollectScores(result, facts.risk_scores);
  facts.risk_scores.push_back(model.Predict(st.scenario.baseline()).risk_score);
  facts.risk_scores.push_back(model.Predict(st.scenario.effective()).risk_score);
  for (const auto& c : t.reply.cards) facts.risk_scores.push_back(c.projected_risk);
  std::sort(facts.risk_scores.begin(), facts.risk_scores.end());
  facts.risk_scores.erase(std::unique(facts.risk_scores.begin(), facts.risk_scores.end()), facts.risk_scores.end());
  t.reply.text = Verify(Trim(draft), facts, &t.provider_calls, &t.degradations);
  return finish();
}

}  // namespace cfx
