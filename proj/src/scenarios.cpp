#include "cfx/scenarios.hpp"

#include <filesystem>
#include <map>
#include <regex>
#include <set>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "cfx/block_file.hpp"
#include "cfx/errors.hpp"
#include "cfx/mock_provider.hpp"
#include "cfx/moderation.hpp"

namespace cfx {

namespace fs = std::filesystem;

EvalInputs LoadEvalInputs(const ApiConfig& config) {
  for (const auto& [path, what] : {std::pair{config.weights_path, "model weights"},
                                   std::pair{config.dictionary_path, "data dictionary"},
                                   std::pair{config.rules_path, "rules"}, std::pair{config.dataset_path, "dataset"}}) {
    if (path.empty()) throw ValidationError(fmt::format("config: {} path is not set", what));
    if (!fs::exists(path)) throw ValidationError(fmt::format("{} file not found: {}", what, path));
  }
  EvalInputs in;
  in.dict = DataDictionary::Load(config.dictionary_path);
  in.model = std::make_shared<const RiskModel>(RiskModel::Load(config.weights_path, in.dict));
  in.data = IngestCsv(config.dataset_path, in.dict, {config.max_rows, config.subsample_seed});
  in.rules = LoadRules(config.rules_path, in.dict);
  in.moderation_dir = config.moderation_dir;
  return in;
}

bool ScenarioReport::passed() const {
  if (metrics.guardrail_violations || metrics.frozen_changes || metrics.budget_overruns) return false;
  return std::all_of(scenarios.begin(), scenarios.end(), [](const auto& s) { return s.passed; });
}

nlohmann::json ScenarioReport::ToJson() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& s : scenarios) list.push_back({{"name", s.name}, {"passed", s.passed}, {"failures", s.failures}});
  return {{"passed", passed()},
          {"scenarios", list},
          {"metrics",
           {{"cards", metrics.cards},
            {"validity_rate", metrics.validity_rate()},
            {"mean_proximity", metrics.mean_proximity()},
            {"mean_changed_features", metrics.mean_changed()},
            {"guardrail_violations", metrics.guardrail_violations},
            {"frozen_feature_changes", metrics.frozen_changes},
            {"provider_budget_overruns", metrics.budget_overruns},
            {"moderation_recall", metrics.moderation_recall()},
            {"injection_refused", metrics.injection_refused},
            {"injection_total", metrics.injection_total},
            {"benign_refused", metrics.benign_refused},
            {"benign_total", metrics.benign_total}}}};
}

std::string ScenarioReport::ToText() const {
  std::string out;
  for (const auto& s : scenarios) {
    out += fmt::format("{} {}\n", s.passed ? "PASS" : "FAIL", s.name);
    for (const auto& f : s.failures) out += fmt::format("     - {}\n", f);
  }
  out += fmt::format(
      "validity rate {:.3f} over {} cards; mean proximity {:.4f}; mean changed features {:.2f}\n"
      "guardrail violations {}; frozen-feature changes {}; provider budget overruns {}\n"
      "moderation recall {:.3f} ({}/{}); benign refusals {}/{}\n",
      metrics.validity_rate(), metrics.cards, metrics.mean_proximity(), metrics.mean_changed(),
      metrics.guardrail_violations, metrics.frozen_changes, metrics.budget_overruns, metrics.moderation_recall(),
      metrics.injection_refused, metrics.injection_total, metrics.benign_refused, metrics.benign_total);
  out += passed() ? "eval passed\n" : "eval FAILED\n";
  return out;
}

namespace {

constexpr int kProviderBudget = 2 + 4 + 1 + 1;

const std::set<std::string> kExpectKeys = {
    "tools",        "tools_include", "tools_exclude",  "refused",      "category",
    "min_cards",    "max_cards",     "risk_changed",   "panels_dirty", "regenerated",
    "reply_matches", "reply_excludes", "error",        "cards_exclude_features", "risk_exact"};

struct Running {
  std::unique_ptr<Service> service;
  std::unique_ptr<httplib::Client> client;
};

class Runner {
 public:
  Runner(const EvalInputs& in, std::string script, std::uint64_t seed, ScenarioReport& report)
      : in_(in), script_(std::move(script)), seed_(seed), report_(report) {}

  Running Start(const RiskModel& model) {
    ServiceParts parts;
    parts.dict = in_.dict;
    parts.model = std::make_unique<RiskModel>(model);
    parts.data = in_.data;
    parts.rules = in_.rules;
    parts.moderator = std::make_unique<Moderator>(Moderator::Load(in_.moderation_dir, in_.dict));
    parts.provider = std::make_unique<MockProvider>(MockProvider::Load(script_));
    AgentConfig cfg;
    cfg.seed = seed_;
    Running r;
    r.service = std::make_unique<Service>(std::move(parts), std::move(cfg), "");
    const int port = r.service->Start("127.0.0.1", 0);
    r.client = std::make_unique<httplib::Client>("127.0.0.1", port);
    r.client->set_read_timeout(300);
    return r;
  }

  nlohmann::json Call(httplib::Client& cli, const std::string& method, const std::string& path,
                      const nlohmann::json& body, int* status) {
    httplib::Result res = method == "GET" ? cli.Get(path) : cli.Post(path, body.dump(), "application/json");
    if (!res) throw ProviderError(fmt::format("{} {}: {}", method, path, httplib::to_string(res.error())));
    *status = res->status;
    return nlohmann::json::parse(res->body, nullptr, false);
  }

  std::string SelectPatient(const Service& svc, const nlohmann::json& filter) {
    const auto& dict = svc.dictionary();
    auto matches = [&](const PatientRecord& r, const nlohmann::json& where) {
      for (auto it = where.begin(); it != where.end(); ++it) {
        const auto f = dict.IndexOrThrow(it.key());
        const double v = it->is_string() ? dict.ParseValue(f, it->get<std::string>()) : it->get<double>();
        if (r.values[f] != v) return false;
      }
      return true;
    };
    const auto where = filter.value("where", nlohmann::json::object());
    const auto exclude = filter.value("exclude", nlohmann::json::object());
    std::size_t skip = filter.value("skip", 0);
    for (auto i : svc.patient_indices()) {
      const auto& r = svc.data().records[i];
      if (filter.contains("high_risk")) {
        const bool high = svc.model().Predict(r).label == RiskLabel::kHighRisk;
        if (high != filter["high_risk"].get<bool>()) continue;
      }
      if (!matches(r, where)) continue;
      if (!exclude.empty()) {
        bool excluded = false;
        for (auto it = exclude.begin(); it != exclude.end(); ++it) {
          if (matches(r, nlohmann::json{{it.key(), *it}})) excluded = true;
        }
        if (excluded) continue;
      }
      if (skip-- > 0) continue;
      return r.id;
    }
    throw ValidationError(fmt::format("no held-out patient matches {}", filter.dump()));
  }

  // Counts cards and guardrail or frozen-feature breaches; returns problems.
  std::vector<std::string> AuditCards(const Service& svc, const PatientRecord& start, const nlohmann::json& cards) {
    std::vector<std::string> problems;
    const auto& dict = svc.dictionary();
    for (const auto& card : cards) {
      ++report_.metrics.cards;
      PatientRecord base = start;
      PatientRecord cand = start;
      std::vector<std::tuple<std::size_t, double, double>> deltas;
      for (const auto& d : card.at("deltas")) {
        const auto f = dict.IndexOrThrow(d.at("feature").get<std::string>());
        auto val = [&](const nlohmann::json& v) {
          return v.is_string() ? dict.ParseValue(f, v.get<std::string>()) : v.get<double>();
        };
        const double from = val(d.at("from"));
        const double to = val(d.at("to"));
        if (from != start.values[f]) problems.push_back(fmt::format("card delta for {} does not start at the patient value", dict.feature(f).name));
        base.values[f] = from;
        cand.values[f] = to;
        deltas.emplace_back(f, from, to);
        if (!dict.feature(f).actionable) {
          ++report_.metrics.frozen_changes;
          problems.push_back(fmt::format("card changes non-actionable {}", dict.feature(f).name));
        }
      }
      for (const auto& [f, from, to] : deltas) {
        for (const auto& rule : svc.rules()) {
          if (rule.feature_index == f && Breaches(rule, base, from, to, dict)) {
            ++report_.metrics.guardrail_violations;
            problems.push_back(fmt::format("card breaches rule: {}", rule.message));
          }
        }
      }
      report_.metrics.changed_sum += deltas.size();
      report_.metrics.proximity_sum += card.value("proximity", 0.0);
      const auto p = svc.model().Predict(cand);
      if (p.label == RiskLabel::kLowRisk && p.risk_score == card.at("projected_risk").get<int>()) {
        ++report_.metrics.valid_cards;
      } else {
        problems.push_back(fmt::format("card projected risk {} does not hold (model gives {})",
                                       card.at("projected_risk").dump(), p.risk_score));
      }
    }
    return problems;
  }

  std::vector<std::string> CheckExpect(const nlohmann::json& expect, const nlohmann::json& r) {
    std::vector<std::string> fails;
    std::vector<std::string> tools;
    bool regenerated = false;
    for (const auto& e : r.at("tool_trace")) {
      tools.push_back(e.at("tool").get<std::string>());
      if (e.at("arguments").value("regeneration", false)) regenerated = true;
    }
    const auto text = r.at("reply_text").get<std::string>();
    const auto& cards = r.at("recommendation_cards");
    for (auto it = expect.begin(); it != expect.end(); ++it) {
      const auto& k = it.key();
      const auto& v = *it;
      if (k == "tools") {
        if (v.get<std::vector<std::string>>() != tools) {
          fails.push_back(fmt::format("tool trace {} != expected {}", nlohmann::json(tools).dump(), v.dump()));
        }
      } else if (k == "tools_include" || k == "tools_exclude") {
        for (const auto& t : v) {
          const bool has = std::find(tools.begin(), tools.end(), t.get<std::string>()) != tools.end();
          if (has != (k == "tools_include")) fails.push_back(fmt::format("{} {}", k, t.dump()));
        }
      } else if (k == "refused" || k == "panels_dirty" || k == "error") {
        if (r.at(k).get<bool>() != v.get<bool>()) fails.push_back(fmt::format("{} is {}", k, r.at(k).dump()));
      } else if (k == "category") {
        if (r.at("moderation").at("category") != v) {
          fails.push_back(fmt::format("moderation category {}", r.at("moderation").at("category").dump()));
        }
      } else if (k == "min_cards" || k == "max_cards") {
        const auto n = static_cast<int>(cards.size());
        if (k == "min_cards" ? n < v.get<int>() : n > v.get<int>()) fails.push_back(fmt::format("{} cards", n));
      } else if (k == "risk_changed") {
        const bool changed = r.at("updated_risk").at("before").at("probability") !=
                             r.at("updated_risk").at("after").at("probability");
        if (changed != v.get<bool>()) fails.push_back(fmt::format("risk_changed is {}", changed));
      } else if (k == "regenerated") {
        if (regenerated != v.get<bool>()) fails.push_back(fmt::format("regenerated is {}", regenerated));
      } else if (k == "reply_matches" || k == "reply_excludes") {
        for (const auto& pat : v) {
          const bool hit = std::regex_search(text, std::regex(pat.get<std::string>()));
          if (hit != (k == "reply_matches")) fails.push_back(fmt::format("{} {}", k, pat.dump()));
        }
      } else if (k == "cards_exclude_features") {
        for (const auto& card : cards) {
          for (const auto& d : card.at("deltas")) {
            if (std::find(v.begin(), v.end(), d.at("feature")) != v.end()) {
              fails.push_back(fmt::format("card changes excluded feature {}", d.at("feature").dump()));
            }
          }
        }
      } else if (k == "risk_exact" && v.get<bool>()) {
        std::set<int> valid = {r.at("updated_risk").at("before").at("risk_score").get<int>(),
                               r.at("updated_risk").at("after").at("risk_score").get<int>()};
        for (const auto& c : cards) valid.insert(c.at("projected_risk").get<int>());
        for (const auto& claim : FindRiskScoreClaims(text)) {
          if (!valid.count(claim.value)) fails.push_back(fmt::format("reply claims risk score {}", claim.value));
        }
      }
    }
    return fails;
  }

  void RunChat(const nlohmann::json& sc, ScenarioResult& res, nlohmann::json& transcript) {
    std::unique_ptr<RiskModel> inline_model;
    Running own;
    Running* run = nullptr;
    if (sc.contains("model")) {
      const auto& m = sc["model"];
      inline_model = std::make_unique<RiskModel>(RiskModel::Logistic(
          in_.dict, m.at("bias").get<double>(), m.at("weights").get<std::map<std::string, double>>()));
      own = Start(*inline_model);
      run = &own;
    } else {
      if (!base_.service) base_ = Start(*in_.model);
      run = &base_;
    }
    auto& svc = *run->service;
    auto& cli = *run->client;
    const auto pid = SelectPatient(svc, sc.value("patient", nlohmann::json::object()));
    int status = 0;
    const auto created = Call(cli, "POST", "/sessions", {{"patient_id", pid}}, &status);
    if (status != 201) {
      res.failures.push_back(fmt::format("session creation returned {}", status));
      return;
    }
    const auto sid = created.at("session_id").get<std::string>();
    const auto patient = *svc.data().FindById(pid);
    int n = 0;
    for (const auto& turn : sc.at("turns")) {
      const auto history = Call(cli, "GET", fmt::format("/sessions/{}/history", sid), {}, &status);
      ScenarioRecord scenario(patient, svc.dictionary());
      scenario.Apply(history.at("overrides"), svc.dictionary());
      const auto text = turn.at("text").get<std::string>();
      const auto r = Call(cli, "POST", fmt::format("/sessions/{}/messages", sid), {{"text", text}}, &status);
      transcript.push_back({{"scenario", res.name}, {"turn", n}, {"text", text}, {"status", status}, {"response", r}});
      const auto where = fmt::format("turn {}", n++);
      if (status != 200) {
        res.failures.push_back(fmt::format("{}: HTTP {} {}", where, status, r.dump()));
        continue;
      }
      if (r.at("provider_calls").get<int>() > kProviderBudget) {
        ++report_.metrics.budget_overruns;
        res.failures.push_back(fmt::format("{}: {} provider calls", where, r.at("provider_calls").dump()));
      }
      for (auto& p : AuditCards(svc, scenario.effective(), r.at("recommendation_cards"))) {
        res.failures.push_back(where + ": " + p);
      }
      for (auto& f : CheckExpect(turn.value("expect", nlohmann::json::object()), r)) {
        res.failures.push_back(where + ": " + f);
      }
    }
  }

  void RunCorpus(const nlohmann::json& sc, const std::vector<std::string>& lines, bool attacks, ScenarioResult& res,
                 nlohmann::json& transcript) {
    if (!base_.service) base_ = Start(*in_.model);
    auto& svc = *base_.service;
    const auto pid = SelectPatient(svc, sc.value("patient", nlohmann::json::object()));
    const auto& refusal = svc.agent().config().refusal_text;
    int n = 0;
    for (const auto& text : lines) {
      int status = 0;
      const auto created = Call(*base_.client, "POST", "/sessions", {{"patient_id", pid}}, &status);
      const auto sid = created.at("session_id").get<std::string>();
      const auto r = Call(*base_.client, "POST", fmt::format("/sessions/{}/messages", sid), {{"text", text}}, &status);
      transcript.push_back({{"scenario", res.name}, {"turn", n++}, {"text", text}, {"status", status}, {"response", r}});
      if (status != 200) {
        res.failures.push_back(fmt::format("'{}': HTTP {}", text, status));
        continue;
      }
      const bool refused = r.at("refused").get<bool>();
      if (attacks) {
        ++report_.metrics.injection_total;
        const bool clean = refused && r.at("tool_trace").empty() && r.at("reply_text") == refusal &&
                           r.at("recommendation_cards").empty();
        if (clean) {
          ++report_.metrics.injection_refused;
        } else {
          res.failures.push_back(fmt::format("not refused: '{}'", text));
        }
      } else {
        ++report_.metrics.benign_total;
        if (refused) {
          ++report_.metrics.benign_refused;
          res.failures.push_back(fmt::format("refused benign question '{}' ({})", text,
                                             r.at("moderation").at("matched").get<std::string>()));
        } else if (r.at("error").get<bool>()) {
          res.failures.push_back(fmt::format("error turn for '{}'", text));
        }
        AuditCards(svc, *svc.data().FindById(pid), r.at("recommendation_cards"));
      }
    }
  }

  void RunIcebreakers(const nlohmann::json& sc, ScenarioResult& res, nlohmann::json& transcript) {
    if (!base_.service) base_ = Start(*in_.model);
    auto& svc = *base_.service;
    int status = 0;
    const auto list = Call(*base_.client, "GET", "/icebreakers", {}, &status);
    if (!list.is_array() || list.size() != 3) {
      res.failures.push_back("expected 3 icebreakers");
      return;
    }
    if (list[0].at("label").get<std::string>().find("risk") == std::string::npos) {
      res.failures.push_back("first icebreaker label does not mention the current risk");
    }
    const auto pid = SelectPatient(svc, sc.value("patient", nlohmann::json::object()));
    int n = 0;
    for (const auto& ib : list) {
      const auto created = Call(*base_.client, "POST", "/sessions", {{"patient_id", pid}}, &status);
      const auto sid = created.at("session_id").get<std::string>();
      const auto text = ib.at("text").get<std::string>();
      const auto r = Call(*base_.client, "POST", fmt::format("/sessions/{}/messages", sid), {{"text", text}}, &status);
      transcript.push_back({{"scenario", res.name}, {"turn", n++}, {"text", text}, {"status", status}, {"response", r}});
      if (status != 200 || r.at("refused").get<bool>() || r.at("error").get<bool>() || r.at("tool_trace").empty()) {
        res.failures.push_back(fmt::format("icebreaker '{}' did not run a tool flow", ib.at("label").get<std::string>()));
        continue;
      }
      AuditCards(svc, *svc.data().FindById(pid), r.at("recommendation_cards"));
    }
  }

  void Finish() {
    if (base_.service) base_.service->Stop();
  }

 private:
  const EvalInputs& in_;
  std::string script_;
  std::uint64_t seed_;
  ScenarioReport& report_;
  Running base_;
};

std::string Resolve(const fs::path& base, const std::string& p) {
  if (fs::path(p).is_absolute()) return p;
  return (base / p).lexically_normal().string();
}

}  // namespace

ScenarioReport RunScenarios(const std::string& scenario_path, const EvalInputs& inputs, std::uint64_t seed) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(ReadFile(scenario_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(fmt::format("{}: {}", scenario_path, e.what()));
  }
  const fs::path base = fs::path(scenario_path).parent_path();
  auto require = [&](bool ok, const std::string& what) {
    if (!ok) throw ParseError(fmt::format("{}: {}", scenario_path, what));
  };
  require(doc.is_object(), "expected a JSON object");
  require(doc.contains("mock_script") && doc["mock_script"].is_string(), "missing 'mock_script'");
  require(doc.contains("scenarios") && doc["scenarios"].is_array(), "missing 'scenarios' list");
  for (const auto& sc : doc["scenarios"]) {
    require(sc.is_object() && sc.contains("name"), "every scenario needs a name");
    const auto kind = sc.value("kind", "chat");
    require(kind == "chat" || kind == "injection_corpus" || kind == "benign_questions" || kind == "icebreakers",
            fmt::format("scenario '{}': unknown kind '{}'", sc["name"].get<std::string>(), kind));
    if (kind == "chat") {
      require(sc.contains("turns") && sc["turns"].is_array(),
              fmt::format("scenario '{}': missing turns", sc["name"].get<std::string>()));
      for (const auto& t : sc["turns"]) {
        require(t.contains("text"), fmt::format("scenario '{}': turn without text", sc["name"].get<std::string>()));
        const auto expect = t.value("expect", nlohmann::json::object());
        for (auto it = expect.begin(); it != expect.end(); ++it) {
          require(kExpectKeys.count(it.key()) == 1,
                  fmt::format("scenario '{}': unknown expectation '{}'", sc["name"].get<std::string>(), it.key()));
        }
      }
    }
  }
  const auto script = Resolve(base, doc["mock_script"].get<std::string>());
  MockProvider::Load(script);  // fail early on a broken script
  auto lines_of = [&](const char* key) {
    require(doc.contains(key) && doc[key].is_string(), fmt::format("missing '{}'", key));
    return ParseLines(ReadFile(Resolve(base, doc[key].get<std::string>())));
  };

  ScenarioReport report;
  nlohmann::json transcript = nlohmann::json::array();
  Runner runner(inputs, script, seed, report);
  for (const auto& sc : doc["scenarios"]) {
    ScenarioResult res;
    res.name = sc["name"].get<std::string>();
    const auto kind = sc.value("kind", "chat");
    try {
      if (kind == "chat") {
        runner.RunChat(sc, res, transcript);
      } else if (kind == "injection_corpus") {
        runner.RunCorpus(sc, lines_of("injection_corpus"), true, res, transcript);
      } else if (kind == "benign_questions") {
        runner.RunCorpus(sc, lines_of("benign_questions"), false, res, transcript);
      } else {
        runner.RunIcebreakers(sc, res, transcript);
      }
    } catch (const std::exception& e) {
      res.failures.push_back(e.what());
    }
    res.passed = res.failures.empty();
    spdlog::debug("scenario {}: {}", res.name, res.passed ? "pass" : "fail");
    report.scenarios.push_back(std::move(res));
  }
  runner.Finish();
  report.transcript = transcript.dump(1);
  return report;
}

}  // namespace cfx
