#include "cfx/service.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "cfx/block_file.hpp"
#include "cfx/errors.hpp"
#include "cfx/explain.hpp"
#include "cfx/http_provider.hpp"
#include "cfx/mock_provider.hpp"

namespace cfx {

namespace fs = std::filesystem;

namespace {

class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string Now() {
  const auto now = std::chrono::system_clock::now();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  return fmt::format("{:%Y-%m-%dT%H:%M:%S}.{:03d}Z", fmt::gmtime(std::chrono::system_clock::to_time_t(now)), ms);
}

std::string EnvOr(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

template <typename F>
HttpResponse Guard(F&& f) {
  try {
    return f();
  } catch (const NotFound& e) {
    return {404, {{"error", e.what()}}};
  } catch (const SessionBusy& e) {
    return {409, {{"error", e.what()}}};
  } catch (const ValidationError& e) {
    return {422, {{"error", e.what()}}};
  } catch (const ParseError& e) {
    return {400, {{"error", e.what()}}};
  } catch (const ProviderError& e) {
    return {502, {{"error", e.what()}}};
  } catch (const std::exception& e) {
    spdlog::error("request failed: {}", e.what());
    return {500, {{"error", e.what()}}};
  }
}

std::pair<std::string, int> SplitHostPort(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) throw ValidationError(fmt::format("listen address '{}' is not host:port", s));
  int port = 0;
  try {
    port = std::stoi(s.substr(colon + 1));
  } catch (const std::exception&) {
    throw ValidationError(fmt::format("listen address '{}' has a bad port", s));
  }
  return {s.substr(0, colon), port};
}

}  // namespace

// ---- config ----------------------------------------------------------------

ApiConfig ApiConfig::Load(const std::string& path) {
  const auto blocks = ParseBlockFile(path);
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    if (p.empty() || fs::path(p).is_absolute()) return p;
    return (base / p).lexically_normal().string();
  };
  ApiConfig c;
  for (const auto& block : blocks) {
    if (!block.header.empty()) throw ParseError(fmt::format("{}:{}: unexpected section [{}]", path, block.line, block.header));
    for (const auto& e : block.entries) {
      const auto where = fmt::format("{}:{}", path, e.line);
      auto to_u64 = [&](const std::string& v) {
        try {
          return static_cast<std::uint64_t>(std::stoull(v));
        } catch (const std::exception&) {
          throw ParseError(fmt::format("{}: '{}' is not an integer", where, v));
        }
      };
      if (e.key == "listen") {
        std::tie(c.listen_host, c.listen_port) = SplitHostPort(e.value);
      } else if (e.key == "weights") {
        c.weights_path = resolve(e.value);
      } else if (e.key == "dictionary") {
        c.dictionary_path = resolve(e.value);
      } else if (e.key == "rules") {
        c.rules_path = resolve(e.value);
      } else if (e.key == "dataset") {
        c.dataset_path = resolve(e.value);
      } else if (e.key == "moderation_dir") {
        c.moderation_dir = resolve(e.value);
      } else if (e.key == "session_log") {
        c.session_log_path = resolve(e.value);
      } else if (e.key == "provider") {
        if (e.value == "mock") {
          c.provider_mode = ProviderMode::kMock;
        } else if (e.value == "http") {
          c.provider_mode = ProviderMode::kHttp;
        } else {
          throw ParseError(fmt::format("{}: provider must be mock or http", where));
        }
      } else if (e.key == "script") {
        c.script_path = resolve(e.value);
      } else if (e.key == "provider_endpoint") {
        c.provider_endpoint = e.value;
      } else if (e.key == "provider_model") {
        c.provider_model = e.value;
      } else if (e.key == "moderation_endpoint") {
        c.moderation_endpoint = e.value;
      } else if (e.key == "subsample_seed") {
        c.subsample_seed = to_u64(e.value);
      } else if (e.key == "max_rows") {
        c.max_rows = to_u64(e.value);
      } else if (e.key == "recourse_seed") {
        c.recourse_seed = to_u64(e.value);
      } else if (e.key == "queue_turns") {
        if (e.value != "true" && e.value != "false") throw ParseError(fmt::format("{}: queue_turns must be true or false", where));
        c.queue_turns = e.value == "true";
      } else {
        throw ParseError(fmt::format("{}: unknown key '{}'", where, e.key));
      }
    }
  }
  return c;
}

void ApiConfig::ApplyEnv() {
  provider_endpoint = EnvOr("CFX_PROVIDER_ENDPOINT", provider_endpoint);
  provider_token = EnvOr("CFX_PROVIDER_TOKEN", provider_token);
  provider_model = EnvOr("CFX_PROVIDER_MODEL", provider_model);
  moderation_endpoint = EnvOr("CFX_MODERATION_ENDPOINT", moderation_endpoint);
  if (const char* listen = std::getenv("CFX_LISTEN"); listen && *listen) {
    std::tie(listen_host, listen_port) = SplitHostPort(listen);
  }
}

void ApiConfig::Validate() const {
  auto require = [](const std::string& v, const char* name) {
    if (v.empty()) throw ValidationError(fmt::format("config: '{}' is not set", name));
  };
  require(weights_path, "weights");
  require(dictionary_path, "dictionary");
  require(rules_path, "rules");
  require(dataset_path, "dataset");
  require(moderation_dir, "moderation_dir");
  require(session_log_path, "session_log");
  if (provider_mode == ProviderMode::kMock) {
    if (script_path.empty()) throw ValidationError("config: mock provider requires 'script'");
  } else {
    if (provider_endpoint.empty()) throw ValidationError("config: http provider requires an endpoint (CFX_PROVIDER_ENDPOINT)");
    if (provider_token.empty()) throw ValidationError("config: http provider requires a token (CFX_PROVIDER_TOKEN)");
  }
  if (max_rows == 0) throw ValidationError("config: max_rows must be positive");
}

ServiceParts LoadParts(const ApiConfig& config) {
  config.Validate();
  for (const auto& [path, what] : {std::pair{config.weights_path, "model weights"},
                                   std::pair{config.dictionary_path, "data dictionary"},
                                   std::pair{config.rules_path, "rules"}, std::pair{config.dataset_path, "dataset"}}) {
    if (!fs::exists(path)) throw ValidationError(fmt::format("{} file not found: {}", what, path));
  }
  ServiceParts parts;
  parts.dict = DataDictionary::Load(config.dictionary_path);
  parts.model = std::make_unique<RiskModel>(RiskModel::Load(config.weights_path, parts.dict));
  parts.data = IngestCsv(config.dataset_path, parts.dict, {config.max_rows, config.subsample_seed});
  parts.rules = LoadRules(config.rules_path, parts.dict);
  parts.moderator = std::make_unique<Moderator>(Moderator::Load(config.moderation_dir, parts.dict));
  if (config.provider_mode == ProviderMode::kMock) {
    parts.provider = std::make_unique<MockProvider>(MockProvider::Load(config.script_path));
  } else {
    parts.provider = std::make_unique<HttpProvider>(
        HttpProviderConfig{config.provider_endpoint, config.provider_token, config.provider_model});
  }
  if (!config.moderation_endpoint.empty()) {
    parts.moderation_client = std::make_unique<HttpModerationClient>(config.moderation_endpoint, config.provider_token);
  }
  return parts;
}

nlohmann::json ChatResponseJson(const Turn& turn, const DataDictionary& dict) {
  const auto j = ToJson(turn, dict);
  const auto& reply = j["reply"];
  return {{"turn_index", turn.index},
          {"reply_text", reply["text"]},
          {"recommendation_cards", reply["recommendation_cards"]},
          {"updated_risk", reply["updated_risk"]},
          {"panels_dirty", reply["panels_dirty"]},
          {"refused", !turn.moderation.allowed},
          {"moderation", j["moderation"]},
          {"tool_trace", j["tool_trace"]},
          {"judge_verdicts", j["judge_verdicts"]},
          {"provider_calls", turn.provider_calls},
          {"degradations", turn.degradations},
          {"error", turn.error}};
}

// ---- service ---------------------------------------------------------------

Service::Service(ServiceParts parts, AgentConfig agent_config, std::string session_log_path)
    : parts_(std::move(parts)), log_path_(std::move(session_log_path)) {
  if (parts_.patients.empty()) {
    parts_.patients = HeldOutIndices(parts_.data, parts_.model->split_seed());
  }
  for (auto i : parts_.patients) patient_index_[parts_.data.records.at(i).id] = i;
  AgentDeps deps;
  deps.model = parts_.model.get();
  deps.dict = &parts_.dict;
  deps.data = &parts_.data;
  deps.rules = &parts_.rules;
  deps.moderator = parts_.moderator.get();
  deps.provider = parts_.provider.get();
  deps.moderation_client = parts_.moderation_client.get();
  agent_ = std::make_unique<Agent>(deps, std::move(agent_config));
  if (!log_path_.empty()) {
    Replay();
    log_.open(log_path_, std::ios::app);
    if (!log_) throw ValidationError(fmt::format("cannot open session log '{}'", log_path_));
  }
}

Service::~Service() { Stop(); }

std::unique_ptr<Service> Service::FromConfig(const ApiConfig& config) {
  AgentConfig agent;
  agent.seed = config.recourse_seed;
  agent.queue_turns = config.queue_turns;
  return std::make_unique<Service>(LoadParts(config), std::move(agent), config.session_log_path);
}

std::size_t Service::session_count() const {
  std::lock_guard lock(sessions_mu_);
  return sessions_.size();
}

const PatientRecord* Service::FindPatient(const std::string& id) const {
  auto it = patient_index_.find(id);
  return it == patient_index_.end() ? nullptr : &parts_.data.records[it->second];
}

std::shared_ptr<ChatSession> Service::FindSession(const std::string& id) const {
  std::lock_guard lock(sessions_mu_);
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

PatientRecord Service::EffectiveRecord(const PatientRecord& patient, const std::string& session_id) const {
  if (session_id.empty()) return patient;
  auto s = FindSession(session_id);
  if (!s) throw NotFound(fmt::format("unknown session '{}'", session_id));
  if (s->patient().id != patient.id) {
    throw ValidationError(fmt::format("session '{}' belongs to patient '{}'", session_id, s->patient().id));
  }
  return s->scenario().effective();
}

void Service::AppendLog(const nlohmann::json& entry) {
  if (log_path_.empty()) return;
  const std::string line = entry.dump() + "\n";
  std::lock_guard lock(log_mu_);
  log_ << line;
  log_.flush();
}

void Service::Replay() {
  std::ifstream in(log_path_);
  if (!in) return;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (Trim(line).empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      spdlog::warn("{}:{}: skipping unreadable log line", log_path_, n);
      continue;
    }
    try {
      const auto kind = j.at("kind").get<std::string>();
      const auto sid = j.at("session_id").get<std::string>();
      if (kind == "session") {
        const auto* patient = FindPatient(j.at("patient_id").get<std::string>());
        if (!patient) {
          spdlog::warn("{}:{}: session {} refers to an unknown patient", log_path_, n, sid);
          continue;
        }
        sessions_[sid] = std::make_shared<ChatSession>(sid, *patient, parts_.dict, j.at("created_at").get<std::string>());
        if (sid.size() > 2 && sid.starts_with("s-")) {
          next_session_ = std::max<std::uint64_t>(next_session_, std::stoull(sid.substr(2)) + 1);
        }
        continue;
      }
      auto it = sessions_.find(sid);
      if (it == sessions_.end()) continue;
      auto& session = *it->second;
      nlohmann::json overrides;
      if (kind == "turn") {
        auto turn = TurnFromJson(j.at("turn"), parts_.dict);
        overrides = turn.overrides;
        session.AppendTurn(std::move(turn));
      } else if (kind == "whatif") {
        overrides = j.at("overrides");
      } else {
        continue;
      }
      ScenarioRecord scenario(session.patient(), parts_.dict);
      scenario.Apply(overrides, parts_.dict);
      session.SetScenario(std::move(scenario));
    } catch (const std::exception& e) {
      spdlog::warn("{}:{}: skipping log line: {}", log_path_, n, e.what());
    }
  }
  if (!sessions_.empty()) spdlog::info("replayed {} sessions from {}", sessions_.size(), log_path_);
}

HttpResponse Service::Health() const {
  const auto& m = parts_.model->metrics();
  return {200,
          {{"status", "ok"},
           {"model_accuracy", m.accuracy},
           {"model_auc", m.auc ? nlohmann::json(*m.auc) : nlohmann::json()},
           {"architecture", ToString(parts_.model->architecture())},
           {"patients", parts_.patients.size()},
           {"sessions", session_count()}}};
}

HttpResponse Service::ListPatients(std::size_t offset, std::size_t limit) const {
  return Guard([&]() -> HttpResponse {
    nlohmann::json list = nlohmann::json::array();
    for (std::size_t i = offset; i < parts_.patients.size() && list.size() < limit; ++i) {
      const auto& r = parts_.data.records[parts_.patients[i]];
      const auto p = parts_.model->Predict(r);
      list.push_back({{"id", r.id}, {"risk_score", p.risk_score}, {"label", ToString(p.label)}});
    }
    return {200, {{"total", parts_.patients.size()}, {"offset", offset}, {"patients", list}}};
  });
}

HttpResponse Service::GetPatient(const std::string& id) const {
  return Guard([&]() -> HttpResponse {
    const auto* p = FindPatient(id);
    if (!p) throw NotFound(fmt::format("unknown patient '{}'", id));
    auto j = parts_.dict.RecordToJson(*p);
    j["risk"] = ToJson(parts_.model->Predict(*p));
    return {200, j};
  });
}

HttpResponse Service::Risk(const std::string& id, const std::string& session_id) const {
  return Guard([&]() -> HttpResponse {
    const auto* p = FindPatient(id);
    if (!p) throw NotFound(fmt::format("unknown patient '{}'", id));
    return {200, ToJson(parts_.model->Predict(EffectiveRecord(*p, session_id)))};
  });
}

HttpResponse Service::Panels(const std::string& id, const std::string& session_id) const {
  return Guard([&]() -> HttpResponse {
    const auto* p = FindPatient(id);
    if (!p) throw NotFound(fmt::format("unknown patient '{}'", id));
    nlohmann::json out = nlohmann::json::array();
    for (const auto& panel : BuildPanels(EffectiveRecord(*p, session_id), parts_.data, parts_.dict)) {
      out.push_back(ToJson(panel, parts_.dict));
    }
    return {200, out};
  });
}

HttpResponse Service::Importance(const std::string& id, const std::string& session_id) const {
  return Guard([&]() -> HttpResponse {
    const auto* p = FindPatient(id);
    if (!p) throw NotFound(fmt::format("unknown patient '{}'", id));
    return {200, ToJson(LocalImportance(EffectiveRecord(*p, session_id), *parts_.model, parts_.data, parts_.dict))};
  });
}

HttpResponse Service::PostWhatIf(const std::string& id, const nlohmann::json& body) {
  return Guard([&]() -> HttpResponse {
    const auto* p = FindPatient(id);
    if (!p) throw NotFound(fmt::format("unknown patient '{}'", id));
    if (!body.is_object()) throw ValidationError("body must be a JSON object");
    const auto overrides = body.value("overrides", nlohmann::json::object());
    const bool reset = body.value("reset", false);
    const auto sid = body.contains("session_id") ? body["session_id"].get<std::string>() : std::string();
    if (sid.empty()) {
      ScenarioRecord scenario(*p, parts_.dict);
      scenario.Apply(overrides, parts_.dict);
      auto j = ToJson(WhatIf(scenario, *parts_.model), parts_.dict);
      j["overrides"] = scenario.OverridesJson(parts_.dict);
      return {200, j};
    }
    auto session = FindSession(sid);
    if (!session) throw NotFound(fmt::format("unknown session '{}'", sid));
    if (session->patient().id != id) {
      throw ValidationError(fmt::format("session '{}' belongs to patient '{}'", sid, session->patient().id));
    }
    std::lock_guard lock(session->turn_mutex());
    auto scenario = session->scenario();
    if (reset) scenario.Reset();
    scenario.Apply(overrides, parts_.dict);
    auto j = ToJson(WhatIf(scenario, *parts_.model), parts_.dict);
    j["overrides"] = scenario.OverridesJson(parts_.dict);
    session->SetScenario(std::move(scenario));
    AppendLog({{"ts", Now()}, {"kind", "whatif"}, {"session_id", sid}, {"overrides", j["overrides"]}});
    return {200, j};
  });
}

HttpResponse Service::CreateSession(const nlohmann::json& body) {
  return Guard([&]() -> HttpResponse {
    if (!body.is_object() || !body.contains("patient_id") || !body["patient_id"].is_string()) {
      throw ValidationError("body must contain a patient_id string");
    }
    const auto pid = body["patient_id"].get<std::string>();
    const auto* p = FindPatient(pid);
    if (!p) throw NotFound(fmt::format("unknown patient '{}'", pid));
    std::shared_ptr<ChatSession> session;
    {
      std::lock_guard lock(sessions_mu_);
      const auto sid = fmt::format("s-{:04d}", next_session_++);
      session = std::make_shared<ChatSession>(sid, *p, parts_.dict, Now());
      sessions_[sid] = session;
    }
    AppendLog({{"ts", session->created_at()},
               {"kind", "session"},
               {"session_id", session->id()},
               {"patient_id", pid},
               {"created_at", session->created_at()}});
    return {201, {{"session_id", session->id()}, {"patient_id", pid}, {"created_at", session->created_at()}}};
  });
}

HttpResponse Service::History(const std::string& session_id) const {
  return Guard([&]() -> HttpResponse {
    auto s = FindSession(session_id);
    if (!s) throw NotFound(fmt::format("unknown session '{}'", session_id));
    nlohmann::json turns = nlohmann::json::array();
    for (const auto& t : s->turns()) turns.push_back(ToJson(t, parts_.dict));
    return {200,
            {{"session_id", s->id()},
             {"patient_id", s->patient().id},
             {"created_at", s->created_at()},
             {"overrides", s->scenario().OverridesJson(parts_.dict)},
             {"turns", turns}}};
  });
}

HttpResponse Service::PostMessage(const std::string& session_id, const nlohmann::json& body) {
  return Guard([&]() -> HttpResponse {
    auto s = FindSession(session_id);
    if (!s) throw NotFound(fmt::format("unknown session '{}'", session_id));
    if (!body.is_object() || !body.contains("text") || !body["text"].is_string()) {
      throw ValidationError("body must contain a text string");
    }
    const auto turn = agent_->HandleMessage(*s, body["text"].get<std::string>());
    AppendLog({{"ts", Now()},
               {"kind", "turn"},
               {"session_id", session_id},
               {"patient_id", s->patient().id},
               {"turn", ToJson(turn, parts_.dict)}});
    return {200, ChatResponseJson(turn, parts_.dict)};
  });
}

HttpResponse Service::Icebreakers() const {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& ib : agent_->icebreakers()) {
    out.push_back({{"label", ib.label}, {"text", ib.text}, {"flow", ib.flow}});
  }
  return {200, out};
}

void Service::Mount() {
  server_ = std::make_unique<httplib::Server>();
  auto& srv = *server_;
  auto send = [](httplib::Response& res, const HttpResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  auto parse = [](const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    auto j = nlohmann::json::parse(req.body, nullptr, false);
    if (j.is_discarded()) throw ParseError("request body is not valid JSON");
    return j;
  };
  auto param = [](const httplib::Request& req, const char* key) {
    return req.has_param(key) ? req.get_param_value(key) : std::string();
  };
  auto with_body = [parse, send](auto handler) {
    return [parse, send, handler](const httplib::Request& req, httplib::Response& res) {
      nlohmann::json body;
      try {
        body = parse(req);
      } catch (const ParseError& e) {
        send(res, {400, {{"error", e.what()}}});
        return;
      }
      send(res, handler(req, body));
    };
  };

  srv.Get("/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, Health()); });
  srv.Get("/patients", [this, send, param](const httplib::Request& req, httplib::Response& res) {
    std::size_t offset = 0, limit = 100;
    try {
      if (!param(req, "offset").empty()) offset = std::stoul(param(req, "offset"));
      if (!param(req, "limit").empty()) limit = std::stoul(param(req, "limit"));
    } catch (const std::exception&) {
      send(res, {422, {{"error", "offset and limit must be non-negative integers"}}});
      return;
    }
    send(res, ListPatients(offset, limit));
  });
  srv.Get(R"(/patients/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, GetPatient(req.matches[1]));
  });
  srv.Get(R"(/patients/([^/]+)/risk)", [this, send, param](const httplib::Request& req, httplib::Response& res) {
    send(res, Risk(req.matches[1], param(req, "session_id")));
  });
  srv.Get(R"(/patients/([^/]+)/panels)", [this, send, param](const httplib::Request& req, httplib::Response& res) {
    send(res, Panels(req.matches[1], param(req, "session_id")));
  });
  srv.Get(R"(/patients/([^/]+)/importance)",
          [this, send, param](const httplib::Request& req, httplib::Response& res) {
            send(res, Importance(req.matches[1], param(req, "session_id")));
          });
  srv.Post(R"(/patients/([^/]+)/whatif)", with_body([this](const httplib::Request& req, const nlohmann::json& body) {
             return PostWhatIf(req.matches[1], body);
           }));
  srv.Post("/sessions", with_body([this](const httplib::Request&, const nlohmann::json& body) {
             return CreateSession(body);
           }));
  srv.Get(R"(/sessions/([^/]+)/history)", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, History(req.matches[1]));
  });
  srv.Post(R"(/sessions/([^/]+)/messages)",
           with_body([this](const httplib::Request& req, const nlohmann::json& body) {
             return PostMessage(req.matches[1], body);
           }));
  srv.Get("/icebreakers", [this, send](const httplib::Request&, httplib::Response& res) { send(res, Icebreakers()); });
}

int Service::Start(const std::string& host, int port) {
  Mount();
  int bound = port;
  if (port == 0) {
    bound = server_->bind_to_any_port(host);
  } else if (!server_->bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound <= 0) throw ValidationError(fmt::format("cannot listen on {}:{}", host, port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

void Service::Run(const std::string& host, int port) {
  Mount();
  if (!server_->bind_to_port(host, port)) throw ValidationError(fmt::format("cannot listen on {}:{}", host, port));
  spdlog::info("listening on {}:{}", host, port);
  server_->listen_after_bind();
}

void Service::Stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace cfx
