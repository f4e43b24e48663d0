#pragma once

#include <atomic>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/agent.hpp"
#include "cfx/guardrails.hpp"
#include "cfx/model.hpp"
#include "cfx/moderation.hpp"
#include "cfx/provider.hpp"
#include "cfx/schema.hpp"

namespace httplib {
class Server;
}

namespace cfx {

enum class ProviderMode { kMock, kHttp };

struct ApiConfig {
  std::string listen_host = "127.0.0.1";
  int listen_port = 8080;
  std::string weights_path;
  std::string dictionary_path;
  std::string rules_path;
  std::string dataset_path;
  std::string moderation_dir;
  std::string session_log_path;
  ProviderMode provider_mode = ProviderMode::kMock;
  std::string script_path;  // mock mode
  std::string provider_endpoint;
  std::string provider_token;
  std::string provider_model;
  std::string moderation_endpoint;  // optional hosted moderation
  std::uint64_t subsample_seed = 42;
  std::size_t max_rows = 50000;
  std::uint64_t recourse_seed = 42;
  bool queue_turns = true;

  /// "key = value" file; relative paths resolve against the file's
  /// directory.
  static ApiConfig Load(const std::string& path);
  /// CFX_PROVIDER_ENDPOINT, CFX_PROVIDER_TOKEN, CFX_PROVIDER_MODEL,
  /// CFX_MODERATION_ENDPOINT and CFX_LISTEN (host:port) override the file.
  void ApplyEnv();
  /// Throws ValidationError naming the missing setting.
  void Validate() const;
};

struct ServiceParts {
  DataDictionary dict;
  std::unique_ptr<RiskModel> model;
  Dataset data;
  std::vector<GuardrailRule> rules;
  std::unique_ptr<Moderator> moderator;
  std::unique_ptr<ChatProvider> provider;
  std::unique_ptr<ModerationClient> moderation_client;
  std::vector<std::size_t> patients;  // dataset indices; held-out split when empty
};

/// Loads every resource named by the config. Startup errors name the path.
ServiceParts LoadParts(const ApiConfig& config);

/// Chat endpoint body for a turn.
nlohmann::json ChatResponseJson(const Turn& turn, const DataDictionary& dict);

struct HttpResponse {
  int status = 200;
  nlohmann::json body;
};

/// REST layer over the agent. Handlers are callable directly; Start() serves
/// them over HTTP.
class Service {
 public:
  Service(ServiceParts parts, AgentConfig agent_config, std::string session_log_path);
  ~Service();

  static std::unique_ptr<Service> FromConfig(const ApiConfig& config);

  HttpResponse Health() const;
  HttpResponse ListPatients(std::size_t offset, std::size_t limit) const;
  HttpResponse GetPatient(const std::string& id) const;
  HttpResponse Risk(const std::string& id, const std::string& session_id) const;
  HttpResponse Panels(const std::string& id, const std::string& session_id) const;
  HttpResponse Importance(const std::string& id, const std::string& session_id) const;
  HttpResponse PostWhatIf(const std::string& id, const nlohmann::json& body);
  HttpResponse CreateSession(const nlohmann::json& body);
  HttpResponse History(const std::string& session_id) const;
  HttpResponse PostMessage(const std::string& session_id, const nlohmann::json& body);
  HttpResponse Icebreakers() const;

  /// Binds host:port (port 0 picks a free port) and serves on a background
  /// thread. Returns the bound port.
  int Start(const std::string& host, int port);
  /// Serves on the calling thread until Stop().
  void Run(const std::string& host, int port);
  void Stop();

  const DataDictionary& dictionary() const { return parts_.dict; }
  const RiskModel& model() const { return *parts_.model; }
  const Dataset& data() const { return parts_.data; }
  const std::vector<GuardrailRule>& rules() const { return parts_.rules; }
  const std::vector<std::size_t>& patient_indices() const { return parts_.patients; }
  Agent& agent() { return *agent_; }
  std::size_t session_count() const;

 private:
  const PatientRecord* FindPatient(const std::string& id) const;
  std::shared_ptr<ChatSession> FindSession(const std::string& id) const;
  PatientRecord EffectiveRecord(const PatientRecord& patient, const std::string& session_id) const;
  void AppendLog(const nlohmann::json& entry);
  void Replay();
  void Mount();

  ServiceParts parts_;
  std::unique_ptr<Agent> agent_;
  std::map<std::string, std::size_t> patient_index_;
  std::string log_path_;

  mutable std::mutex sessions_mu_;
  std::map<std::string, std::shared_ptr<ChatSession>> sessions_;
  std::uint64_t next_session_ = 1;

  std::mutex log_mu_;
  std::ofstream log_;

  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

}  // namespace cfx
