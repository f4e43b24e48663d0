#include "cfx/http_provider.hpp"

#include <cstdlib>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "cfx/errors.hpp"

namespace cfx {

namespace {

std::string Env(const char* name) {
  const char* v = std::getenv(name);
  return v ? v : "";
}

struct HttpResult {
  int status = 0;
  std::string body;
};

HttpResult PostJson(const ParsedUrl& url, const std::string& token, const nlohmann::json& body, int timeout,
                    int retries) {
  std::string last_error;
  for (int attempt = 0; attempt <= retries; ++attempt) {
    httplib::Client cli(url.origin);
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
    httplib::Headers headers;
    if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);
    auto res = cli.Post(url.path, headers, body.dump(), "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
    } else if (res->status == 429 || res->status >= 500) {
      last_error = fmt::format("HTTP {}", res->status);
    } else {
      return {res->status, res->body};
    }
    spdlog::warn("provider request to {}{} failed ({}), attempt {}/{}", url.origin, url.path, last_error,
                 attempt + 1, retries + 1);
  }
  throw ProviderError(fmt::format("{}{}: {}", url.origin, url.path, last_error));
}

}  // namespace

HttpProviderConfig HttpProviderConfigFromEnv() {
  HttpProviderConfig c;
  c.endpoint = Env("CFX_PROVIDER_ENDPOINT");
  c.token = Env("CFX_PROVIDER_TOKEN");
  c.model = Env("CFX_PROVIDER_MODEL");
  return c;
}

ParsedUrl SplitUrl(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ValidationError(fmt::format("URL '{}' has no scheme", url));
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

nlohmann::json ToWireJson(const ProviderRequest& request, const std::string& model) {
  nlohmann::json messages = nlohmann::json::array();
  for (const auto& m : request.messages) {
    nlohmann::json j = {{"role", ToString(m.role)}, {"content", m.content}};
    if (m.tool_call) {
      j["tool_calls"] = nlohmann::json::array({{{"id", m.tool_call->id},
                                                {"type", "function"},
                                                {"function",
                                                 {{"name", m.tool_call->name},
                                                  {"arguments", m.tool_call->arguments.dump()}}}}});
    }
    if (m.role == Role::kTool) j["tool_call_id"] = m.tool_call_id;
    messages.push_back(std::move(j));
  }
  nlohmann::json body = {{"model", model}, {"messages", messages}, {"temperature", request.temperature}};
  if (!request.tools.empty()) {
    nlohmann::json tools = nlohmann::json::array();
    for (const auto& t : request.tools) {
      tools.push_back({{"type", "function"},
                       {"function", {{"name", t.name}, {"description", t.description}, {"parameters", t.parameters}}}});
    }
    body["tools"] = tools;
  }
  if (request.purpose != Purpose::kChat) body["response_format"] = {{"type", "json_object"}};
  return body;
}

ProviderResponse ParseWireResponse(const nlohmann::json& body) {
  if (!body.contains("choices") || !body["choices"].is_array() || body["choices"].empty()) {
    throw ProviderError("provider response has no choices");
  }
  const auto& msg = body["choices"][0].value("message", nlohmann::json::object());
  ProviderResponse r;
  if (msg.contains("content") && msg["content"].is_string()) r.content = msg["content"].get<std::string>();
  if (msg.contains("tool_calls") && msg["tool_calls"].is_array() && !msg["tool_calls"].empty()) {
    const auto& tc = msg["tool_calls"][0];
    const auto& fn = tc.value("function", nlohmann::json::object());
    ToolCall call;
    call.id = tc.value("id", "");
    call.name = fn.value("name", "");
    const auto args = fn.value("arguments", nlohmann::json("{}"));
    // Arguments arrive as a JSON-encoded string; keep unparseable text as a
    // string so the agent can reject it as malformed.
    call.arguments = args.is_string() ? nlohmann::json::parse(args.get<std::string>(), nullptr, false) : args;
    if (call.arguments.is_discarded()) call.arguments = args;
    r.tool_call = std::move(call);
  }
  return r;
}

HttpProvider::HttpProvider(HttpProviderConfig config) : config_(std::move(config)) {
  if (config_.endpoint.empty()) throw ValidationError("http provider: endpoint is not set");
  if (config_.token.empty()) throw ValidationError("http provider: token is not set");
  url_ = SplitUrl(config_.endpoint);
}

ProviderResponse HttpProvider::Complete(const ProviderRequest& request) {
  const auto res = PostJson(url_, config_.token, ToWireJson(request, config_.model), config_.timeout_seconds,
                            config_.retries);
  if (res.status != 200) throw ProviderError(fmt::format("provider returned HTTP {}: {}", res.status, res.body));
  const auto body = nlohmann::json::parse(res.body, nullptr, false);
  if (body.is_discarded()) throw ProviderError("provider returned invalid JSON");
  return ParseWireResponse(body);
}

HttpModerationClient::HttpModerationClient(std::string endpoint, std::string token, int timeout_seconds)
    : url_(SplitUrl(endpoint)), token_(std::move(token)), timeout_seconds_(timeout_seconds) {}

std::optional<std::string> HttpModerationClient::Flag(const std::string& text) {
  const auto res = PostJson(url_, token_, {{"input", text}}, timeout_seconds_, 1);
  if (res.status != 200) throw ProviderError(fmt::format("moderation returned HTTP {}", res.status));
  const auto body = nlohmann::json::parse(res.body, nullptr, false);
  if (body.is_discarded() || !body.contains("results") || !body["results"].is_array() || body["results"].empty()) {
    throw ProviderError("moderation returned an unexpected body");
  }
  const auto& r = body["results"][0];
  if (!r.value("flagged", false)) return std::nullopt;
  if (r.contains("categories") && r["categories"].is_object()) {
    for (auto it = r["categories"].begin(); it != r["categories"].end(); ++it) {
      if (it->is_boolean() && it->get<bool>()) return it.key();
    }
  }
  return std::string("flagged");
}

}  // namespace cfx
