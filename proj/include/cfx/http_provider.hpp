#pragma once

#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "cfx/provider.hpp"

namespace cfx {

struct HttpProviderConfig {
  std::string endpoint;  // full URL of the chat-completions route
  std::string token;
  std::string model;
  int timeout_seconds = 60;
  int retries = 2;  // extra attempts on transport errors, 429 and 5xx
};

/// Reads CFX_PROVIDER_ENDPOINT, CFX_PROVIDER_TOKEN and CFX_PROVIDER_MODEL.
HttpProviderConfig HttpProviderConfigFromEnv();

/// Chat-completions request body with function-style tool definitions.
nlohmann::json ToWireJson(const ProviderRequest& request, const std::string& model);

/// First choice of a chat-completions response. Throws ProviderError when
/// the body has no usable message.
ProviderResponse ParseWireResponse(const nlohmann::json& body);

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

ParsedUrl SplitUrl(const std::string& url);

class HttpProvider : public ChatProvider {
 public:
  explicit HttpProvider(HttpProviderConfig config);
  ProviderResponse Complete(const ProviderRequest& request) override;

 private:
  HttpProviderConfig config_;
  ParsedUrl url_;
};

/// Moderation endpoint speaking {"input": text} -> {"results": [{"flagged",
/// "categories": {name: bool}}]}.
class HttpModerationClient : public ModerationClient {
 public:
  HttpModerationClient(std::string endpoint, std::string token, int timeout_seconds = 20);
  std::optional<std::string> Flag(const std::string& text) override;

 private:
  ParsedUrl url_;
  std::string token_;
  int timeout_seconds_;
};

}  // namespace cfx
