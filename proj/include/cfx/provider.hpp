#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace cfx {

enum class Role { kSystem, kUser, kAssistant, kTool };

std::string_view ToString(Role role);
Role ParseRole(std::string_view s);

struct ToolCall {
  std::string id;
  std::string name;
  nlohmann::json arguments = nlohmann::json::object();
};

struct ChatMessage {
  Role role = Role::kUser;
  std::string content;
  std::optional<ToolCall> tool_call;  // assistant messages that requested a tool
  std::string tool_name;  // tool messages: which tool produced the content
  std::string tool_call_id;
};

struct ToolSchema {
  std::string name;
  std::string description;
  nlohmann::json parameters;  // JSON schema of the arguments object
};

// What a request is for. The wire format ignores it; scripted providers use
// it to pick a response table.
enum class Purpose { kChat, kJudge, kVerify };

std::string_view ToString(Purpose p);

struct ProviderRequest {
  Purpose purpose = Purpose::kChat;
  std::vector<ChatMessage> messages;
  std::vector<ToolSchema> tools;
  double temperature = 0.0;
};

struct ProviderResponse {
  std::string content;
  std::optional<ToolCall> tool_call;
};

/// Chat-completion boundary. Implementations must be safe to call from
/// several sessions at once. Failures throw ProviderError.
class ChatProvider {
 public:
  virtual ~ChatProvider() = default;
  virtual ProviderResponse Complete(const ProviderRequest& request) = 0;
};

/// Hosted moderation endpoint. Returns the flagged category, or nullopt when
/// the text is clean. Throws ProviderError when unreachable.
class ModerationClient {
 public:
  virtual ~ModerationClient() = default;
  virtual std::optional<std::string> Flag(const std::string& text) = 0;
};

// Delimiters around the draft inside a verification prompt.
inline constexpr std::string_view kDraftBegin = "<<<DRAFT";
inline constexpr std::string_view kDraftEnd = "DRAFT>>>";

/// An integer stated as a risk score: every integer in the clause that
/// follows "risk score" (up to '.', ';', ',' or a line break), except one
/// preceded by "out of".
struct RiskScoreClaim {
  std::size_t pos = 0;
  std::size_t len = 0;
  int value = 0;
};

std::vector<RiskScoreClaim> FindRiskScoreClaims(std::string_view text);

/// Last user message, or nullptr.
const ChatMessage* LastUser(const std::vector<ChatMessage>& messages);

}  // namespace cfx
