#pragma once

#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/provider.hpp"

namespace cfx {

/// Deterministic scripted provider. A script is a JSON object with an
/// "entries" list; the first entry whose filters all match answers the
/// request.
///
/// Filters:
///   purpose  "chat" (default), "judge" or "verify"
///   user     regex searched in the last user message
///   system   regex searched in the system message
///   after    exact list of tool names already called since the last user
///            message
///
/// Responses (exactly one):
///   tool_call  {"name": ..., "arguments": {...}}
///   text       reply text; {{tool.path.to.value}} is replaced by the value
///              from the latest result of that tool in the current turn
///   judge      {"when": regex, "infeasible_if": regex, "reason": text,
///              "features": [...]}; every "candidate N: ..." line of the
///              prompt matching infeasible_if is judged infeasible when
///              `when` matches the prompt
///   verify     "auto": one risk_score question per risk-score claim in the
///              draft (at most 3)
///   fail       true: throw ProviderError
class MockProvider : public ChatProvider {
 public:
  struct Entry {
    std::string name;
    Purpose purpose = Purpose::kChat;
    std::optional<std::regex> user;
    std::optional<std::regex> system;
    std::optional<std::vector<std::string>> after;
    std::optional<ToolCall> tool_call;
    std::optional<std::string> text;
    struct Judge {
      std::optional<std::regex> when;
      std::regex infeasible_if;
      std::string reason;
      std::vector<std::string> features;
    };
    std::optional<Judge> judge;
    bool verify_auto = false;
    bool fail = false;
  };

  static MockProvider Load(const std::string& path);
  static MockProvider Parse(const nlohmann::json& script);

  ProviderResponse Complete(const ProviderRequest& request) override;

  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

/// Replaces {{tool.path}} placeholders from the given tool results.
std::string RenderTemplate(const std::string& text, const std::vector<std::pair<std::string, nlohmann::json>>& results);

}  // namespace cfx
