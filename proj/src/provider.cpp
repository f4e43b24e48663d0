#include "cfx/provider.hpp"

#include <algorithm>
#include <cctype>

#include <fmt/format.h>

#include "cfx/errors.hpp"

namespace cfx {

std::string_view ToString(Role role) {
  switch (role) {
    case Role::kSystem: return "system";
    case Role::kUser: return "user";
    case Role::kAssistant: return "assistant";
    case Role::kTool: return "tool";
  }
  return "user";
}

Role ParseRole(std::string_view s) {
  if (s == "system") return Role::kSystem;
  if (s == "user") return Role::kUser;
  if (s == "assistant") return Role::kAssistant;
  if (s == "tool") return Role::kTool;
  throw ParseError(fmt::format("unknown message role '{}'", s));
}

std::string_view ToString(Purpose p) {
  switch (p) {
    case Purpose::kChat: return "chat";
    case Purpose::kJudge: return "judge";
    case Purpose::kVerify: return "verify";
  }
  return "chat";
}

std::vector<RiskScoreClaim> FindRiskScoreClaims(std::string_view text) {
  std::vector<RiskScoreClaim> out;
  auto lower = [](char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); };
  std::string folded(text.size(), ' ');
  std::transform(text.begin(), text.end(), folded.begin(), lower);
  constexpr std::string_view kKey = "risk score";
  std::size_t at = 0;
  while ((at = folded.find(kKey, at)) != std::string::npos) {
    at += kKey.size();
    std::size_t i = at;
    while (i < text.size()) {
      const char c = text[i];
      if (c == ';' || c == ',' || c == '\n') break;
      if (c == '.' && !(i + 1 < text.size() && std::isdigit(static_cast<unsigned char>(text[i + 1])))) break;
      if (std::isdigit(static_cast<unsigned char>(c))) {
        std::size_t j = i;
        auto digit = [&](std::size_t k) { return k < text.size() && std::isdigit(static_cast<unsigned char>(text[k])); };
        while (digit(j) || (j < text.size() && text[j] == '.' && digit(j + 1))) ++j;
        const bool decimal = text.substr(i, j - i).find('.') != std::string_view::npos;
        const bool out_of = i >= 7 && folded.compare(i - 7, 7, "out of ") == 0;
        if (!decimal && !out_of && j - i <= 3) {
          out.push_back({i, j - i, std::stoi(std::string(text.substr(i, j - i)))});
        }
        i = j;
        continue;
      }
      ++i;
    }
  }
  return out;
}

const ChatMessage* LastUser(const std::vector<ChatMessage>& messages) {
  for (auto it = messages.rbegin(); it != messages.rend(); ++it) {
    if (it->role == Role::kUser) return &*it;
  }
  return nullptr;
}

}  // namespace cfx
