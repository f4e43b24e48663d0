#include "cfx/moderation.hpp"

#include <algorithm>
#include <cctype>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cfx/block_file.hpp"
#include "cfx/errors.hpp"

namespace cfx {

std::string_view ToString(ModerationCategory c) {
  switch (c) {
    case ModerationCategory::kClean: return "clean";
    case ModerationCategory::kHarmfulContent: return "harmful_content";
    case ModerationCategory::kPromptInjection: return "prompt_injection";
    case ModerationCategory::kOffScope: return "off_scope";
  }
  return "clean";
}

ModerationCategory ParseModerationCategory(std::string_view s) {
  for (auto c : {ModerationCategory::kClean, ModerationCategory::kHarmfulContent, ModerationCategory::kPromptInjection,
                 ModerationCategory::kOffScope}) {
    if (ToString(c) == s) return c;
  }
  throw ParseError(fmt::format("unknown moderation category '{}'", s));
}

nlohmann::json ToJson(const ModerationVerdict& v) {
  return {{"allowed", v.allowed}, {"category", ToString(v.category)}, {"matched", v.matched}};
}

ModerationVerdict ModerationVerdictFromJson(const nlohmann::json& j) {
  return {j.at("allowed").get<bool>(), ParseModerationCategory(j.at("category").get<std::string>()),
          j.value("matched", "")};
}

std::vector<std::string> ParseLines(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = Trim(text.substr(start, end - start));
    if (!line.empty() && line[0] != '#') out.push_back(std::move(line));
    start = end + 1;
  }
  return out;
}

std::vector<NamedPattern> ParsePatterns(std::string_view text, std::string_view origin) {
  std::vector<NamedPattern> out;
  for (const auto& line : ParseLines(text)) {
    const auto ws = line.find_first_of(" \t");
    if (ws == std::string::npos) throw ParseError(fmt::format("{}: pattern line '{}' has no regex", origin, line));
    NamedPattern p;
    p.id = line.substr(0, ws);
    p.source = Trim(line.substr(ws));
    try {
      p.re = std::regex(p.source, std::regex::ECMAScript | std::regex::icase);
    } catch (const std::regex_error& e) {
      throw ParseError(fmt::format("{}: pattern '{}': {}", origin, p.id, e.what()));
    }
    out.push_back(std::move(p));
  }
  return out;
}

Moderator::Moderator(std::vector<NamedPattern> injection, std::vector<NamedPattern> harmful,
                     std::vector<std::string> lexicon, std::vector<std::string> feature_names)
    : injection_(std::move(injection)), harmful_(std::move(harmful)), lexicon_(std::move(lexicon)) {
  for (auto& name : feature_names) lexicon_.push_back(std::move(name));
  for (auto& term : lexicon_) {
    std::transform(term.begin(), term.end(), term.begin(), [](unsigned char c) { return std::tolower(c); });
  }
}

Moderator Moderator::Load(const std::string& dir, const DataDictionary& dict) {
  auto injection = ParsePatterns(ReadFile(dir + "/injection_patterns.txt"), "injection_patterns.txt");
  auto harmful = ParsePatterns(ReadFile(dir + "/harmful_patterns.txt"), "harmful_patterns.txt");
  auto lexicon = ParseLines(ReadFile(dir + "/domain_lexicon.txt"));
  std::vector<std::string> names;
  for (const auto& f : dict.features()) names.push_back(f.name);
  return Moderator(std::move(injection), std::move(harmful), std::move(lexicon), std::move(names));
}

bool Moderator::InScope(std::string_view text) const {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '-' || c == '\'') {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  for (auto& w : words) {
    if (w.size() > 2 && w.compare(w.size() - 2, 2, "'s") == 0) w.resize(w.size() - 2);
  }
  for (const auto& term : lexicon_) {
    const bool prefix = !term.empty() && term.back() == '*';
    const std::string_view stem = prefix ? std::string_view(term).substr(0, term.size() - 1) : std::string_view(term);
    for (const auto& w : words) {
      if (prefix ? w.starts_with(stem) : w == stem) return true;
    }
  }
  return false;
}

ModerationVerdict Moderator::Moderate(const std::string& text, ModerationClient* client,
                                      std::vector<std::string>* degradations) const {
  for (const auto& p : injection_) {
    if (std::regex_search(text, p.re)) return {false, ModerationCategory::kPromptInjection, p.id};
  }
  for (const auto& p : harmful_) {
    if (std::regex_search(text, p.re)) return {false, ModerationCategory::kHarmfulContent, p.id};
  }
  if (client) {
    try {
      if (auto flag = client->Flag(text)) return {false, ModerationCategory::kHarmfulContent, "provider:" + *flag};
    } catch (const ProviderError& e) {
      spdlog::warn("moderation endpoint unavailable, using patterns only: {}", e.what());
      if (degradations) degradations->push_back("moderation_endpoint_unavailable");
    }
  }
  if (!InScope(text)) return {true, ModerationCategory::kOffScope, "no-domain-term"};
  return {true, ModerationCategory::kClean, ""};
}

}  // namespace cfx
