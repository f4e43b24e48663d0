#pragma once

#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/provider.hpp"
#include "cfx/schema.hpp"

namespace cfx {

enum class ModerationCategory { kClean, kHarmfulContent, kPromptInjection, kOffScope };

std::string_view ToString(ModerationCategory c);
ModerationCategory ParseModerationCategory(std::string_view s);

struct ModerationVerdict {
  bool allowed = true;
  ModerationCategory category = ModerationCategory::kClean;
  std::string matched;  // pattern id or provider category

  bool operator==(const ModerationVerdict&) const = default;
};

nlohmann::json ToJson(const ModerationVerdict& v);
ModerationVerdict ModerationVerdictFromJson(const nlohmann::json& j);

struct NamedPattern {
  std::string id;
  std::string source;
  std::regex re;
};

/// "id regex" lines; '#' comments and blank lines are skipped.
std::vector<NamedPattern> ParsePatterns(std::string_view text, std::string_view origin);

/// Plain lines with comments and blanks removed.
std::vector<std::string> ParseLines(std::string_view text);

class Moderator {
 public:
  Moderator(std::vector<NamedPattern> injection, std::vector<NamedPattern> harmful, std::vector<std::string> lexicon,
            std::vector<std::string> feature_names);

  /// Loads injection_patterns.txt, harmful_patterns.txt and domain_lexicon.txt
  /// from `dir`.
  static Moderator Load(const std::string& dir, const DataDictionary& dict);

  /// Injection patterns, then harmful patterns, then the hosted endpoint
  /// (when given); first flag wins. Text with no in-scope term is allowed as
  /// off_scope. Endpoint failures are appended to `degradations`.
  ModerationVerdict Moderate(const std::string& text, ModerationClient* client,
                             std::vector<std::string>* degradations = nullptr) const;

  bool InScope(std::string_view text) const;

 private:
  std::vector<NamedPattern> injection_;
  std::vector<NamedPattern> harmful_;
  std::vector<std::string> lexicon_;
};

}  // namespace cfx
