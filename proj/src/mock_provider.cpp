#include "cfx/mock_provider.hpp"

#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "cfx/block_file.hpp"
#include "cfx/errors.hpp"

namespace cfx {

namespace {

std::regex CompileRegex(const std::string& pattern, const std::string& where) {
  try {
    return std::regex(pattern, std::regex::ECMAScript | std::regex::icase);
  } catch (const std::regex_error& e) {
    throw ParseError(fmt::format("mock script {}: bad regex '{}': {}", where, pattern, e.what()));
  }
}

Purpose ParsePurpose(const std::string& s, const std::string& where) {
  if (s == "chat") return Purpose::kChat;
  if (s == "judge") return Purpose::kJudge;
  if (s == "verify") return Purpose::kVerify;
  throw ParseError(fmt::format("mock script {}: unknown purpose '{}'", where, s));
}

const ChatMessage* SystemMessage(const std::vector<ChatMessage>& messages) {
  if (!messages.empty() && messages.front().role == Role::kSystem) return &messages.front();
  return nullptr;
}

// Tool results since the last user message, oldest first.
std::vector<std::pair<std::string, nlohmann::json>> TurnResults(const std::vector<ChatMessage>& messages) {
  std::size_t start = 0;
  for (std::size_t i = 0; i < messages.size(); ++i) {
    if (messages[i].role == Role::kUser) start = i + 1;
  }
  std::vector<std::pair<std::string, nlohmann::json>> out;
  for (std::size_t i = start; i < messages.size(); ++i) {
    if (messages[i].role != Role::kTool) continue;
    out.emplace_back(messages[i].tool_name, nlohmann::json::parse(messages[i].content, nullptr, false));
  }
  return out;
}

bool Matches(const MockProvider::Entry& e, const ProviderRequest& req,
             const std::vector<std::pair<std::string, nlohmann::json>>& results) {
  if (e.purpose != req.purpose) return false;
  if (e.user) {
    const auto* u = LastUser(req.messages);
    if (!u || !std::regex_search(u->content, *e.user)) return false;
  }
  if (e.system) {
    const auto* s = SystemMessage(req.messages);
    if (!s || !std::regex_search(s->content, *e.system)) return false;
  }
  if (e.after) {
    if (e.after->size() != results.size()) return false;
    for (std::size_t i = 0; i < results.size(); ++i) {
      if ((*e.after)[i] != results[i].first) return false;
    }
  }
  return true;
}

std::string JudgeResponse(const MockProvider::Entry::Judge& judge, const ProviderRequest& req) {
  std::string prompt;
  for (const auto& m : req.messages) prompt += m.content + "\n";
  const bool active = !judge.when || std::regex_search(prompt, *judge.when);
  static const std::regex kLine(R"(^candidate (\d+): (.*)$)", std::regex::multiline);
  nlohmann::json verdicts = nlohmann::json::array();
  for (std::sregex_iterator it(prompt.begin(), prompt.end(), kLine), end; it != end; ++it) {
    const int id = std::stoi((*it)[1].str());
    const std::string body = (*it)[2].str();
    const bool bad = active && std::regex_search(body, judge.infeasible_if);
    nlohmann::json v = {{"candidate_id", id}, {"feasible", !bad}, {"reason", bad ? judge.reason : "practical"}};
    if (bad) v["features"] = judge.features;
    verdicts.push_back(v);
  }
  return nlohmann::json{{"verdicts", verdicts}}.dump();
}

std::string AutoVerify(const ProviderRequest& req) {
  const auto* u = LastUser(req.messages);
  nlohmann::json questions = nlohmann::json::array();
  if (u) {
    const auto b = u->content.find(kDraftBegin);
    const auto e = u->content.find(kDraftEnd);
    if (b != std::string::npos && e != std::string::npos && e > b) {
      const auto draft = std::string_view(u->content).substr(b + kDraftBegin.size(), e - b - kDraftBegin.size());
      for (const auto& c : FindRiskScoreClaims(draft)) {
        if (questions.size() == 3) break;
        questions.push_back({{"kind", "risk_score"}, {"claim", c.value}});
      }
    }
  }
  return nlohmann::json{{"questions", questions}}.dump();
}

}  // namespace

std::string RenderTemplate(const std::string& text,
                           const std::vector<std::pair<std::string, nlohmann::json>>& results) {
  static const std::regex kSlot(R"(\{\{\s*([A-Za-z_][A-Za-z0-9_]*)((?:\.[A-Za-z0-9_]+)*)\s*\}\})");
  std::string out;
  auto last = text.cbegin();
  for (std::sregex_iterator it(text.begin(), text.end(), kSlot), end; it != end; ++it) {
    const auto& m = *it;
    out.append(last, m[0].first);
    last = m[0].second;
    const std::string tool = m[1].str();
    const nlohmann::json* node = nullptr;
    for (auto r = results.rbegin(); r != results.rend(); ++r) {
      if (r->first == tool) {
        node = &r->second;
        break;
      }
    }
    for (const auto& part : SplitList(m[2].str(), '.')) {
      if (!node || part.empty()) continue;
      if (node->is_array() && std::all_of(part.begin(), part.end(), ::isdigit)) {
        const auto i = std::stoul(part);
        node = i < node->size() ? &(*node)[i] : nullptr;
      } else if (node->is_object() && node->contains(part)) {
        node = &(*node)[part];
      } else {
        node = nullptr;
      }
    }
    if (!node) {
      out += fmt::format("<missing:{}{}>", tool, m[2].str());
    } else if (node->is_string()) {
      out += node->get<std::string>();
    } else if (node->is_number_float()) {
      out += fmt::format("{:.2f}", node->get<double>());
    } else {
      out += node->dump();
    }
  }
  out.append(last, text.cend());
  return out;
}

MockProvider MockProvider::Parse(const nlohmann::json& script) {
  if (!script.is_object() || !script.contains("entries") || !script["entries"].is_array()) {
    throw ParseError("mock script: expected an object with an 'entries' list");
  }
  MockProvider mock;
  int n = 0;
  for (const auto& j : script["entries"]) {
    const std::string where = fmt::format("entry {}", n++);
    if (!j.is_object()) throw ParseError(fmt::format("mock script {}: not an object", where));
    Entry e;
    e.name = j.value("name", where);
    e.purpose = ParsePurpose(j.value("purpose", "chat"), where);
    if (j.contains("user")) e.user = CompileRegex(j["user"].get<std::string>(), where);
    if (j.contains("system")) e.system = CompileRegex(j["system"].get<std::string>(), where);
    if (j.contains("after")) e.after = j["after"].get<std::vector<std::string>>();
    int responses = 0;
    if (j.contains("tool_call")) {
      const auto& tc = j["tool_call"];
      if (!tc.is_object() || !tc.contains("name")) throw ParseError(fmt::format("mock script {}: bad tool_call", where));
      e.tool_call = ToolCall{"", tc["name"].get<std::string>(), tc.value("arguments", nlohmann::json::object())};
      ++responses;
    }
    if (j.contains("text")) {
      e.text = j["text"].get<std::string>();
      ++responses;
    }
    if (j.contains("judge")) {
      const auto& jj = j["judge"];
      Entry::Judge judge;
      if (jj.contains("when")) judge.when = CompileRegex(jj["when"].get<std::string>(), where);
      judge.infeasible_if = CompileRegex(jj.value("infeasible_if", "$^"), where);
      judge.reason = jj.value("reason", "");
      judge.features = jj.value("features", std::vector<std::string>{});
      e.judge = std::move(judge);
      ++responses;
    }
    if (j.contains("verify")) {
      if (j["verify"] != "auto") throw ParseError(fmt::format("mock script {}: verify must be \"auto\"", where));
      e.verify_auto = true;
      ++responses;
    }
    if (j.value("fail", false)) {
      e.fail = true;
      ++responses;
    }
    if (responses != 1) {
      throw ParseError(fmt::format("mock script {}: needs exactly one of tool_call, text, judge, verify, fail", where));
    }
    mock.entries_.push_back(std::move(e));
  }
  return mock;
}

MockProvider MockProvider::Load(const std::string& path) {
  const std::string text = ReadFile(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(fmt::format("{}: {}", path, e.what()));
  }
  try {
    return Parse(j);
  } catch (const ParseError& e) {
    throw ParseError(fmt::format("{}: {}", path, e.what()));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(fmt::format("{}: {}", path, e.what()));
  }
}

ProviderResponse MockProvider::Complete(const ProviderRequest& request) {
  const auto results = TurnResults(request.messages);
  for (const auto& e : entries_) {
    if (!Matches(e, request, results)) continue;
    if (e.fail) throw ProviderError(fmt::format("scripted failure ({})", e.name));
    ProviderResponse r;
    if (e.tool_call) {
      r.tool_call = *e.tool_call;
      r.tool_call->id = fmt::format("call_{}_{}", results.size(), e.tool_call->name);
    } else if (e.text) {
      r.content = RenderTemplate(*e.text, results);
    } else if (e.judge) {
      r.content = JudgeResponse(*e.judge, request);
    } else if (e.verify_auto) {
      r.content = AutoVerify(request);
    }
    return r;
  }
  const auto* u = LastUser(request.messages);
  throw ProviderError(fmt::format("mock script has no {} entry for '{}'", ToString(request.purpose),
                                  u ? u->content.substr(0, 80) : std::string()));
}

}  // namespace cfx
