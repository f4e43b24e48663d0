#pragma once

#include <cstdint>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/explain.hpp"
#include "cfx/guardrails.hpp"
#include "cfx/model.hpp"
#include "cfx/moderation.hpp"
#include "cfx/provider.hpp"
#include "cfx/recourse.hpp"
#include "cfx/schema.hpp"

namespace cfx {

/// A turn was requested while another is in flight and queueing is off.
class SessionBusy : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ToolTraceEntry {
  std::string tool;
  nlohmann::json arguments;
  std::string result_digest;
};

struct JudgeVerdict {
  std::size_t candidate_id = 0;
  bool feasible = true;
  std::string reason;
  std::vector<std::string> features;  // features the judge objected to
};

struct RecommendationCard {
  std::vector<std::string> steps;
  std::string justification;
  std::vector<FeatureChange> deltas;
  int projected_risk = 0;
  double proximity = 0.0;
};

struct Reply {
  std::string text;
  std::vector<RecommendationCard> cards;
  Prediction before;
  Prediction after;
  bool panels_dirty = false;
};

struct Turn {
  int index = 0;
  std::string user_text;
  ModerationVerdict moderation;
  std::vector<ToolTraceEntry> tool_trace;
  std::vector<JudgeVerdict> judge_verdicts;
  Reply reply;
  int provider_calls = 0;
  std::vector<std::string> degradations;
  bool error = false;
  nlohmann::json overrides = nlohmann::json::object();  // scenario after the turn
};

nlohmann::json ToJson(const RecommendationCard& card, const DataDictionary& dict);
nlohmann::json ToJson(const Turn& turn, const DataDictionary& dict);
Turn TurnFromJson(const nlohmann::json& j, const DataDictionary& dict);

struct Icebreaker {
  std::string label;
  std::string text;
  std::string flow;  // T1, T2 or T3
};

std::vector<Icebreaker> DefaultIcebreakers();

struct AgentConfig {
  int max_tool_rounds = 4;
  double temperature = 0.0;
  int max_cards = 3;
  bool queue_turns = true;
  std::uint64_t seed = 42;
  SearchConfig search;
  std::string refusal_text =
      "I can't help with that request. Please keep questions to this patient's cardiovascular risk, what drives it "
      "and how it could change.";
  std::string redirect_text =
      "That is outside what I can help with here. I can explain this patient's cardiovascular risk, suggest "
      "actionable changes that could lower it, or show what happens if a value changes. For example: \"Why is this "
      "patient high risk?\"";
  std::string error_text = "Sorry, I could not complete that request. Please try again.";
  std::vector<Icebreaker> icebreakers = DefaultIcebreakers();
};

/// Per-patient conversation. Turns are append-only and serialized.
class ChatSession {
 public:
  ChatSession(std::string id, PatientRecord patient, const DataDictionary& dict, std::string created_at);

  const std::string& id() const { return id_; }
  const PatientRecord& patient() const { return patient_; }
  const std::string& created_at() const { return created_at_; }

  std::vector<Turn> turns() const;
  ScenarioRecord scenario() const;

  /// Serializes every mutation of the session, including what-if overrides
  /// coming from outside the chat.
  std::mutex& turn_mutex() { return turn_mu_; }

  // Callers must hold turn_mutex().
  void SetScenario(ScenarioRecord scenario);
  void AppendTurn(Turn turn);
  std::size_t turn_count_locked() const { return turns_.size(); }

 private:
  std::string id_;
  PatientRecord patient_;
  std::string created_at_;
  std::mutex turn_mu_;
  mutable std::mutex state_mu_;  // guards reads from other threads
  ScenarioRecord scenario_;
  std::vector<Turn> turns_;
};

struct AgentDeps {
  const RiskModel* model = nullptr;
  const DataDictionary* dict = nullptr;
  const Dataset* data = nullptr;
  const std::vector<GuardrailRule>* rules = nullptr;
  const Moderator* moderator = nullptr;
  ChatProvider* provider = nullptr;
  ModerationClient* moderation_client = nullptr;  // optional
};

/// Values a verification pass may check claims against.
struct VerifyFacts {
  std::vector<int> risk_scores;  // every score reported by a tool this turn
  PatientRecord record;
  const DataDictionary* dict = nullptr;
};

struct VerifyQuestion {
  std::string kind;  // risk_score, feature_exists, feature_value
  std::string name;  // feature name for feature_exists / feature_value
  std::string claim;
};

/// Judge response -> one verdict per candidate. Missing or unparseable
/// verdicts are feasible with reason "judge unavailable"; empty reasons
/// become "unspecified".
std::vector<JudgeVerdict> ParseJudgeResponse(const std::string& text, std::size_t n_candidates, bool* parsed);

/// At most 3 questions; nullopt when the text is not a question list.
std::optional<std::vector<VerifyQuestion>> ParseVerifyQuestions(const std::string& text);

/// Answers each question from the facts and revises the draft where an
/// answer contradicts it. Risk-score claims absent from the facts are
/// replaced by the closest reported score.
std::string ApplyVerification(const std::string& draft, const std::vector<VerifyQuestion>& questions,
                              const VerifyFacts& facts);

class Agent {
 public:
  Agent(AgentDeps deps, AgentConfig config);

  /// Runs one turn. Throws ValidationError on empty text and SessionBusy when
  /// queueing is disabled and a turn is in flight.
  Turn HandleMessage(ChatSession& session, const std::string& text);

  /// One provider call for the whole batch.
  std::vector<JudgeVerdict> Judge(const RecourseSet& candidates, const PatientRecord& baseline, int* provider_calls,
                                  std::vector<std::string>* degradations);

  /// One verification round; the draft is returned unchanged on provider
  /// failure.
  std::string Verify(const std::string& draft, const VerifyFacts& facts, int* provider_calls,
                     std::vector<std::string>* degradations);

  const std::vector<Icebreaker>& icebreakers() const { return config_.icebreakers; }
  const AgentConfig& config() const { return config_; }
  const AgentDeps& deps() const { return deps_; }

  static std::vector<ToolSchema> ToolSchemas();
  std::string SystemPrompt(const PatientRecord& effective) const;

 private:
  struct TurnState;

  nlohmann::json ExecuteTool(const ToolCall& call, TurnState& st);
  nlohmann::json ToolPredict(const nlohmann::json& args, TurnState& st);
  nlohmann::json ToolImportance(const nlohmann::json& args, TurnState& st);
  nlohmann::json ToolRecourse(const nlohmann::json& args, TurnState& st);
  nlohmann::json ToolWhatIf(const nlohmann::json& args, TurnState& st);
  nlohmann::json ToolPanels(const nlohmann::json& args, TurnState& st);
  RecommendationCard MakeCard(const RecourseCandidate& c, const PatientRecord& baseline) const;

  AgentDeps deps_;
  AgentConfig config_;
};

}  // namespace cfx
