// cfx: command-line front end for the risk model, recourse search, chat
// service and scenario evaluation.

#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cfx/errors.hpp"
#include "cfx/explain.hpp"
#include "cfx/guardrails.hpp"
#include "cfx/model.hpp"
#include "cfx/recourse.hpp"
#include "cfx/scenarios.hpp"
#include "cfx/schema.hpp"
#include "cfx/service.hpp"
#include "cfx/synthetic.hpp"

namespace fs = std::filesystem;
using namespace cfx;

namespace {

const std::string kDataDir = CFX_DEFAULT_DATA_DIR;

std::string DataFile(const std::string& name) { return (fs::path(kDataDir) / name).string(); }

cfx::Service* g_service = nullptr;

void OnSignal(int) {
  if (g_service) g_service->Stop();
}

ApiConfig LoadConfig(const std::string& path) {
  auto c = ApiConfig::Load(path);
  c.ApplyEnv();
  return c;
}

int Synth(const std::string& dict_path, const std::string& out, std::size_t rows, std::uint64_t seed) {
  const auto dict = DataDictionary::Load(dict_path);
  if (!fs::path(out).parent_path().empty()) fs::create_directories(fs::path(out).parent_path());
  WriteSyntheticCsv(out, dict, {rows, seed});
  fmt::print("wrote {} rows to {}\n", rows, out);
  return 0;
}

struct TrainArgs {
  std::string dictionary = DataFile("cvd_dictionary");
  std::string data;
  std::string out;
  std::string arch = "mlp";
  int hidden = 32;
  int epochs = 10;
  std::size_t max_rows = 50000;
  std::uint64_t subsample_seed = 42;
  std::uint64_t seed = 42;
  bool class_weighting = false;
  bool force = false;
};

int TrainCmd(const TrainArgs& a) {
  if (fs::exists(a.out) && !a.force) {
    fmt::print(stderr, "error: {} exists; pass --force to overwrite\n", a.out);
    return 1;
  }
  const auto dict = DataDictionary::Load(a.dictionary);
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = IngestCsv(a.data, dict, {a.max_rows, a.subsample_seed});
  TrainConfig tc;
  tc.architecture = a.arch == "logistic" ? Architecture::kLogistic : Architecture::kMlp;
  tc.hidden_width = a.hidden;
  tc.epochs = a.epochs;
  tc.seed = a.seed;
  tc.class_weighting = a.class_weighting;
  const auto model = Train(data, dict, tc);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!fs::path(a.out).parent_path().empty()) fs::create_directories(fs::path(a.out).parent_path());
  model.Save(a.out);
  const auto& m = model.metrics();
  fmt::print("rows {}  architecture {}  held-out accuracy {:.4f}  AUC {}  ({:.1f} s)\n", data.records.size(),
             ToString(model.architecture()), m.accuracy, m.auc ? fmt::format("{:.4f}", *m.auc) : "n/a", secs);
  fmt::print("saved {}\n", a.out);
  return 0;
}

int Serve(const std::string& config_path) {
  auto config = LoadConfig(config_path);
  config.Validate();
  auto service = Service::FromConfig(config);
  g_service = service.get();
  std::signal(SIGINT, OnSignal);
  std::signal(SIGTERM, OnSignal);
  spdlog::info("listening on {}:{}", config.listen_host, config.listen_port);
  service->Run(config.listen_host, config.listen_port);
  g_service = nullptr;
  return 0;
}

int RecourseCmd(const std::string& config_path, const std::string& patient, const std::string& desired, int k,
                std::uint64_t seed, const std::vector<std::string>& frozen) {
  const auto in = LoadEvalInputs(LoadConfig(config_path));
  const auto* record = in.data.FindById(patient);
  if (!record) throw ValidationError(fmt::format("unknown patient '{}'", patient));
  RecourseQuery q;
  q.baseline = *record;
  const auto label = ParseRiskLabel(desired);
  if (!label) throw ValidationError(fmt::format("--desired must be low_risk or high_risk, got '{}'", desired));
  q.desired_label = *label;
  q.k = k;
  q.frozen = frozen;
  q.seed = seed;
  auto set = Generate(q, *in.model, {});
  auto check = Check(set, q.baseline, in.rules, in.dict);
  bool regenerated = false;
  if (!check.violations.empty()) {
    q.extra_constraints = ToConstraints(check.violations);
    check = Check(Generate(q, *in.model, {}), q.baseline, in.rules, in.dict);
    regenerated = true;
  }
  auto out = ToJson(check.passed, in.dict);
  out["baseline"] = ToJson(in.model->Predict(*record));
  out["regenerated"] = regenerated;
  out["violations_removed"] = check.violations.size();
  fmt::print("{}\n", out.dump(2));
  return 0;
}

int Eval(const std::string& config_path, const std::string& scenarios, std::uint64_t seed, bool as_json,
         const std::string& transcript_path) {
  const auto in = LoadEvalInputs(LoadConfig(config_path));
  const auto report = RunScenarios(scenarios, in, seed);
  if (!transcript_path.empty()) std::ofstream(transcript_path) << report.transcript << '\n';
  if (as_json) {
    fmt::print("{}\n", report.ToJson().dump(2));
  } else {
    fmt::print("{}", report.ToText());
  }
  return report.passed() ? 0 : 1;
}

int ValidateRules(const std::string& dict_path, const std::string& rules_path) {
  const auto dict = DataDictionary::Load(dict_path);
  const auto rules = LoadRules(rules_path, dict);
  for (const auto& r : rules) fmt::print("ok  {}\n", Describe(r, dict));
  fmt::print("{} rules valid\n", rules.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual explanations and chat for a cardiovascular risk model"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  std::string dict_path = DataFile("cvd_dictionary");
  std::string synth_out = "work/cvd.csv";
  std::size_t synth_rows = 319796;
  std::uint64_t synth_seed = 7;
  auto* synth = app.add_subcommand("synth", "Write a synthetic cohort CSV");
  synth->add_option("--dictionary", dict_path, "Data dictionary")->check(CLI::ExistingFile);
  synth->add_option("-o,--out", synth_out, "Output CSV");
  synth->add_option("--rows", synth_rows, "Row count");
  synth->add_option("--seed", synth_seed, "Generator seed");

  TrainArgs ta;
  ta.out = "work/model.weights";
  auto* train = app.add_subcommand("train", "Train the risk model and save weights");
  train->add_option("--data", ta.data, "Cohort CSV")->required()->check(CLI::ExistingFile);
  train->add_option("--dictionary", ta.dictionary, "Data dictionary")->check(CLI::ExistingFile);
  train->add_option("-o,--out", ta.out, "Weights file");
  train->add_option("--arch", ta.arch, "mlp or logistic")->check(CLI::IsMember({"mlp", "logistic"}));
  train->add_option("--hidden", ta.hidden, "Hidden width");
  train->add_option("--epochs", ta.epochs, "Epochs");
  train->add_option("--max-rows", ta.max_rows, "Stratified subsample size");
  train->add_option("--subsample-seed", ta.subsample_seed, "Subsample seed");
  train->add_option("--seed", ta.seed, "Split and initialisation seed");
  train->add_flag("--class-weighting", ta.class_weighting, "Weight classes by inverse frequency");
  train->add_flag("--force", ta.force, "Overwrite an existing weights file");

  std::string config_path = DataFile("serve.conf");
  auto* serve = app.add_subcommand("serve", "Run the REST service");
  serve->add_option("-c,--config", config_path, "Service config")->check(CLI::ExistingFile);

  std::string patient;
  std::string desired = "low_risk";
  int k = 3;
  std::uint64_t seed = 42;
  std::vector<std::string> frozen;
  auto* recourse = app.add_subcommand("recourse", "Print counterfactual recommendations as JSON");
  recourse->add_option("-c,--config", config_path, "Service config")->check(CLI::ExistingFile);
  recourse->add_option("--patient", patient, "Patient id")->required();
  recourse->add_option("--desired", desired, "low_risk or high_risk");
  recourse->add_option("-k", k, "Number of options")->check(CLI::Range(1, 5));
  recourse->add_option("--seed", seed, "Search seed");
  recourse->add_option("--freeze", frozen, "Features to keep fixed");

  std::string scenarios = DataFile("scenarios/eval.json");
  bool as_json = false;
  std::string transcript;
  auto* eval = app.add_subcommand("eval", "Run the scripted chat scenarios");
  eval->add_option("-c,--config", config_path, "Service config")->check(CLI::ExistingFile);
  eval->add_option("--scenarios", scenarios, "Scenario file")->check(CLI::ExistingFile);
  eval->add_option("--seed", seed, "Recourse seed");
  eval->add_flag("--json", as_json, "JSON report");
  eval->add_option("--transcript", transcript, "Write the reply transcript here");

  std::string rules_path = DataFile("cvd_rules");
  auto* validate = app.add_subcommand("validate-rules", "Check a guardrail rule file against the dictionary");
  validate->add_option("--dictionary", dict_path, "Data dictionary")->check(CLI::ExistingFile);
  validate->add_option("--rules", rules_path, "Rule file")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*synth) return Synth(dict_path, synth_out, synth_rows, synth_seed);
    if (*train) return TrainCmd(ta);
    if (*serve) return Serve(config_path);
    if (*recourse) return RecourseCmd(config_path, patient, desired, k, seed, frozen);
    if (*eval) return Eval(config_path, scenarios, seed, as_json, transcript);
    if (*validate) return ValidateRules(dict_path, rules_path);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 2;
}
