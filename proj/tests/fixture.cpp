#include "fixture.hpp"

#include <cstdlib>
#include <mutex>

#include <unistd.h>

#include "cfx/errors.hpp"
#include "cfx/synthetic.hpp"

namespace fs = std::filesystem;

namespace cfx::testing {

std::string DataPath(const std::string& name) { return (fs::path(CFX_TEST_DATA_DIR) / name).string(); }

fs::path TempDir(const std::string& tag) {
  static std::vector<fs::path>* dirs = [] {
    auto* v = new std::vector<fs::path>;
    std::atexit([] {
      std::error_code ec;
      for (const auto& d : *dirs) fs::remove_all(d, ec);
    });
    return v;
  }();
  static int counter = 0;
  auto d = fs::temp_directory_path() / ("cfx-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::create_directories(d);
  dirs->push_back(d);
  return d;
}

ApiConfig World::Config() const {
  ApiConfig c;
  c.weights_path = weights_path;
  c.dictionary_path = DataPath("cvd_dictionary");
  c.rules_path = DataPath("cvd_rules");
  c.dataset_path = csv_path;
  c.moderation_dir = DataPath("moderation");
  c.script_path = DataPath("scenarios/mock_script.json");
  c.session_log_path = (dir / "sessions.jsonl").string();
  c.max_rows = 20000;
  return c;
}

ServiceParts World::Parts() const {
  auto parts = LoadParts(Config());
  return parts;
}

const PatientRecord& World::HighRiskPatient(std::size_t skip) const {
  for (auto i : HeldOutIndices(data, model->split_seed())) {
    if (model->Predict(data.records[i]).label != RiskLabel::kHighRisk) continue;
    if (skip-- == 0) return data.records[i];
  }
  throw ValidationError("no high-risk held-out patient");
}

const World& SharedWorld() {
  static std::once_flag once;
  static World w;
  std::call_once(once, [] {
    w.dir = TempDir("world");
    w.dict = DataDictionary::Load(DataPath("cvd_dictionary"));
    w.csv_path = (w.dir / "cvd.csv").string();
    WriteSyntheticCsv(w.csv_path, w.dict, {60000, 7});
    w.data = IngestCsv(w.csv_path, w.dict, {20000, 42});
    TrainConfig tc;
    tc.epochs = 6;
    w.model = std::make_unique<RiskModel>(Train(w.data, w.dict, tc));
    w.weights_path = (w.dir / "model.weights").string();
    w.model->Save(w.weights_path);
    w.rules = LoadRules(DataPath("cvd_rules"), w.dict);
  });
  return w;
}

}  // namespace cfx::testing
