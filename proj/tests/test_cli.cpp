// Runs the gmic executable end to end on a tiny configuration.
#include "doctest.h"

#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

const fs::path kBinary = GMIC_CLI_PATH;
const fs::path kTinyConfig = GMIC_TEST_DATA "/tiny_run.json";

fs::path work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "gmic_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// Exit status of `gmic <args>`; stdout and stderr go to <work>/last.log.
int run(const std::string& args) {
  const std::string cmd = "cd '" + work_dir().string() + "' && '" + kBinary.string() + "' " + args + " > last.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

int tiny(const std::string& args) { return run("--config '" + kTinyConfig.string() + "' " + args); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string last_log() { return slurp(work_dir() / "last.log"); }

Json json_file(const fs::path& p) { return Json::parse(slurp(work_dir() / p)); }

bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) return false;
    ++files;
  }
  std::size_t other = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) other += e.is_regular_file();
  return files == other && files > 0;
}

// Shared dataset and trained run for the later cases.
void ensure_run() {
  if (fs::exists(work_dir() / "run" / "best.ckpt")) return;
  REQUIRE(tiny("--seed 7 generate --out data") == 0);
  REQUIRE(tiny("train --data data --out run") == 0);
}

}  // namespace

TEST_CASE("generate is deterministic and creates missing directories") {
  REQUIRE(tiny("--seed 7 generate --out gen/a") == 0);
  REQUIRE(tiny("--seed 7 generate --out nested/deeper/b") == 0);
  CHECK(same_tree(work_dir() / "gen/a", work_dir() / "nested/deeper/b"));
  CHECK(fs::exists(work_dir() / "gen/a/test/index.csv"));
  REQUIRE(tiny("--seed 8 generate --out gen/c") == 0);
  CHECK_FALSE(same_tree(work_dir() / "gen/a", work_dir() / "gen/c"));
}

TEST_CASE("config errors exit with code 2 and name the field") {
  CHECK(tiny("--set synth.prevalence_benign=1.5 generate --out bad") == 2);
  CHECK(last_log().find("prevalence_benign") != std::string::npos);
  CHECK(tiny("--set train.bogus=1 generate --out bad") == 2);
  CHECK(last_log().find("train.bogus") != std::string::npos);
  CHECK(run("--config missing.json generate --out bad") == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(tiny("--print-config") == 0);
  CHECK(Json::parse(last_log())["network"]["input_height"] == 32);
}

TEST_CASE("train writes artifacts and resume continues the epoch count") {
  ensure_run();
  for (const char* f : {"metrics.csv", "best.ckpt", "best.ckpt.json", "last.ckpt", "config.json"})
    CHECK(fs::exists(work_dir() / "run" / f));
  REQUIRE(tiny("--seed 7 generate --out data_r") == 0);
  REQUIRE(tiny("--set train.epochs=1 train --data data_r --out resumed") == 0);
  REQUIRE(tiny("--set train.epochs=2 train --data data_r --out resumed --resume") == 0);
  CHECK(last_log().find("epoch 2 loss") != std::string::npos);
  CHECK(last_log().find("epoch 1 loss") == std::string::npos);
  // same two epochs as the uninterrupted run
  CHECK(slurp(work_dir() / "resumed/metrics.csv") == slurp(work_dir() / "run/metrics.csv"));
}

TEST_CASE("non-finite loss exits with code 3") {
  ensure_run();
  CHECK(tiny("--set train.learning_rate=1e30 train --data data --out nan") == 3);
  CHECK(last_log().find("non-finite loss") != std::string::npos);
}

TEST_CASE("eval report, singleton ensemble and identity TTA") {
  ensure_run();
  REQUIRE(run("eval --checkpoint run/best.ckpt --data data --dsc --report plain.json --scores-out scores") == 0);
  const Json plain = json_file("plain.json");
  const Json& m = plain["models"][0]["metrics"];
  for (const char* head : {"global", "local", "average", "fusion"})
    for (const char* cls : {"benign", "malignant"}) {
      CHECK(m[head][cls].contains("auc"));
      CHECK(m[head][cls].contains("prauc"));
    }
  CHECK(plain["dsc"]["malignant"].contains("hard"));
  CHECK(fs::exists(work_dir() / "scores/scores_0.csv"));

  REQUIRE(run("eval --checkpoint run/best.ckpt --data data --ensemble --report ens.json") == 0);
  CHECK(json_file("ens.json")["ensemble"]["metrics"] == m);

  REQUIRE(run("--set train.max_translation=0 --set train.max_scale=0 eval --checkpoint run/best.ckpt --data data "
              "--tta 4 --report tta.json") == 0);
  CHECK(json_file("tta.json")["models"][0]["metrics"] == m);
}

TEST_CASE("hybrid and simplex combiners from score files") {
  ensure_run();
  REQUIRE(run("eval --checkpoint run/best.ckpt --checkpoint run/last.ckpt --data data --scores-out sc "
              "--report two.json") == 0);
  REQUIRE(run("eval --checkpoint run/best.ckpt --data data --hybrid sc/scores_1.csv --report hyb/h.json") == 0);
  const Json h = json_file("hyb/h.json")["hybrid"]["malignant"];
  CHECK(h["best_auc"].get<double>() >= h["model_auc"].get<double>());
  CHECK(h["best_auc"].get<double>() >= h["reader_auc"].get<double>());
  CHECK(fs::exists(work_dir() / "hyb/hybrid_malignant.csv"));
  REQUIRE(run("eval --simplex sc/scores_0.csv sc/scores_1.csv --report simplex.json") == 0);
  const Json s = json_file("simplex.json")["simplex"]["malignant"];
  CHECK(s["weights"].size() == 2);
  CHECK(s["weights"][0].get<double>() + s["weights"][1].get<double>() == doctest::Approx(1.0));
}

TEST_CASE("viz writes maps at image size, patches and attention") {
  ensure_run();
  REQUIRE(run("viz --checkpoint run/best.ckpt --image data/test/images/30_CC.pgm --out viz1") == 0);
  REQUIRE(run("viz --checkpoint run/best.ckpt --image data/test/images/30_CC.pgm --out viz2") == 0);
  CHECK(same_tree(work_dir() / "viz1", work_dir() / "viz2"));
  const Json j = json_file("viz1/viz.json");
  CHECK(j["patches"].size() == 2);
  CHECK(j["alpha_sum"].get<double>() == doctest::Approx(1.0).epsilon(1e-6));
  for (const char* f : {"overlay.pgm", "saliency_benign.pgm", "saliency_malignant.pgm", "patch_0.pgm", "patch_1.pgm"})
    CHECK(fs::exists(work_dir() / "viz1" / f));
  const std::string pgm = slurp(work_dir() / "viz1/saliency_malignant.pgm");
  CHECK(pgm.rfind("P5\n32 32\n255\n", 0) == 0);
  const std::string patch = slurp(work_dir() / "viz1/patch_0.pgm");
  CHECK(patch.rfind("P5\n16 16\n255\n", 0) == 0);
}

TEST_CASE("sweep is deterministic, ranked and keeps the top checkpoints") {
  ensure_run();
  REQUIRE(tiny("--set train.epochs=1 sweep --data data --out sw1 --trials 4 --keep 2") == 0);
  REQUIRE(tiny("--set train.epochs=1 sweep --data data --out sw2 --trials 4 --keep 2") == 0);
  CHECK(slurp(work_dir() / "sw1/trials.json") == slurp(work_dir() / "sw2/trials.json"));
  const Json t = json_file("sw1/trials.json");
  REQUIRE(t.size() == 4);
  for (std::size_t i = 1; i < t.size(); ++i) {
    const double prev = t[i - 1]["val_auc"].is_null() ? -1 : t[i - 1]["val_auc"].get<double>();
    const double cur = t[i]["val_auc"].is_null() ? -1 : t[i]["val_auc"].get<double>();
    CHECK(prev >= cur);
    if (prev == cur) CHECK(t[i - 1]["trial_id"].get<int>() < t[i]["trial_id"].get<int>());
  }
  CHECK(fs::exists(work_dir() / "sw1/top1.ckpt"));
  CHECK(fs::exists(work_dir() / "sw1/top2.ckpt.json"));
  CHECK_FALSE(fs::exists(work_dir() / "sw1/top3.ckpt"));
  CHECK(run("eval --checkpoint sw1/top1.ckpt --checkpoint sw1/top2.ckpt --ensemble --data data --report sw.json") == 0);
}
