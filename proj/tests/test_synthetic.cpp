#include "doctest.h"

#include "gmic/evaluation.hpp"
#include "gmic/synthetic.hpp"

#include <filesystem>
#include <set>

using namespace gmic;

namespace {

SynthConfig small(int n = 40) {
  SynthConfig cfg;
  cfg.n_train = n;
  cfg.n_val = n / 2;
  cfg.n_test = n / 2;
  cfg.prevalence_benign = 0.5;
  cfg.prevalence_malignant = 0.5;
  cfg.seed = 17;
  return cfg;
}

}  // namespace

TEST_CASE("zero prevalence gives no labels and empty masks") {
  SynthConfig cfg = small();
  cfg.prevalence_benign = 0;
  cfg.prevalence_malignant = 0;
  const Dataset d = generate(cfg);
  for (Split s : {Split::train, Split::val, Split::test})
    for (const auto& exam : d.split(s)) {
      CHECK_FALSE(exam.positive());
      for (const auto& v : exam.views) {
        CHECK(v.mask_benign.cast<int>().sum() == 0);
        CHECK(v.mask_malignant.cast<int>().sum() == 0);
      }
    }
}

TEST_CASE("regeneration is bitwise identical and seeds matter") {
  const Dataset a = generate(small()), b = generate(small());
  SynthConfig other = small();
  other.seed = 18;
  const Dataset c = generate(other);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.train.size(); ++i)
    for (std::size_t v = 0; v < 2; ++v) {
      CHECK((a.train[i].views[v].image == b.train[i].views[v].image).all());
      CHECK((a.train[i].views[v].mask_malignant == b.train[i].views[v].mask_malignant).all());
      any_diff = any_diff || !(a.train[i].views[v].image == c.train[i].views[v].image).all();
    }
  CHECK(any_diff);
  // one exam regenerated alone equals its copy in the full dataset
  const SynthExam alone = generate_exam(small(), Split::val, 3);
  CHECK((alone.views[1].image == a.val[3].views[1].image).all());
}

TEST_CASE("labels, masks and views are consistent") {
  const Dataset d = generate(small(60));
  int positives = 0;
  for (Split s : {Split::train, Split::val, Split::test})
    for (const auto& exam : d.split(s)) {
      CHECK(exam.views[0].view == View::cc);
      CHECK(exam.views[1].view == View::mlo);
      for (const auto& v : exam.views) {
        CHECK(v.label_benign == exam.label_benign);
        CHECK(v.label_malignant == exam.label_malignant);
        CHECK(v.breast_id == exam.breast_id);
        for (int cls = 0; cls < 2; ++cls) CHECK((v.label(cls) == 1) == (v.mask(cls).cast<int>().sum() > 0));
        CHECK(v.image.minCoeff() >= 0.0f);
        CHECK(v.image.maxCoeff() <= 1.0f);
        // 8-bit quantised intensities
        CHECK(((v.image * 255.0f).round() / 255.0f == v.image).all());
      }
      positives += exam.positive();
    }
  CHECK(positives > 0);
}

TEST_CASE("every mask pixel differs from the lesion-free render") {
  const SynthConfig cfg = small(60);
  int checked = 0;
  for (int i = 0; i < 60; ++i) {
    const SynthExam with = generate_exam(cfg, Split::train, i);
    if (!with.positive()) continue;
    const SynthExam without = generate_exam(cfg, Split::train, i, false);
    for (std::size_t v = 0; v < 2; ++v) {
      const auto& a = with.views[v];
      const auto& b = without.views[v];
      for (Index p = 0; p < a.image.size(); ++p) {
        const bool masked = a.mask_benign.data()[p] || a.mask_malignant.data()[p];
        if (masked) CHECK(a.image.data()[p] != b.image.data()[p]);
        else CHECK(a.image.data()[p] == b.image.data()[p]);
      }
      ++checked;
    }
  }
  CHECK(checked > 20);
}

TEST_CASE("mean brightness alone does not detect malignancy") {
  SynthConfig cfg;
  cfg.n_train = 0;
  cfg.n_val = 0;
  cfg.n_test = 400;
  const Dataset d = generate(cfg);
  ScoredSet s;
  for (const auto& exam : d.test)
    for (const auto& v : exam.views) {
      s.scores.push_back(static_cast<double>(v.image.mean()));
      s.labels.push_back(v.label_malignant);
    }
  const double a = auc(s);
  MESSAGE("brightness AUC " << a);
  CHECK(a < 0.7);
}

TEST_CASE("splits are disjoint by breast id") {
  const Dataset d = generate(small(80));
  std::set<int> seen;
  std::size_t total = 0;
  for (Split s : {Split::train, Split::val, Split::test})
    for (const auto& exam : d.split(s)) {
      seen.insert(exam.breast_id);
      ++total;
    }
  CHECK(seen.size() == total);
}

TEST_CASE("config validation names the field") {
  SynthConfig cfg;
  cfg.prevalence_malignant = 1.5;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("prevalence_malignant"), ConfigError);
  cfg = SynthConfig{};
  cfg.malignant_radius_max = 40;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("malignant_radius_max"), ConfigError);
  cfg = SynthConfig{};
  cfg.benign_contrast = 0.3;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("benign_contrast"), ConfigError);
  CHECK_THROWS_AS(generate(cfg), ConfigError);
}

TEST_CASE("dataset round-trips through PGM files") {
  const auto dir = std::filesystem::temp_directory_path() / "gmic_test_dataset";
  std::filesystem::remove_all(dir);
  const Dataset d = generate(small(10));
  write_dataset(d, dir);
  CHECK(std::filesystem::exists(dir / "train" / "index.csv"));
  const Dataset back = read_dataset(dir);
  REQUIRE(back.train.size() == d.train.size());
  REQUIRE(back.test.size() == d.test.size());
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    CHECK(back.train[i].exam_id == d.train[i].exam_id);
    CHECK(back.train[i].label_malignant == d.train[i].label_malignant);
    for (std::size_t v = 0; v < 2; ++v) {
      CHECK((back.train[i].views[v].image == d.train[i].views[v].image).all());
      CHECK((back.train[i].views[v].mask_benign == d.train[i].views[v].mask_benign).all());
      CHECK(back.train[i].views[v].view == d.train[i].views[v].view);
    }
  }
  CHECK_THROWS_AS(read_dataset(dir / "missing"), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("view and split names") {
  CHECK(to_string(View::cc) == "CC");
  CHECK(view_from_string("MLO") == View::mlo);
  CHECK_THROWS_AS(view_from_string("LAT"), ConfigError);
  CHECK(to_string(Split::val) == "val");
}
