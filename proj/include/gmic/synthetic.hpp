// Mammogram-like synthetic exams with planted lesions and exact masks.
#pragma once

#include "gmic/io.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace gmic {

enum class View { cc, mlo };
std::string to_string(View v);
View view_from_string(const std::string& name);

enum class Split { train, val, test };
std::string to_string(Split s);

struct LabeledExample {
  Image image;
  int label_benign = 0;
  int label_malignant = 0;
  Mask mask_benign;
  Mask mask_malignant;
  View view = View::cc;
  int breast_id = 0;

  int label(int cls) const { return cls == 0 ? label_benign : label_malignant; }
  const Mask& mask(int cls) const { return cls == 0 ? mask_benign : mask_malignant; }
};

struct SynthExam {
  int exam_id = 0;
  int breast_id = 0;
  int label_benign = 0;
  int label_malignant = 0;
  std::array<LabeledExample, 2> views;  // CC, MLO

  bool positive() const { return label_benign || label_malignant; }
};

struct SynthConfig {
  Index height = 128;
  Index width = 128;
  int n_train = 2000;
  int n_val = 400;
  int n_test = 400;
  double prevalence_benign = 0.12;
  double prevalence_malignant = 0.10;
  double benign_radius_min = 7;
  double benign_radius_max = 12;
  double malignant_radius_min = 7;
  double malignant_radius_max = 11;
  int noise_octaves = 4;
  /// Amplitude of the background texture inside the breast.
  double texture_contrast = 0.12;
  /// Half-width of the uniform per-pixel noise inside the breast.
  double pixel_noise = 0.06;
  /// Peak brightening of a benign blob.
  double benign_contrast = 0.19;
  /// Peak speckle amplitude of a malignant cluster.
  double malignant_contrast = 0.13;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

struct Dataset {
  std::vector<SynthExam> train;
  std::vector<SynthExam> val;
  std::vector<SynthExam> test;

  std::vector<SynthExam>& split(Split s) { return s == Split::train ? train : s == Split::val ? val : test; }
  const std::vector<SynthExam>& split(Split s) const {
    return s == Split::train ? train : s == Split::val ? val : test;
  }
};

/// One exam of a split. with_lesions = false renders the same exam with the
/// lesions left out (same background, labels and masks untouched).
SynthExam generate_exam(const SynthConfig& cfg, Split split, int index, bool with_lesions = true);

Dataset generate(const SynthConfig& cfg);

/// <dir>/<split>/index.csv plus images/ and masks/ PGMs.
void write_dataset(const Dataset& data, const std::filesystem::path& dir);
/// Reads the splits back; missing split directories come back empty.
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace gmic
