// Ranking and overlap metrics, breast-level averaging and score combiners.
#pragma once

#include "gmic/io.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmic {

/// Raised when a metric is undefined for its input (e.g. a single class).
struct MetricError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<int> group_ids;  // optional

  /// Throws MetricError on length mismatch or non-binary labels.
  void validate() const;
};

/// Mann-Whitney statistic: P(s_pos > s_neg) + P(tie) / 2.
double auc(const ScoredSet& s);
/// Average precision: sum over distinct descending thresholds of (R_i - R_{i-1}) P_i.
double prauc(const ScoredSet& s);

enum class DscMode { soft, hard };
/// pred and truth share dims; hard mode binarizes pred at pred >= threshold.
/// Throws MetricError when the ground truth is empty.
double dsc(const GridMap<double>& pred, const Mask& truth, DscMode mode, double threshold = 0.5);

/// Specificity at the largest threshold tau (positive iff score >= tau) whose
/// sensitivity is at least the target.
double sensitivity_matched_specificity(const ScoredSet& s, double target_sensitivity);

/// Mean of the two views; pairs by group id when both sets carry ids.
ScoredSet breast_level(const ScoredSet& cc, const ScoredSet& mlo);
double breast_level(double cc, double mlo);

std::vector<double> hybrid(const std::vector<double>& reader, const std::vector<double>& model, double lambda);

struct SweepPoint {
  double lambda = 0;
  double auc = 0;
  double prauc = 0;
};

struct HybridSweep {
  std::vector<SweepPoint> curve;
  double best_lambda = 0;  // first argmax of AUC
  double best_auc = 0;
};

/// lambda = 0, step, ..., 1 (endpoints always included).
HybridSweep hybrid_sweep(const std::vector<double>& reader, const std::vector<double>& model,
                         const std::vector<int>& labels, double step = 0.01);

std::vector<double> simplex_ensemble(const std::vector<std::vector<double>>& members, const std::vector<double>& weights);

struct SimplexSearch {
  std::vector<double> weights;
  double auc = 0;
};

/// Exhaustive grid over the simplex at the given step; first argmax in
/// lexicographic weight order wins ties.
SimplexSearch simplex_grid_search(const std::vector<std::vector<double>>& members, const std::vector<int>& labels,
                                  double step = 0.01);

/// Elementwise mean of member predictions.
std::vector<double> topk_ensemble(const std::vector<std::vector<double>>& members);

/// One row of a score file.
struct ScoreRow {
  std::string id;
  std::string view;
  int label_benign = 0;
  int label_malignant = 0;
  double score_benign = 0;
  double score_malignant = 0;
};

void write_scores(const std::filesystem::path& path, const std::vector<ScoreRow>& rows);
std::vector<ScoreRow> read_scores(const std::filesystem::path& path);

void write_sweep(const std::filesystem::path& path, const HybridSweep& sweep);

}  // namespace gmic
