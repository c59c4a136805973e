// Loss, Adam, class-balanced sampling, augmentation, inference and the
// training / random-search loops.
#pragma once

#include "gmic/checkpoint.hpp"
#include "gmic/evaluation.hpp"
#include "gmic/fusion.hpp"
#include "gmic/synthetic.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace gmic {

inline constexpr double kProbClamp = 1e-7;

/// -[y ln p + (1-y) ln(1-p)] with p clamped to [1e-7, 1-1e-7].
double bce(int y, double p);

/// Batch mean over images of the six BCE terms (three heads, two classes)
/// plus beta * L1 of both saliency channels. labels: [N,2].
template <typename Scalar>
Var<Scalar> total_loss(const ModelOutputs<Scalar>& out, const Tensor<Scalar>& labels, double beta);

// ---------------------------------------------------------------------------
// Adam

template <typename Scalar>
struct AdamState {
  std::vector<Tensor<Scalar>> m;
  std::vector<Tensor<Scalar>> v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update. Parameters without a gradient are treated
/// as having a zero gradient.
template <typename Scalar>
void adam_step(std::vector<Var<Scalar>>& params, AdamState<Scalar>& state, double learning_rate);

// ---------------------------------------------------------------------------
// Sampling and augmentation

/// All positives plus as many negatives (without replacement unless negatives
/// are scarcer), shuffled. Throws ConfigError when a class is empty.
std::vector<std::size_t> balanced_epoch_sampler(const std::vector<int>& positive, std::uint64_t seed);
std::vector<std::size_t> balanced_epoch_sampler(const std::vector<SynthExam>& exams, std::uint64_t seed);

struct AugmentConfig {
  double max_translation = 0.06;  // fraction of each dimension
  double max_scale = 0.05;        // scale drawn from [1 - s, 1 + s]
  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

enum class AugmentMode { train, tta };

struct AffineDraw {
  double shift_rows = 0;
  double shift_cols = 0;
  double scale = 1;
};

AffineDraw draw_affine(const AugmentConfig& cfg, Index height, Index width, std::mt19937_64& rng);

/// Nearest-neighbour resample about the image centre, edges replicated.
template <typename T>
GridMap<T> warp_nearest(const GridMap<T>& src, const AffineDraw& a);

struct Augmented {
  Image image;
  std::vector<Mask> masks;
};

/// Same transform for the image and every mask. Both modes draw from the same
/// distribution; the mode only selects the stream label.
Augmented augment(const Image& image, const std::vector<Mask>& masks, std::uint64_t seed, AugmentMode mode,
                  const AugmentConfig& cfg = {});

/// Counter-clockwise quarter turns of a square patch.
template <typename Scalar>
GridMap<Scalar> rotate_patch(const GridMap<Scalar>& patch, int quarter_turns);
/// In-place rotation of every [p,p] slice of a [K,1,p,p] tensor.
template <typename Scalar>
void rotate_patches(Tensor<Scalar>& patches, const std::vector<int>& quarter_turns);

// ---------------------------------------------------------------------------
// Inference

struct ImagePrediction {
  std::array<double, 2> y_global{};
  std::array<double, 2> y_local{};
  std::array<double, 2> y_fusion{};
  std::vector<double> alpha;
  std::vector<RoiWindow> windows;
  std::array<GridMap<double>, 2> saliency;  // only with keep_maps

  /// head: "global", "local", "fusion" or "average" (of global and local).
  double score(const std::string& head, int cls) const;
};

struct PredictOptions {
  int batch_size = 16;
  double pool_fraction = 0.05;
  AttentionMode attention = AttentionMode::gated;
  PatchSelection selection = PatchSelection::saliency;
  /// Number of test-time augmentations averaged; 0 disables TTA.
  int tta = 0;
  AugmentConfig augment;
  bool keep_maps = false;
  std::uint64_t seed = 0;
  int threads = 1;
};

template <typename Scalar>
std::vector<ImagePrediction> predict(GmicModel<Scalar>& model, const std::vector<const Image*>& images,
                                     const PredictOptions& options);

/// Every view of every exam, in exam order (CC then MLO).
std::vector<const LabeledExample*> flatten_views(const std::vector<SynthExam>& exams);

/// Breast-level (mean of two views) scores for one head and class.
ScoredSet breast_scores(const std::vector<SynthExam>& exams, const std::vector<ImagePrediction>& preds,
                        const std::string& head, int cls);

/// Mean DSC over views whose class mask is nonempty, with saliency maps
/// upsampled (nearest neighbour) by `factor`. Needs predictions made with
/// keep_maps. NaN when no view has a mask.
double mean_dsc(const std::vector<SynthExam>& exams, const std::vector<ImagePrediction>& preds, int cls,
                Index factor, DscMode mode, double threshold = 0.5);

struct DscThreshold {
  double threshold = 0.5;
  double dsc = 0;
};

/// Hard-DSC threshold maximizing mean_dsc over 0.02, 0.04, ..., 0.98 and
/// 0.99, 0.995, 0.998, 0.999 (first maximum wins).
DscThreshold select_dsc_threshold(const std::vector<SynthExam>& exams, const std::vector<ImagePrediction>& preds,
                                  int cls, Index factor);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 3e-4;
  double reg_weight = 1e-4;
  double pool_fraction = 0.05;
  int epochs = 30;
  int patience = 10;
  int batch_size = 8;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentConfig augmentation;
  bool rotate_patches = true;
  AttentionMode attention = AttentionMode::gated;
  PatchSelection selection = PatchSelection::saliency;
  int threads = 1;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double val_auc_malignant = 0;
  double val_auc_benign = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_score = -1;  // mean of the two validation AUCs
  StateDict best_state;
};

struct TrainOptions {
  /// When set: metrics.csv, best.ckpt and last.ckpt are written here.
  std::filesystem::path out_dir;
  /// Continue from out_dir/last.ckpt (epoch numbering continues).
  bool resume = false;
  /// Called after every epoch.
  std::function<void(const EpochLog&)> on_epoch;
};

/// Validation metric used to pick the best epoch.
double selection_score(const EpochLog& e);

/// Trains in place; on return the model holds the best-epoch weights.
/// Throws NumericError on a non-finite loss.
TrainResult train(GmicModel<float>& model, const Dataset& data, const TrainConfig& cfg,
                  const TrainOptions& options = {});

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log);

// ---------------------------------------------------------------------------
// Random search

struct SearchRanges {
  double log10_lr_min = -5.5;
  double log10_lr_max = -4.0;
  double log10_beta_min = -5.5;
  double log10_beta_max = -3.5;
  std::vector<double> pool_fractions{0.01, 0.03, 0.05, 0.10, 0.20};
};

struct TrialParams {
  int trial_id = 0;
  double learning_rate = 0;
  double reg_weight = 0;
  double pool_fraction = 0;
};

struct TrialResult {
  TrialParams params;
  double val_auc = 0;  // validation malignant AUC at the best epoch
  int best_epoch = 0;
  StateDict state;
};

std::vector<TrialParams> sample_trials(int n_trials, const SearchRanges& ranges, std::uint64_t seed);
/// Descending val_auc, ties by trial id.
void rank_trials(std::vector<TrialResult>& results);

/// Trains one model per sampled trial and returns them ranked.
std::vector<TrialResult> random_search(const Dataset& data, const NetworkConfig& net, const TrainConfig& base,
                                       int n_trials, const SearchRanges& ranges, std::uint64_t seed);

}  // namespace gmic
