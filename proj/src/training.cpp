#include "gmic/training.hpp"

#include "gmic/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <thread>

namespace gmic {

double bce(int y, double p) {
  p = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return -(y * std::log(p) + (1 - y) * std::log(1 - p));
}

template <typename Scalar>
Var<Scalar> total_loss(const ModelOutputs<Scalar>& out, const Tensor<Scalar>& labels, double beta) {
  if (labels.rank() != 2 || labels.dim(1) != 2 || labels.dim(0) != out.y_fusion.dim(0))
    throw DimensionError("total_loss: labels " + shape_string(labels.shape()) + " do not match predictions " +
                         shape_string(out.y_fusion.shape()));
  const Index N = labels.dim(0);
  Var<Scalar> loss = add(add(binary_cross_entropy(out.y_local, labels), binary_cross_entropy(out.y_global, labels)),
                         binary_cross_entropy(out.y_fusion, labels));
  if (beta != 0.0) loss = add(loss, scale(sum(out.saliency), static_cast<Scalar>(beta)));
  return N == 1 ? loss : scale(loss, Scalar(1) / static_cast<Scalar>(N));
}

template <typename Scalar>
void adam_step(std::vector<Var<Scalar>>& params, AdamState<Scalar>& state, double learning_rate) {
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.push_back(Tensor<Scalar>::zeros(p.shape()));
      state.v.push_back(Tensor<Scalar>::zeros(p.shape()));
    }
  }
  ++state.step;
  const Scalar b1 = static_cast<Scalar>(state.beta1), b2 = static_cast<Scalar>(state.beta2);
  const Scalar bc1 = static_cast<Scalar>(1.0 - std::pow(state.beta1, static_cast<double>(state.step)));
  const Scalar bc2 = static_cast<Scalar>(1.0 - std::pow(state.beta2, static_cast<double>(state.step)));
  const Scalar lr = static_cast<Scalar>(learning_rate), eps = static_cast<Scalar>(state.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i].array();
    auto& v = state.v[i].array();
    if (m.size() != params[i].value().size())
      throw DimensionError("adam_step: moment shape " + shape_string(state.m[i].shape()) + " does not match " +
                           shape_string(params[i].shape()));
    if (params[i].has_grad()) {
      const auto& g = params[i].grad().array();
      m = b1 * m + (Scalar(1) - b1) * g;
      v = b2 * v + (Scalar(1) - b2) * g * g;
    } else {
      m = b1 * m;
      v = b2 * v;
    }
    params[i].mutable_value().array() -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
  }
}

std::vector<std::size_t> balanced_epoch_sampler(const std::vector<int>& positive, std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < positive.size(); ++i) (positive[i] ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty())
    throw ConfigError("balanced_epoch_sampler: need at least one positive and one negative exam (got " +
                      std::to_string(pos.size()) + " / " + std::to_string(neg.size()) + ")");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out = pos;
  if (neg.size() >= pos.size()) {
    std::shuffle(neg.begin(), neg.end(), rng);
    out.insert(out.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(pos.size()));
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, neg.size() - 1);
    for (std::size_t i = 0; i < pos.size(); ++i) out.push_back(neg[pick(rng)]);
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

std::vector<std::size_t> balanced_epoch_sampler(const std::vector<SynthExam>& exams, std::uint64_t seed) {
  std::vector<int> positive;
  positive.reserve(exams.size());
  for (const auto& e : exams) positive.push_back(e.positive() ? 1 : 0);
  return balanced_epoch_sampler(positive, seed);
}

AffineDraw draw_affine(const AugmentConfig& cfg, Index height, Index width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  AffineDraw a;
  a.shift_rows = u(rng) * cfg.max_translation * static_cast<double>(height);
  a.shift_cols = u(rng) * cfg.max_translation * static_cast<double>(width);
  a.scale = 1.0 + u(rng) * cfg.max_scale;
  return a;
}

template <typename T>
GridMap<T> warp_nearest(const GridMap<T>& src, const AffineDraw& a) {
  const Index H = src.rows(), W = src.cols();
  const double cy = 0.5 * static_cast<double>(H - 1), cx = 0.5 * static_cast<double>(W - 1);
  GridMap<T> out(H, W);
  for (Index r = 0; r < H; ++r) {
    const double sr = cy + (static_cast<double>(r) - cy - a.shift_rows) / a.scale;
    const Index ir = std::clamp<Index>(std::lround(sr), 0, H - 1);
    for (Index c = 0; c < W; ++c) {
      const double sc = cx + (static_cast<double>(c) - cx - a.shift_cols) / a.scale;
      out(r, c) = src(ir, std::clamp<Index>(std::lround(sc), 0, W - 1));
    }
  }
  return out;
}

Augmented augment(const Image& image, const std::vector<Mask>& masks, std::uint64_t seed, AugmentMode mode,
                  const AugmentConfig& cfg) {
  std::mt19937_64 rng(derive_seed(seed, mode == AugmentMode::train ? "augment.train" : "augment.tta"));
  const AffineDraw a = draw_affine(cfg, image.rows(), image.cols(), rng);
  Augmented out;
  out.image = warp_nearest(image, a);
  for (const Mask& m : masks) {
    if (m.rows() != image.rows() || m.cols() != image.cols())
      throw DimensionError("augment: mask dims differ from the image");
    out.masks.push_back(warp_nearest(m, a));
  }
  return out;
}

template <typename Scalar>
GridMap<Scalar> rotate_patch(const GridMap<Scalar>& patch, int quarter_turns) {
  const Index p = patch.rows();
  if (patch.cols() != p)
    throw DimensionError("rotate_patch: patch must be square, got " + std::to_string(patch.rows()) + "x" +
                         std::to_string(patch.cols()));
  const int q = ((quarter_turns % 4) + 4) % 4;
  GridMap<Scalar> out(p, p);
  for (Index r = 0; r < p; ++r)
    for (Index c = 0; c < p; ++c) {
      switch (q) {
        case 0: out(r, c) = patch(r, c); break;
        case 1: out(r, c) = patch(c, p - 1 - r); break;
        case 2: out(r, c) = patch(p - 1 - r, p - 1 - c); break;
        default: out(r, c) = patch(p - 1 - c, r); break;
      }
    }
  return out;
}

template <typename Scalar>
void rotate_patches(Tensor<Scalar>& patches, const std::vector<int>& quarter_turns) {
  if (patches.rank() != 4 || patches.dim(1) != 1 || patches.dim(2) != patches.dim(3))
    throw DimensionError("rotate_patches: expected square [K,1,p,p] patches, got " + shape_string(patches.shape()));
  const Index K = patches.dim(0), p = patches.dim(2);
  if (static_cast<Index>(quarter_turns.size()) != K)
    throw DimensionError("rotate_patches: one rotation per patch required");
  for (Index k = 0; k < K; ++k) {
    Eigen::Map<GridMap<Scalar>> slice(patches.data() + k * p * p, p, p);
    const GridMap<Scalar> rotated = rotate_patch<Scalar>(slice, quarter_turns[static_cast<std::size_t>(k)]);
    slice = rotated;
  }
}

// ---------------------------------------------------------------------------

double ImagePrediction::score(const std::string& head, int cls) const {
  const auto c = static_cast<std::size_t>(cls);
  if (head == "fusion") return y_fusion[c];
  if (head == "global") return y_global[c];
  if (head == "local") return y_local[c];
  if (head == "average") return 0.5 * (y_global[c] + y_local[c]);
  throw ConfigError("unknown head '" + head + "' (expected global, local, average or fusion)");
}

namespace {

template <typename Scalar>
Tensor<Scalar> stack_images(const std::vector<const Image*>& images, std::size_t begin, std::size_t end) {
  const Index H = images[begin]->rows(), W = images[begin]->cols();
  Tensor<Scalar> out(Shape{static_cast<Index>(end - begin), 1, H, W});
  for (std::size_t i = begin; i < end; ++i) {
    if (images[i]->rows() != H || images[i]->cols() != W)
      throw DimensionError("images in one batch must share dimensions");
    out.array().segment(static_cast<Index>(i - begin) * H * W, H * W) =
        Eigen::Map<const ArrayX<float>>(images[i]->data(), H * W).template cast<Scalar>();
  }
  return out;
}

template <typename Scalar>
void run_batch(GmicModel<Scalar>& model, const std::vector<const Image*>& images, std::size_t begin, std::size_t end,
               const PredictOptions& opt, std::vector<ImagePrediction>& preds) {
  const std::size_t n = end - begin;
  const int draws = std::max(1, opt.tta);
  for (int t = 0; t < draws; ++t) {
    std::vector<Image> augmented;
    std::vector<const Image*> batch(images.begin() + static_cast<std::ptrdiff_t>(begin),
                                    images.begin() + static_cast<std::ptrdiff_t>(end));
    if (opt.tta > 0) {
      augmented.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t s = derive_seed(opt.seed, "tta", (begin + i) * 1024 + static_cast<std::size_t>(t));
        augmented.push_back(augment(*batch[i], {}, s, AugmentMode::tta, opt.augment).image);
      }
      for (std::size_t i = 0; i < n; ++i) batch[i] = &augmented[i];
    }
    std::mt19937_64 patch_rng(derive_seed(opt.seed, "predict.patches", begin * 1024 + static_cast<std::size_t>(t)));
    ForwardOptions<Scalar> fo;
    fo.mode = NormMode::eval;
    fo.pool_fraction = opt.pool_fraction;
    fo.attention = opt.attention;
    fo.selection = opt.selection;
    fo.rng = &patch_rng;
    const auto out = model.forward(stack_images<Scalar>(batch, 0, n), fo);
    const Index K = out.alpha.dim(1), h = out.saliency.dim(2), w = out.saliency.dim(3);
    // Running mean keeps a single draw (or identical draws) bit-exact.
    const double frac = 1.0 / static_cast<double>(t + 1);
    auto blend = [&](double& acc, double x) { acc = t == 0 ? x : acc + (x - acc) * frac; };
    for (std::size_t i = 0; i < n; ++i) {
      ImagePrediction& p = preds[begin + i];
      const Index r = static_cast<Index>(i);
      for (Index c = 0; c < 2; ++c) {
        blend(p.y_global[static_cast<std::size_t>(c)], static_cast<double>(out.y_global.value()[r * 2 + c]));
        blend(p.y_local[static_cast<std::size_t>(c)], static_cast<double>(out.y_local.value()[r * 2 + c]));
        blend(p.y_fusion[static_cast<std::size_t>(c)], static_cast<double>(out.y_fusion.value()[r * 2 + c]));
      }
      if (t == 0) {
        p.alpha.resize(static_cast<std::size_t>(K));
        p.windows = out.patchsets[i].windows;
      }
      for (Index k = 0; k < K; ++k)
        blend(p.alpha[static_cast<std::size_t>(k)], static_cast<double>(out.alpha.value()[r * K + k]));
      if (opt.keep_maps) {
        for (Index c = 0; c < 2; ++c) {
          Eigen::Map<const GridMap<Scalar>> m(out.saliency.value().data() + (r * 2 + c) * h * w, h, w);
          auto& acc = p.saliency[static_cast<std::size_t>(c)];
          if (t == 0)
            acc = m.template cast<double>();
          else
            acc += (m.template cast<double>() - acc) * frac;
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
std::vector<ImagePrediction> predict(GmicModel<Scalar>& model, const std::vector<const Image*>& images,
                                     const PredictOptions& opt) {
  if (opt.batch_size < 1) throw ConfigError("predict: batch_size must be positive");
  std::vector<ImagePrediction> preds(images.size());
  const std::size_t bs = static_cast<std::size_t>(opt.batch_size);
  const std::size_t batches = (images.size() + bs - 1) / bs;
  auto worker = [&](std::size_t first, std::size_t stride) {
    NoGradGuard no_grad;
    for (std::size_t b = first; b < batches; b += stride)
      run_batch(model, images, b * bs, std::min(images.size(), (b + 1) * bs), opt, preds);
  };
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, opt.threads)), batches);
  if (threads <= 1) {
    worker(0, 1);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        try {
          worker(t, threads);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return preds;
}

std::vector<const LabeledExample*> flatten_views(const std::vector<SynthExam>& exams) {
  std::vector<const LabeledExample*> out;
  out.reserve(exams.size() * 2);
  for (const auto& e : exams)
    for (const auto& v : e.views) out.push_back(&v);
  return out;
}

ScoredSet breast_scores(const std::vector<SynthExam>& exams, const std::vector<ImagePrediction>& preds,
                        const std::string& head, int cls) {
  if (preds.size() != exams.size() * 2)
    throw DimensionError("breast_scores: expected two predictions per exam");
  ScoredSet cc, mlo;
  for (std::size_t i = 0; i < exams.size(); ++i) {
    const int y = cls == 0 ? exams[i].label_benign : exams[i].label_malignant;
    cc.scores.push_back(preds[2 * i].score(head, cls));
    mlo.scores.push_back(preds[2 * i + 1].score(head, cls));
    cc.labels.push_back(y);
    mlo.labels.push_back(y);
    cc.group_ids.push_back(exams[i].breast_id);
    mlo.group_ids.push_back(exams[i].breast_id);
  }
  return breast_level(cc, mlo);
}

double mean_dsc(const std::vector<SynthExam>& exams, const std::vector<ImagePrediction>& preds, int cls,
                Index factor, DscMode mode, double threshold) {
  if (preds.size() != exams.size() * 2) throw DimensionError("mean_dsc: expected two predictions per exam");
  double total = 0;
  int counted = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const LabeledExample& ex = exams[i / 2].views[i % 2];
    const Mask& truth = ex.mask(cls);
    if (truth.size() == 0 || (truth != 0).count() == 0) continue;
    const GridMap<double>& map = preds[i].saliency[static_cast<std::size_t>(cls)];
    if (map.size() == 0) throw ConfigError("mean_dsc: predictions lack saliency maps (keep_maps)");
    total += dsc(upsample_nearest(map, factor), truth, mode, threshold);
    ++counted;
  }
  return counted ? total / counted : std::numeric_limits<double>::quiet_NaN();
}

DscThreshold select_dsc_threshold(const std::vector<SynthExam>& exams, const std::vector<ImagePrediction>& preds,
                                  int cls, Index factor) {
  std::vector<double> grid;
  for (int k = 1; k < 50; ++k) grid.push_back(0.02 * k);
  for (double t : {0.99, 0.995, 0.998, 0.999}) grid.push_back(t);
  DscThreshold best{0.5, -1.0};
  for (double t : grid) {
    const double d = mean_dsc(exams, preds, cls, factor, DscMode::hard, t);
    if (d > best.dsc) best = {t, d};
  }
  return best;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw ConfigError("TrainConfig." + field + ": " + why);
  };
  require(learning_rate > 0 && std::isfinite(learning_rate), "learning_rate", "must be positive");
  require(reg_weight >= 0 && std::isfinite(reg_weight), "reg_weight", "must be nonnegative");
  require(pool_fraction > 0 && pool_fraction <= 1, "pool_fraction", "must lie in (0,1]");
  require(epochs >= 1, "epochs", "must be at least 1");
  require(patience >= 1, "patience", "must be at least 1");
  require(batch_size >= 2 && batch_size % 2 == 0, "batch_size", "must be an even number >= 2 (two views per exam)");
  require(augmentation.max_translation >= 0 && augmentation.max_translation < 0.5, "augmentation.max_translation",
          "must lie in [0,0.5)");
  require(augmentation.max_scale >= 0 && augmentation.max_scale < 0.5, "augmentation.max_scale",
          "must lie in [0,0.5)");
  require(threads >= 1, "threads", "must be at least 1");
}

double selection_score(const EpochLog& e) {
  const double s = 0.5 * (e.val_auc_malignant + e.val_auc_benign);
  return std::isfinite(s) ? s : -1.0;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,train_loss,val_auc_malignant,val_auc_benign\n" << std::setprecision(17);
  for (const auto& e : log)
    out << e.epoch << ',' << e.train_loss << ',' << e.val_auc_malignant << ',' << e.val_auc_benign << '\n';
}

namespace {

std::vector<EpochLog> read_metrics_csv(const std::filesystem::path& path) {
  std::vector<EpochLog> log;
  if (!std::filesystem::exists(path)) return log;
  const CsvTable t = read_csv(path);
  const auto ce = t.column("epoch"), cl = t.column("train_loss"), cm = t.column("val_auc_malignant"),
             cb = t.column("val_auc_benign");
  for (const auto& r : t.rows) log.push_back({std::stoi(r[ce]), std::stod(r[cl]), std::stod(r[cm]), std::stod(r[cb])});
  return log;
}

double safe_auc(const ScoredSet& s) {
  try {
    return auc(s);
  } catch (const MetricError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

Tensor<float> scalar_entry(double v) { return Tensor<float>(Shape{1}, static_cast<float>(v)); }

}  // namespace

TrainResult train(GmicModel<float>& model, const Dataset& data, const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("train: training split is empty");
  if (data.val.empty()) throw ConfigError("train: validation split is empty");
  const NetworkConfig& net = model.config();
  for (const auto* split : {&data.train, &data.val})
    for (const auto& e : *split)
      for (const auto& v : e.views)
        if (v.image.rows() != net.input_height || v.image.cols() != net.input_width)
          throw ConfigError("train: images are " + std::to_string(v.image.rows()) + "x" +
                            std::to_string(v.image.cols()) + " but the network expects " +
                            std::to_string(net.input_height) + "x" + std::to_string(net.input_width));

  NamedParameters<float> named = model.named_parameters();
  std::vector<Var<float>> params;
  for (auto& [name, p] : named.parameters) params.push_back(p);
  AdamState<float> adam;

  TrainResult result;
  int start_epoch = 1;
  const bool write = !options.out_dir.empty();
  const auto last_path = options.out_dir / "last.ckpt";
  const auto best_path = options.out_dir / "best.ckpt";
  const auto metrics_path = options.out_dir / "metrics.csv";

  if (options.resume) {
    if (!write) throw ConfigError("train: resume needs an output directory");
    const StateDict last = read_checkpoint(last_path);
    load_state_dict(named, last);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& name = named.parameters[i].first;
      const auto* m = find_entry(last, "adam.m." + name);
      const auto* v = find_entry(last, "adam.v." + name);
      if (!m || !v) throw ConfigError("checkpoint " + last_path.string() + " lacks optimizer state for " + name);
      adam.m.push_back(*m);
      adam.v.push_back(*v);
    }
    auto meta = [&](const std::string& key) {
      const auto* t = find_entry(last, key);
      if (!t) throw ConfigError("checkpoint " + last_path.string() + " lacks '" + key + "'");
      return static_cast<double>((*t)[0]);
    };
    adam.step = static_cast<long>(meta("train.adam_step"));
    start_epoch = static_cast<int>(meta("train.epoch")) + 1;
    result.best_epoch = static_cast<int>(meta("train.best_epoch"));
    result.log = read_metrics_csv(metrics_path);
    result.log.resize(static_cast<std::size_t>(start_epoch - 1));
    result.best_score = -1;
    for (const auto& e : result.log)
      if (e.epoch == result.best_epoch) result.best_score = selection_score(e);
    if (result.best_epoch > 0) result.best_state = read_checkpoint(best_path);
  }

  const Index H = net.input_height, W = net.input_width;
  const auto val_views = flatten_views(data.val);
  std::vector<const Image*> val_images;
  for (const auto* v : val_views) val_images.push_back(&v->image);

  for (int epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
    if (result.best_epoch > 0 && epoch - result.best_epoch > cfg.patience) break;
    const auto order = balanced_epoch_sampler(data.train, derive_seed(cfg.seed, "sampler", static_cast<std::uint64_t>(epoch)));
    std::vector<const LabeledExample*> views;
    for (std::size_t idx : order)
      for (const auto& v : data.train[idx].views) views.push_back(&v);

    std::mt19937_64 rotate_rng(derive_seed(cfg.seed, "rotate", static_cast<std::uint64_t>(epoch)));
    std::mt19937_64 patch_rng(derive_seed(cfg.seed, "patches", static_cast<std::uint64_t>(epoch)));
    const std::uint64_t aug_seed = derive_seed(cfg.seed, "augment", static_cast<std::uint64_t>(epoch));
    ForwardOptions<float> fo;
    fo.mode = NormMode::train;
    fo.pool_fraction = cfg.pool_fraction;
    fo.attention = cfg.attention;
    fo.selection = cfg.selection;
    fo.rng = &patch_rng;
    if (cfg.rotate_patches)
      fo.patch_transform = [&](Tensor<float>& patches) {
        std::uniform_int_distribution<int> turns(0, 3);
        std::vector<int> q(static_cast<std::size_t>(patches.dim(0)));
        for (int& x : q) x = turns(rotate_rng);
        rotate_patches(patches, q);
      };

    double loss_sum = 0;
    std::size_t seen = 0;
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    for (std::size_t begin = 0; begin + 1 < views.size(); begin += bs) {
      const std::size_t end = std::min(views.size(), begin + bs);
      const Index n = static_cast<Index>(end - begin);
      Tensor<float> images(Shape{n, 1, H, W});
      Tensor<float> labels(Shape{n, 2});
      for (std::size_t i = begin; i < end; ++i) {
        const Index r = static_cast<Index>(i - begin);
        const LabeledExample& ex = *views[i];
        const Image img =
            cfg.augment ? augment(ex.image, {}, derive_seed(aug_seed, "image", i), AugmentMode::train, cfg.augmentation).image
                        : ex.image;
        images.array().segment(r * H * W, H * W) = Eigen::Map<const ArrayX<float>>(img.data(), H * W);
        labels[r * 2] = static_cast<float>(ex.label_benign);
        labels[r * 2 + 1] = static_cast<float>(ex.label_malignant);
      }
      const auto out = model.forward(images, fo);
      const Var<float> loss = total_loss(out, labels, cfg.reg_weight);
      const double value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite loss " << value << " at epoch " << epoch << ", batch " << begin / bs
            << " (learning_rate " << cfg.learning_rate << ", reg_weight " << cfg.reg_weight << ")";
        throw NumericError(msg.str());
      }
      model.zero_grad();
      backward(loss);
      adam_step(params, adam, cfg.learning_rate);
      loss_sum += value * static_cast<double>(n);
      seen += static_cast<std::size_t>(n);
    }

    PredictOptions po;
    po.pool_fraction = cfg.pool_fraction;
    po.attention = cfg.attention;
    po.selection = cfg.selection;
    po.seed = derive_seed(cfg.seed, "validation");
    po.threads = cfg.threads;
    const auto preds = predict(model, val_images, po);
    EpochLog entry{epoch, loss_sum / static_cast<double>(std::max<std::size_t>(1, seen)),
                   safe_auc(breast_scores(data.val, preds, "fusion", 1)),
                   safe_auc(breast_scores(data.val, preds, "fusion", 0))};
    result.log.push_back(entry);

    const double score = selection_score(entry);
    const bool improved = score > result.best_score;
    if (improved) {
      result.best_score = score;
      result.best_epoch = epoch;
      result.best_state = state_dict(named);
    }
    if (write) {
      write_metrics_csv(metrics_path, result.log);
      if (improved) write_checkpoint(best_path, result.best_state);
      StateDict last = state_dict(named);
      for (std::size_t i = 0; i < params.size(); ++i) {
        last.emplace_back("adam.m." + named.parameters[i].first, adam.m[i]);
        last.emplace_back("adam.v." + named.parameters[i].first, adam.v[i]);
      }
      last.emplace_back("train.epoch", scalar_entry(epoch));
      last.emplace_back("train.best_epoch", scalar_entry(result.best_epoch));
      last.emplace_back("train.adam_step", scalar_entry(static_cast<double>(adam.step)));
      write_checkpoint(last_path, last);
    }
    if (options.on_epoch) options.on_epoch(entry);
  }

  if (!result.best_state.empty()) load_state_dict(named, result.best_state);
  return result;
}

// ---------------------------------------------------------------------------

std::vector<TrialParams> sample_trials(int n_trials, const SearchRanges& ranges, std::uint64_t seed) {
  if (n_trials < 1) throw ConfigError("random_search: n_trials must be at least 1");
  if (ranges.pool_fractions.empty()) throw ConfigError("random_search: pool_fractions is empty");
  if (ranges.log10_lr_min > ranges.log10_lr_max || ranges.log10_beta_min > ranges.log10_beta_max)
    throw ConfigError("random_search: range minimum exceeds maximum");
  std::mt19937_64 rng(derive_seed(seed, "search"));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, ranges.pool_fractions.size() - 1);
  std::vector<TrialParams> out;
  for (int i = 0; i < n_trials; ++i) {
    TrialParams p;
    p.trial_id = i;
    p.learning_rate =
        std::pow(10.0, ranges.log10_lr_min + (ranges.log10_lr_max - ranges.log10_lr_min) * u01(rng));
    p.reg_weight =
        std::pow(10.0, ranges.log10_beta_min + (ranges.log10_beta_max - ranges.log10_beta_min) * u01(rng));
    p.pool_fraction = ranges.pool_fractions[pick(rng)];
    out.push_back(p);
  }
  return out;
}

void rank_trials(std::vector<TrialResult>& results) {
  std::stable_sort(results.begin(), results.end(), [](const TrialResult& a, const TrialResult& b) {
    const double x = std::isfinite(a.val_auc) ? a.val_auc : -1.0, y = std::isfinite(b.val_auc) ? b.val_auc : -1.0;
    if (x != y) return x > y;
    return a.params.trial_id < b.params.trial_id;
  });
}

std::vector<TrialResult> random_search(const Dataset& data, const NetworkConfig& net, const TrainConfig& base,
                                       int n_trials, const SearchRanges& ranges, std::uint64_t seed) {
  std::vector<TrialResult> results;
  for (const TrialParams& p : sample_trials(n_trials, ranges, seed)) {
    TrainConfig cfg = base;
    cfg.learning_rate = p.learning_rate;
    cfg.reg_weight = p.reg_weight;
    cfg.pool_fraction = p.pool_fraction;
    cfg.seed = derive_seed(seed, "trial", static_cast<std::uint64_t>(p.trial_id));
    GmicModel<float> model(net, derive_seed(cfg.seed, "init"));
    TrainResult r = train(model, data, cfg);
    TrialResult t;
    t.params = p;
    t.best_epoch = r.best_epoch;
    t.val_auc = std::numeric_limits<double>::quiet_NaN();
    for (const auto& e : r.log)
      if (e.epoch == r.best_epoch) t.val_auc = e.val_auc_malignant;
    t.state = std::move(r.best_state);
    results.push_back(std::move(t));
  }
  rank_trials(results);
  return results;
}

#define GMIC_INSTANTIATE_TRAINING(T)                                                                   \
  template Var<T> total_loss(const ModelOutputs<T>&, const Tensor<T>&, double);                        \
  template void adam_step(std::vector<Var<T>>&, AdamState<T>&, double);                                \
  template GridMap<T> rotate_patch(const GridMap<T>&, int);                                            \
  template void rotate_patches(Tensor<T>&, const std::vector<int>&);                                   \
  template std::vector<ImagePrediction> predict(GmicModel<T>&, const std::vector<const Image*>&,       \
                                                const PredictOptions&);

GMIC_INSTANTIATE_TRAINING(float)
GMIC_INSTANTIATE_TRAINING(double)

template GridMap<float> warp_nearest(const GridMap<float>&, const AffineDraw&);
template GridMap<std::uint8_t> warp_nearest(const GridMap<std::uint8_t>&, const AffineDraw&);

}  // namespace gmic
