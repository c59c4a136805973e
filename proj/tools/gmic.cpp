// gmic: generate synthetic exams, train, sweep, evaluate and visualize.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric failure, 1 other.

#include "gmic/config.hpp"
#include "gmic/platform.hpp"
#include "gmic/random.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <memory>

namespace fs = std::filesystem;
using namespace gmic;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

const std::vector<std::string> kHeads{"global", "local", "average", "fusion"};
const char* kClassNames[2] = {"benign", "malignant"};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool print_config = false;
};

RunConfig resolve(const Common& common, Json doc = Json::object()) {
  if (!common.config_path.empty()) doc = read_json(common.config_path);
  for (const std::string& kv : common.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set: expected key=value, got '" + kv + "'");
    apply_override(doc, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (common.seed) {
    apply_override(doc, "train.seed", std::to_string(*common.seed));
    apply_override(doc, "synth.seed", std::to_string(*common.seed));
  }
  if (common.threads) apply_override(doc, "train.threads", std::to_string(*common.threads));
  return run_config_from_json(doc);
}

// ---------------------------------------------------------------------------
// Checkpoints and their config sidecars

fs::path sidecar(const fs::path& ckpt) { return fs::path(ckpt.string() + ".json"); }

void write_sidecar(const fs::path& ckpt, const RunConfig& cfg) { write_json(sidecar(ckpt), to_json(cfg)); }

RunConfig checkpoint_config(const fs::path& ckpt, const Common& common) {
  if (!fs::exists(ckpt)) throw ConfigError("checkpoint '" + ckpt.string() + "' does not exist");
  Json doc = Json::object();
  if (fs::exists(sidecar(ckpt)))
    doc = read_json(sidecar(ckpt));
  else if (common.config_path.empty())
    throw ConfigError("checkpoint '" + ckpt.string() + "' has no " + sidecar(ckpt).filename().string() +
                      "; pass --config");
  return resolve(common, doc);
}

std::unique_ptr<GmicModel<float>> load_model(const fs::path& ckpt, const RunConfig& cfg) {
  auto model = std::make_unique<GmicModel<float>>(cfg.network, derive_seed(cfg.train.seed, "init"));
  auto params = model->named_parameters();
  load_state_dict(params, read_checkpoint(ckpt));
  return model;
}

PredictOptions predict_options(const RunConfig& cfg, int tta, bool keep_maps) {
  PredictOptions po;
  po.pool_fraction = cfg.train.pool_fraction;
  po.attention = cfg.train.attention;
  po.selection = cfg.train.selection;
  po.tta = tta;
  po.augment = cfg.train.augmentation;
  po.keep_maps = keep_maps;
  po.seed = derive_seed(cfg.train.seed, "eval");
  po.threads = cfg.train.threads;
  return po;
}

std::vector<const Image*> images_of(const std::vector<const LabeledExample*>& views) {
  std::vector<const Image*> out;
  for (const auto* v : views) out.push_back(&v->image);
  return out;
}

void check_dims(const Dataset& data, const NetworkConfig& net) {
  for (const auto* split : {&data.train, &data.val, &data.test})
    for (const auto& exam : *split)
      for (const auto& v : exam.views)
        if (v.image.rows() != net.input_height || v.image.cols() != net.input_width)
          throw ConfigError("network.input_height/input_width: dataset images are " +
                            std::to_string(v.image.rows()) + "x" + std::to_string(v.image.cols()) +
                            " but the network expects " + std::to_string(net.input_height) + "x" +
                            std::to_string(net.input_width));
}

Dataset load_data(const std::string& dir, const NetworkConfig& net) {
  Dataset data = read_dataset(dir);
  check_dims(data, net);
  return data;
}

// ---------------------------------------------------------------------------
// Metrics

Json head_metrics(const std::vector<SynthExam>& exams, const std::vector<ImagePrediction>& preds) {
  Json out;
  const auto views = flatten_views(exams);
  for (const std::string& head : kHeads) {
    Json h;
    for (int cls = 0; cls < 2; ++cls) {
      ScoredSet image;
      for (std::size_t i = 0; i < views.size(); ++i) {
        image.scores.push_back(preds[i].score(head, cls));
        image.labels.push_back(views[i]->label(cls));
      }
      const ScoredSet breast = breast_scores(exams, preds, head, cls);
      auto safe = [](auto&& f) -> Json {
        try {
          return f();
        } catch (const MetricError&) {
          return nullptr;  // single-class split
        }
      };
      h[kClassNames[cls]] = {{"auc", safe([&] { return auc(image); })},
                             {"prauc", safe([&] { return prauc(image); })},
                             {"breast_auc", safe([&] { return auc(breast); })},
                             {"breast_prauc", safe([&] { return prauc(breast); })}};
    }
    out[head] = h;
  }
  return out;
}

std::vector<ImagePrediction> average_predictions(const std::vector<std::vector<ImagePrediction>>& members) {
  std::vector<ImagePrediction> out = members.front();
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      std::vector<std::vector<double>> g, l, f;
      for (const auto& m : members) {
        g.push_back({m[i].y_global[c]});
        l.push_back({m[i].y_local[c]});
        f.push_back({m[i].y_fusion[c]});
      }
      out[i].y_global[c] = topk_ensemble(g)[0];
      out[i].y_local[c] = topk_ensemble(l)[0];
      out[i].y_fusion[c] = topk_ensemble(f)[0];
    }
  return out;
}

std::vector<ScoreRow> score_rows(const std::vector<SynthExam>& exams, const std::vector<ImagePrediction>& preds,
                                 const std::string& head) {
  std::vector<ScoreRow> rows;
  const auto views = flatten_views(exams);
  for (std::size_t i = 0; i < views.size(); ++i)
    rows.push_back({std::to_string(exams[i / 2].exam_id), to_string(views[i]->view), views[i]->label_benign,
                    views[i]->label_malignant, preds[i].score(head, 0), preds[i].score(head, 1)});
  return rows;
}

std::string row_key(const ScoreRow& r) { return r.id + "/" + r.view; }

// Aligns score files on (id, view) in the order of the first file.
void align(const std::vector<std::vector<ScoreRow>>& files, int cls, std::vector<std::vector<double>>& members,
           std::vector<int>& labels) {
  members.assign(files.size(), {});
  labels.clear();
  std::vector<std::map<std::string, const ScoreRow*>> index(files.size());
  for (std::size_t f = 0; f < files.size(); ++f)
    for (const auto& r : files[f]) index[f][row_key(r)] = &r;
  for (const auto& r : files.front()) {
    labels.push_back(cls == 0 ? r.label_benign : r.label_malignant);
    for (std::size_t f = 0; f < files.size(); ++f) {
      auto it = index[f].find(row_key(r));
      if (it == index[f].end()) throw ConfigError("score file " + std::to_string(f) + " has no row for " + row_key(r));
      members[f].push_back(cls == 0 ? it->second->score_benign : it->second->score_malignant);
    }
  }
}

// ---------------------------------------------------------------------------
// Commands

int cmd_generate(const Common& common, const std::string& out) {
  const RunConfig cfg = resolve(common);
  const Dataset data = generate(cfg.synth);
  write_dataset(data, out);
  write_json(fs::path(out) / "config.json", to_json(cfg.synth));
  std::cout << "wrote " << data.train.size() << "/" << data.val.size() << "/" << data.test.size()
            << " train/val/test exams to " << out << "\n";
  return 0;
}

int cmd_train(const Common& common, const std::string& data_dir, const std::string& out, bool resume) {
  const RunConfig cfg = resolve(common);
  const Dataset data = load_data(data_dir, cfg.network);
  GmicModel<float> model(cfg.network, derive_seed(cfg.train.seed, "init"));
  fs::create_directories(out);
  write_json(fs::path(out) / "config.json", to_json(cfg));
  TrainOptions opt;
  opt.out_dir = out;
  opt.resume = resume;
  opt.on_epoch = [](const EpochLog& e) {
    std::cout << "epoch " << e.epoch << " loss " << e.train_loss << " val_auc_m " << e.val_auc_malignant
              << " val_auc_b " << e.val_auc_benign << std::endl;
  };
  const TrainResult r = train(model, data, cfg.train, opt);
  write_sidecar(fs::path(out) / "best.ckpt", cfg);
  write_sidecar(fs::path(out) / "last.ckpt", cfg);
  std::cout << "best epoch " << r.best_epoch << " (score " << r.best_score << ")\n";
  return 0;
}

int cmd_sweep(const Common& common, const std::string& data_dir, const std::string& out, int trials, int keep) {
  const RunConfig cfg = resolve(common);
  const Dataset data = load_data(data_dir, cfg.network);
  const auto results = random_search(data, cfg.network, cfg.train, trials, SearchRanges{}, cfg.train.seed);
  fs::create_directories(out);
  Json arr = Json::array();
  for (std::size_t rank = 0; rank < results.size(); ++rank) {
    const TrialResult& t = results[rank];
    Json row = {{"trial_id", t.params.trial_id},
                {"learning_rate", t.params.learning_rate},
                {"reg_weight", t.params.reg_weight},
                {"pool_fraction", t.params.pool_fraction},
                {"val_auc", std::isfinite(t.val_auc) ? Json(t.val_auc) : Json(nullptr)},
                {"best_epoch", t.best_epoch},
                {"rank", rank + 1}};
    if (static_cast<int>(rank) < keep) {
      const std::string name = "top" + std::to_string(rank + 1) + ".ckpt";
      write_checkpoint(fs::path(out) / name, t.state);
      RunConfig trial_cfg = cfg;
      trial_cfg.train.learning_rate = t.params.learning_rate;
      trial_cfg.train.reg_weight = t.params.reg_weight;
      trial_cfg.train.pool_fraction = t.params.pool_fraction;
      write_sidecar(fs::path(out) / name, trial_cfg);
      row["checkpoint"] = name;
    }
    arr.push_back(row);
  }
  write_json(fs::path(out) / "trials.json", arr);
  std::cout << "ran " << results.size() << " trials; best val AUC " << results.front().val_auc << "\n";
  return 0;
}

struct EvalArgs {
  std::vector<std::string> checkpoints;
  std::string data_dir;
  std::string split = "test";
  int tta = 0;
  bool ensemble = false;
  bool dsc = false;
  std::string hybrid_reader;
  std::vector<std::string> simplex;
  double simplex_step = 0.01;
  std::string report = "report.json";
  std::string scores_dir;
  std::string head = "fusion";
};

int cmd_eval(const Common& common, const EvalArgs& a) {
  Json report;
  if (std::find(kHeads.begin(), kHeads.end(), a.head) == kHeads.end())
    throw ConfigError("--head: unknown head '" + a.head + "'");
  if (a.checkpoints.empty() && a.simplex.empty())
    throw ConfigError("eval: give at least one --checkpoint or --simplex score file");
  if (a.ensemble && a.checkpoints.empty()) throw ConfigError("--ensemble: needs checkpoints");

  std::vector<std::vector<ImagePrediction>> member_preds;
  std::vector<ImagePrediction> final_preds;
  Dataset data;
  Split split = Split::test;
  if (!a.checkpoints.empty()) {
    if (a.data_dir.empty()) throw ConfigError("--data: required with --checkpoint");
    if (a.split == "val")
      split = Split::val;
    else if (a.split == "train")
      split = Split::train;
    else if (a.split != "test")
      throw ConfigError("--split: expected train, val or test");

    std::vector<RunConfig> cfgs;
    for (const auto& ck : a.checkpoints) cfgs.push_back(checkpoint_config(ck, common));
    data = load_data(a.data_dir, cfgs.front().network);
    const auto& exams = data.split(split);
    if (exams.empty()) throw ConfigError("--split: split '" + a.split + "' is empty");
    const auto views = flatten_views(exams);
    Json models = Json::array();
    std::vector<std::vector<ImagePrediction>> val_preds;
    for (std::size_t m = 0; m < a.checkpoints.size(); ++m) {
      if (!(cfgs[m].network == cfgs.front().network)) throw ConfigError("--checkpoint: network configs differ");
      auto model = load_model(a.checkpoints[m], cfgs[m]);
      const PredictOptions po = predict_options(cfgs[m], a.tta, a.dsc);
      member_preds.push_back(predict(*model, images_of(views), po));
      if (a.dsc && !data.val.empty()) val_preds.push_back(predict(*model, images_of(flatten_views(data.val)), po));
      models.push_back({{"checkpoint", a.checkpoints[m]}, {"metrics", head_metrics(exams, member_preds.back())}});
      if (!a.scores_dir.empty())
        write_scores(fs::path(a.scores_dir) / ("scores_" + std::to_string(m) + ".csv"),
                     score_rows(exams, member_preds.back(), a.head));
    }
    report["split"] = a.split;
    report["tta"] = a.tta;
    report["models"] = models;
    final_preds = member_preds.front();
    if (a.ensemble) {
      final_preds = average_predictions(member_preds);
      report["ensemble"] = {{"members", a.checkpoints.size()}, {"metrics", head_metrics(exams, final_preds)}};
      if (!a.scores_dir.empty())
        write_scores(fs::path(a.scores_dir) / "scores_ensemble.csv", score_rows(exams, final_preds, a.head));
    }
    if (a.dsc) {
      // Saliency maps of the first model; threshold picked on validation.
      const Index factor = cfgs.front().network.downsample_factor;
      Json d;
      for (int cls = 0; cls < 2; ++cls) {
        DscThreshold th{0.5, std::nan("")};
        if (!val_preds.empty()) th = select_dsc_threshold(data.val, val_preds.front(), cls, factor);
        const double hard = mean_dsc(exams, member_preds.front(), cls, factor, DscMode::hard, th.threshold);
        const double soft = mean_dsc(exams, member_preds.front(), cls, factor, DscMode::soft);
        auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
        d[kClassNames[cls]] = {{"hard", num(hard)}, {"soft", num(soft)}, {"threshold", th.threshold}};
      }
      report["dsc"] = d;
    }
  }

  if (!a.hybrid_reader.empty()) {
    if (final_preds.empty()) throw ConfigError("--hybrid: needs checkpoints to score");
    const auto reader = read_scores(a.hybrid_reader);
    const auto model_rows = score_rows(data.split(split), final_preds, a.head);
    Json h;
    for (int cls = 0; cls < 2; ++cls) {
      std::vector<std::vector<double>> members;
      std::vector<int> labels;
      align({model_rows, reader}, cls, members, labels);
      const HybridSweep sweep = hybrid_sweep(members[1], members[0], labels);
      const fs::path csv = fs::path(a.report).parent_path() / (std::string("hybrid_") + kClassNames[cls] + ".csv");
      write_sweep(csv, sweep);
      h[kClassNames[cls]] = {{"best_lambda", sweep.best_lambda},
                             {"best_auc", sweep.best_auc},
                             {"reader_auc", sweep.curve.back().auc},
                             {"model_auc", sweep.curve.front().auc},
                             {"curve", csv.string()}};
    }
    report["hybrid"] = h;
  }

  if (!a.simplex.empty()) {
    if (a.simplex.size() < 2) throw ConfigError("--simplex: needs at least two score files");
    std::vector<std::vector<ScoreRow>> files;
    for (const auto& f : a.simplex) files.push_back(read_scores(f));
    Json s;
    for (int cls = 0; cls < 2; ++cls) {
      std::vector<std::vector<double>> members;
      std::vector<int> labels;
      align(files, cls, members, labels);
      const SimplexSearch best = simplex_grid_search(members, labels, a.simplex_step);
      s[kClassNames[cls]] = {{"weights", best.weights}, {"auc", best.auc}};
    }
    s["files"] = a.simplex;
    report["simplex"] = s;
  }

  write_json(a.report, report);
  std::cout << report.dump(2) << "\n";
  return 0;
}

// Draws a one-pixel frame (white) around every window.
Image overlay(const Image& image, const std::vector<RoiWindow>& windows, Index patch) {
  Image out = image;
  for (const auto& w : windows)
    for (Index i = 0; i < patch; ++i) {
      out(w.pixel_row, w.pixel_col + i) = 1.0f;
      out(w.pixel_row + patch - 1, w.pixel_col + i) = 1.0f;
      out(w.pixel_row + i, w.pixel_col) = 1.0f;
      out(w.pixel_row + i, w.pixel_col + patch - 1) = 1.0f;
    }
  return out;
}

int cmd_viz(const Common& common, const std::string& ckpt, const std::string& image_path, const std::string& out) {
  const RunConfig cfg = checkpoint_config(ckpt, common);
  const Image image = read_pgm(image_path);
  if (image.rows() != cfg.network.input_height || image.cols() != cfg.network.input_width)
    throw ConfigError("--image: expected " + std::to_string(cfg.network.input_height) + "x" +
                      std::to_string(cfg.network.input_width) + " pixels, got " + std::to_string(image.rows()) + "x" +
                      std::to_string(image.cols()));
  auto model = load_model(ckpt, cfg);
  const ImagePrediction p = predict(*model, {&image}, predict_options(cfg, 0, true)).front();
  const Index P = cfg.network.patch_size, D = cfg.network.downsample_factor;
  const fs::path dir(out);
  fs::create_directories(dir);
  write_pgm(dir / "overlay.pgm", overlay(image, p.windows, P));
  for (int cls = 0; cls < 2; ++cls)
    write_pgm(dir / (std::string("saliency_") + kClassNames[cls] + ".pgm"),
              Image(upsample_nearest(p.saliency[static_cast<std::size_t>(cls)], D).cast<float>()));
  Json patches = Json::array();
  double alpha_sum = 0;
  for (std::size_t k = 0; k < p.windows.size(); ++k) {
    const auto& w = p.windows[k];
    const std::string name = "patch_" + std::to_string(k) + ".pgm";
    write_pgm(dir / name, Image(image.block(w.pixel_row, w.pixel_col, P, P)));
    patches.push_back({{"file", name},
                       {"row", w.pixel_row},
                       {"col", w.pixel_col},
                       {"criterion", w.criterion_value},
                       {"alpha", p.alpha[k]}});
    alpha_sum += p.alpha[k];
  }
  Json j = {{"image", image_path},
            {"checkpoint", ckpt},
            {"y_global", p.y_global},
            {"y_local", p.y_local},
            {"y_fusion", p.y_fusion},
            {"alpha_sum", alpha_sum},
            {"patches", patches}};
  write_json(dir / "viz.json", j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"GMIC on synthetic mammogram-like exams"};
  app.require_subcommand(0, 1);
  Common common;
  app.add_option("--config", common.config_path, "JSON config file");
  app.add_option("--set", common.overrides, "Override a config key, e.g. --set train.epochs=5")->take_all();
  app.add_option("--seed", common.seed, "Seed for data generation and training");
  app.add_option("--threads", common.threads, "Worker threads for inference");
  app.add_flag("--print-config", common.print_config, "Print the resolved config and exit");

  std::string out, data_dir, ckpt, image_path;
  bool resume = false;
  int trials = 30, keep = 5;
  EvalArgs ev;

  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  gen->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train one model");
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_option("--out", out, "Run directory")->required();
  tr->add_flag("--resume", resume, "Continue from <out>/last.ckpt");

  auto* sw = app.add_subcommand("sweep", "Random hyperparameter search");
  sw->add_option("--data", data_dir, "Dataset directory")->required();
  sw->add_option("--out", out, "Output directory")->required();
  sw->add_option("--trials", trials, "Number of trials")->check(CLI::PositiveNumber);
  sw->add_option("--keep", keep, "Checkpoints kept (best first)")->check(CLI::NonNegativeNumber);

  auto* evc = app.add_subcommand("eval", "Evaluate checkpoints and combiners");
  evc->add_option("--checkpoint", ev.checkpoints, "Checkpoint file (repeatable)");
  evc->add_option("--data", ev.data_dir, "Dataset directory");
  evc->add_option("--split", ev.split, "train, val or test");
  evc->add_option("--tta", ev.tta, "Test-time augmentations per image (0 = off)")->check(CLI::NonNegativeNumber);
  evc->add_flag("--ensemble", ev.ensemble, "Also report the mean of all checkpoints");
  evc->add_flag("--dsc", ev.dsc, "Report saliency DSC against the planted masks");
  evc->add_option("--hybrid", ev.hybrid_reader, "Reader score CSV for the hybrid sweep");
  evc->add_option("--simplex", ev.simplex, "Score CSVs for the simplex ensemble search")->take_all();
  evc->add_option("--simplex-step", ev.simplex_step, "Simplex grid step");
  evc->add_option("--head", ev.head, "Head written to score files and used by --hybrid");
  evc->add_option("--report", ev.report, "JSON report path");
  evc->add_option("--scores-out", ev.scores_dir, "Directory for per-model score CSVs");

  auto* viz = app.add_subcommand("viz", "Saliency maps, ROI patches and attention for one image");
  viz->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  viz->add_option("--image", image_path, "8-bit PGM image")->required();
  viz->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (common.print_config) {
      const RunConfig cfg = ckpt.empty() ? resolve(common) : checkpoint_config(ckpt, common);
      std::cout << to_json(cfg).dump(2) << "\n";
      return 0;
    }
    if (*gen) return cmd_generate(common, out);
    if (*tr) return cmd_train(common, data_dir, out, resume);
    if (*sw) return cmd_sweep(common, data_dir, out, trials, keep);
    if (*evc) return cmd_eval(common, ev);
    if (*viz) return cmd_viz(common, ckpt, image_path, out);
    std::cerr << app.help();
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
