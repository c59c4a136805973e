#include "gmic/synthetic.hpp"

#include "gmic/random.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace gmic {

std::string to_string(View v) { return v == View::cc ? "CC" : "MLO"; }

View view_from_string(const std::string& name) {
  if (name == "CC") return View::cc;
  if (name == "MLO") return View::mlo;
  throw ConfigError("unknown view '" + name + "' (expected CC or MLO)");
}

std::string to_string(Split s) { return s == Split::train ? "train" : s == Split::val ? "val" : "test"; }

namespace {

constexpr double kTissueLevel = 0.42;
constexpr double kOutsideLevel = 0.04;
constexpr int kMaxPlacementAttempts = 100;

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError("SynthConfig." + field + ": " + why);
}

// Breast-like half ellipse attached to the left (chest wall) edge.
struct Support {
  double cy, a, b;
  bool contains(double r, double c) const {
    const double u = c / a, v = (r - cy) / b;
    return u * u + v * v <= 1.0;
  }
  // Whole disc (plus margin) inside the support and the image.
  bool contains_disc(double r, double c, double radius, Index H, Index W) const {
    if (r - radius < 0 || c - radius < 0 || r + radius > H - 1 || c + radius > W - 1) return false;
    for (int k = 0; k < 16; ++k) {
      const double th = 2.0 * M_PI * k / 16.0;
      if (!contains(r + radius * std::sin(th), c + radius * std::cos(th))) return false;
    }
    return contains(r, c) && c - radius >= 1.0;
  }
};

// Smoothed value noise in [-1, 1]: octaves of bilinear-interpolated random grids.
GridMap<double> value_noise(Index H, Index W, int octaves, std::mt19937_64& rng) {
  GridMap<double> out = GridMap<double>::Zero(H, W);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  double amplitude = 1.0, total = 0.0;
  for (int o = 0; o < octaves; ++o) {
    const Index g = Index(3) << o;
    GridMap<double> nodes(g + 1, g + 1);
    for (Index i = 0; i < nodes.size(); ++i) nodes.data()[i] = uni(rng);
    for (Index r = 0; r < H; ++r) {
      const double y = static_cast<double>(r) * g / static_cast<double>(H);
      const Index y0 = static_cast<Index>(y);
      double fy = y - static_cast<double>(y0);
      fy = fy * fy * (3 - 2 * fy);
      for (Index c = 0; c < W; ++c) {
        const double x = static_cast<double>(c) * g / static_cast<double>(W);
        const Index x0 = static_cast<Index>(x);
        double fx = x - static_cast<double>(x0);
        fx = fx * fx * (3 - 2 * fx);
        const double top = nodes(y0, x0) * (1 - fx) + nodes(y0, x0 + 1) * fx;
        const double bot = nodes(y0 + 1, x0) * (1 - fx) + nodes(y0 + 1, x0 + 1) * fx;
        out(r, c) += amplitude * (top * (1 - fy) + bot * fy);
      }
    }
    total += amplitude;
    amplitude *= 0.5;
  }
  return out / total;
}

struct Lesion {
  double r, c, radius;
};

Lesion place_lesion(const Support& s, double rmin, double rmax, const std::vector<Lesion>& taken, Index H, Index W,
                    std::mt19937_64& rng) {
  std::uniform_real_distribution<double> rad(rmin, rmax);
  std::uniform_real_distribution<double> row(0.0, static_cast<double>(H - 1));
  std::uniform_real_distribution<double> col(0.0, static_cast<double>(W - 1));
  for (int attempt = 0; attempt < kMaxPlacementAttempts; ++attempt) {
    Lesion l{row(rng), col(rng), rad(rng)};
    if (!s.contains_disc(l.r, l.c, l.radius + 2.0, H, W)) continue;
    bool clear = true;
    for (const Lesion& o : taken)
      if (std::hypot(l.r - o.r, l.c - o.c) <= l.radius + o.radius + 2.0) clear = false;
    if (clear) return l;
  }
  throw ConfigError("SynthConfig: lesion placement infeasible after " + std::to_string(kMaxPlacementAttempts) +
                    " attempts (lesion radius too large for the image?)");
}

// Pixel centres within the lesion radius.
template <typename F>
void for_disc(const Lesion& l, Index H, Index W, F&& f) {
  const Index r0 = std::max<Index>(0, static_cast<Index>(std::floor(l.r - l.radius)));
  const Index r1 = std::min<Index>(H - 1, static_cast<Index>(std::ceil(l.r + l.radius)));
  const Index c0 = std::max<Index>(0, static_cast<Index>(std::floor(l.c - l.radius)));
  const Index c1 = std::min<Index>(W - 1, static_cast<Index>(std::ceil(l.c + l.radius)));
  for (Index r = r0; r <= r1; ++r)
    for (Index c = c0; c <= c1; ++c) {
      const double d = std::hypot(static_cast<double>(r) - l.r, static_cast<double>(c) - l.c);
      if (d <= l.radius) f(r, c, d);
    }
}

LabeledExample render_view(const SynthConfig& cfg, std::uint64_t exam_seed, View view, int y_b, int y_m,
                           int breast_id, bool with_lesions) {
  const Index H = cfg.height, W = cfg.width;
  const std::uint64_t v = view == View::cc ? 0 : 1;
  std::mt19937_64 shape_rng(derive_seed(exam_seed, "shape", v));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Support s{H * (0.5 + 0.08 * (u01(shape_rng) - 0.5)), W * (0.72 + 0.18 * u01(shape_rng)),
            H * (0.38 + 0.09 * u01(shape_rng))};
  if (view == View::mlo) s.b *= 1.06;

  std::mt19937_64 tex_rng(derive_seed(exam_seed, "texture", v));
  const GridMap<double> noise = value_noise(H, W, cfg.noise_octaves, tex_rng);
  std::uniform_real_distribution<double> grain(-cfg.pixel_noise, cfg.pixel_noise);
  GridMap<double> px(H, W);
  for (Index r = 0; r < H; ++r)
    for (Index c = 0; c < W; ++c)
      px(r, c) = s.contains(static_cast<double>(r), static_cast<double>(c))
                     ? kTissueLevel + cfg.texture_contrast * noise(r, c) + grain(tex_rng)
                     : kOutsideLevel;

  LabeledExample ex;
  ex.view = view;
  ex.breast_id = breast_id;
  ex.label_benign = y_b;
  ex.label_malignant = y_m;
  ex.mask_benign = Mask::Zero(H, W);
  ex.mask_malignant = Mask::Zero(H, W);

  std::mt19937_64 lesion_rng(derive_seed(exam_seed, "lesion", v));
  std::vector<Lesion> taken;
  if (y_b) {
    const Lesion l = place_lesion(s, cfg.benign_radius_min, cfg.benign_radius_max, taken, H, W, lesion_rng);
    taken.push_back(l);
    const double a = std::uniform_real_distribution<double>(0.6, 1.0)(lesion_rng) * cfg.benign_contrast;
    const double sigma = l.radius / 2.0;
    for_disc(l, H, W, [&](Index r, Index c, double d) {
      ex.mask_benign(r, c) = 1;
      if (with_lesions) px(r, c) += a * std::exp(-d * d / (2 * sigma * sigma));
    });
  }
  if (y_m) {
    const Lesion l = place_lesion(s, cfg.malignant_radius_min, cfg.malignant_radius_max, taken, H, W, lesion_rng);
    taken.push_back(l);
    const double a = std::uniform_real_distribution<double>(0.6, 1.0)(lesion_rng) * cfg.malignant_contrast;
    std::uniform_real_distribution<double> mag(0.5, 1.0);
    for_disc(l, H, W, [&](Index r, Index c, double) {
      ex.mask_malignant(r, c) = 1;
      const double sign = (lesion_rng() & 1) ? 1.0 : -1.0;
      const double delta = sign * a * mag(lesion_rng);
      if (with_lesions) px(r, c) += delta;
    });
  }

  ex.image = quantize_8bit(px.cast<float>());
  return ex;
}

Index split_offset(const SynthConfig& cfg, Split split) {
  return split == Split::train ? 0 : split == Split::val ? cfg.n_train : cfg.n_train + cfg.n_val;
}

}  // namespace

void SynthConfig::validate() const {
  require(height >= 32 && width >= 32, "height", "image must be at least 32x32");
  require(n_train >= 0 && n_val >= 0 && n_test >= 0, "n_train", "split sizes must be nonnegative");
  require(prevalence_benign >= 0.0 && prevalence_benign <= 1.0, "prevalence_benign", "must lie in [0,1]");
  require(prevalence_malignant >= 0.0 && prevalence_malignant <= 1.0, "prevalence_malignant", "must lie in [0,1]");
  require(benign_radius_min >= 1.0 && benign_radius_min <= benign_radius_max, "benign_radius_min",
          "need 1 <= min <= max");
  require(malignant_radius_min >= 1.0 && malignant_radius_min <= malignant_radius_max, "malignant_radius_min",
          "need 1 <= min <= max");
  const double fit = 0.15 * static_cast<double>(std::min(height, width));
  require(benign_radius_max <= fit, "benign_radius_max", "lesion does not fit the breast region");
  require(malignant_radius_max <= fit, "malignant_radius_max", "lesion does not fit the breast region");
  require(noise_octaves >= 1 && noise_octaves <= 8, "noise_octaves", "must lie in [1,8]");
  require(texture_contrast >= 0.0, "texture_contrast", "must be nonnegative");
  require(pixel_noise >= 0.0, "pixel_noise", "must be nonnegative");
  // Smallest change at a mask pixel must survive 8-bit storage: 0.6 * exp(-2) *
  // contrast for blobs, 0.3 * contrast for speckle.
  require(benign_contrast >= 0.08, "benign_contrast", "must be at least 0.08 so lesions survive 8-bit storage");
  require(malignant_contrast >= 0.02, "malignant_contrast",
          "must be at least 0.02 so lesions survive 8-bit storage");
  const double headroom = kTissueLevel - texture_contrast - pixel_noise;
  require(benign_contrast <= headroom, "benign_contrast",
          "texture_contrast + pixel_noise + benign_contrast must not exceed 0.42 (intensities would clip)");
  require(malignant_contrast <= headroom, "malignant_contrast",
          "texture_contrast + pixel_noise + malignant_contrast must not exceed 0.42 (intensities would clip)");
}

SynthExam generate_exam(const SynthConfig& cfg, Split split, int index, bool with_lesions) {
  const Index global = split_offset(cfg, split) + index;
  const std::uint64_t exam_seed = derive_seed(cfg.seed, "exam", static_cast<std::uint64_t>(global));
  std::mt19937_64 label_rng(derive_seed(exam_seed, "labels"));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  SynthExam exam;
  exam.exam_id = static_cast<int>(global);
  exam.breast_id = static_cast<int>(global);
  exam.label_benign = u01(label_rng) < cfg.prevalence_benign ? 1 : 0;
  exam.label_malignant = u01(label_rng) < cfg.prevalence_malignant ? 1 : 0;
  exam.views[0] = render_view(cfg, exam_seed, View::cc, exam.label_benign, exam.label_malignant, exam.breast_id,
                              with_lesions);
  exam.views[1] = render_view(cfg, exam_seed, View::mlo, exam.label_benign, exam.label_malignant, exam.breast_id,
                              with_lesions);
  return exam;
}

Dataset generate(const SynthConfig& cfg) {
  cfg.validate();
  Dataset data;
  for (Split s : {Split::train, Split::val, Split::test}) {
    const int n = s == Split::train ? cfg.n_train : s == Split::val ? cfg.n_val : cfg.n_test;
    auto& out = data.split(s);
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(generate_exam(cfg, s, i));
  }
  return data;
}

void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
  for (Split s : {Split::train, Split::val, Split::test}) {
    const auto root = dir / to_string(s);
    std::filesystem::create_directories(root / "images");
    std::filesystem::create_directories(root / "masks");
    std::ofstream index(root / "index.csv");
    if (!index) throw std::runtime_error("cannot write " + (root / "index.csv").string());
    index << "exam_id,breast_id,view,y_b,y_m,image,mask_benign,mask_malignant\n";
    for (const SynthExam& exam : data.split(s)) {
      for (const LabeledExample& ex : exam.views) {
        const std::string stem = std::to_string(exam.exam_id) + "_" + to_string(ex.view);
        const std::string img = "images/" + stem + ".pgm";
        const std::string mb = "masks/" + stem + "_benign.pgm";
        const std::string mm = "masks/" + stem + "_malignant.pgm";
        write_pgm(root / img, ex.image);
        write_pgm(root / mb, ex.mask_benign);
        write_pgm(root / mm, ex.mask_malignant);
        index << exam.exam_id << ',' << exam.breast_id << ',' << to_string(ex.view) << ',' << exam.label_benign << ','
              << exam.label_malignant << ',' << img << ',' << mb << ',' << mm << '\n';
      }
    }
  }
}

Dataset read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError("dataset directory '" + dir.string() + "' does not exist");
  Dataset data;
  for (Split s : {Split::train, Split::val, Split::test}) {
    const auto root = dir / to_string(s);
    if (!std::filesystem::exists(root / "index.csv")) continue;
    const CsvTable t = read_csv(root / "index.csv");
    const auto ce = t.column("exam_id"), cb = t.column("breast_id"), cv = t.column("view"), cyb = t.column("y_b"),
               cym = t.column("y_m"), ci = t.column("image"), cmb = t.column("mask_benign"),
               cmm = t.column("mask_malignant");
    auto& out = data.split(s);
    for (const auto& row : t.rows) {
      const int exam_id = std::stoi(row[ce]);
      if (out.empty() || out.back().exam_id != exam_id) {
        SynthExam e;
        e.exam_id = exam_id;
        e.breast_id = std::stoi(row[cb]);
        e.label_benign = std::stoi(row[cyb]);
        e.label_malignant = std::stoi(row[cym]);
        out.push_back(std::move(e));
      }
      SynthExam& e = out.back();
      LabeledExample ex;
      ex.view = view_from_string(row[cv]);
      ex.breast_id = e.breast_id;
      ex.label_benign = std::stoi(row[cyb]);
      ex.label_malignant = std::stoi(row[cym]);
      if (ex.label_benign != e.label_benign || ex.label_malignant != e.label_malignant)
        throw std::runtime_error("index.csv: views of exam " + std::to_string(exam_id) + " disagree on labels");
      ex.image = read_pgm(root / row[ci]);
      ex.mask_benign = read_mask_pgm(root / row[cmb]);
      ex.mask_malignant = read_mask_pgm(root / row[cmm]);
      e.views[ex.view == View::cc ? 0 : 1] = std::move(ex);
    }
    for (const SynthExam& e : out)
      if (e.views[0].image.size() == 0 || e.views[1].image.size() == 0)
        throw std::runtime_error("index.csv: exam " + std::to_string(e.exam_id) + " lacks a CC or MLO view");
  }
  return data;
}

}  // namespace gmic
