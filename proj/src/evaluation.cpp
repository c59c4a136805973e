#include "gmic/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>

namespace gmic {

namespace {

void class_counts(const ScoredSet& s, std::size_t& pos, std::size_t& neg) {
  s.validate();
  pos = static_cast<std::size_t>(std::count(s.labels.begin(), s.labels.end(), 1));
  neg = s.labels.size() - pos;
}

// Indices sorted by descending score.
std::vector<std::size_t> descending(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

void check_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw MetricError(std::string(what) + ": misaligned inputs (" + std::to_string(a) + " vs " + std::to_string(b) +
                      ")");
}

}  // namespace

void ScoredSet::validate() const {
  check_aligned(scores.size(), labels.size(), "ScoredSet scores/labels");
  if (!group_ids.empty()) check_aligned(scores.size(), group_ids.size(), "ScoredSet scores/group_ids");
  for (int y : labels)
    if (y != 0 && y != 1) throw MetricError("ScoredSet: labels must be 0 or 1");
}

double auc(const ScoredSet& s) {
  std::size_t pos = 0, neg = 0;
  class_counts(s, pos, neg);
  if (pos == 0 || neg == 0) throw MetricError("auc: undefined with a single class present");
  // Average ranks (ascending), ties share the mean rank.
  std::vector<std::size_t> order(s.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
  double pos_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && s.scores[order[j]] == s.scores[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (s.labels[order[k]] == 1) pos_rank_sum += rank;
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1) / 2) / (p * n);
}

double prauc(const ScoredSet& s) {
  std::size_t pos = 0, neg = 0;
  class_counts(s, pos, neg);
  if (pos == 0) throw MetricError("prauc: undefined without positives");
  const auto order = descending(s.scores);
  double ap = 0, prev_recall = 0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && s.scores[order[j]] == s.scores[order[i]]) {
      (s.labels[order[j]] == 1 ? tp : fp)++;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double dsc(const GridMap<double>& pred, const Mask& truth, DscMode mode, double threshold) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols())
    throw DimensionError("dsc: prediction is " + std::to_string(pred.rows()) + "x" + std::to_string(pred.cols()) +
                      " but mask is " + std::to_string(truth.rows()) + "x" + std::to_string(truth.cols()));
  double inter = 0, sp = 0, sm = 0;
  for (Index i = 0; i < pred.size(); ++i) {
    double p = pred.data()[i];
    if (mode == DscMode::hard) p = p >= threshold ? 1.0 : 0.0;
    const double m = truth.data()[i] ? 1.0 : 0.0;
    inter += p * m;
    sp += p;
    sm += m;
  }
  if (sm == 0) throw MetricError("dsc: ground-truth mask is empty");
  return 2 * inter / (sp + sm);
}

double sensitivity_matched_specificity(const ScoredSet& s, double target) {
  if (!(target > 0 && target <= 1)) throw MetricError("sensitivity_matched_specificity: target must lie in (0,1]");
  std::size_t pos = 0, neg = 0;
  class_counts(s, pos, neg);
  if (pos == 0 || neg == 0) throw MetricError("sensitivity_matched_specificity: needs both classes");
  // Walk thresholds from the largest score down; the first one reaching the
  // target is the largest such threshold.
  const auto order = descending(s.scores);
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && s.scores[order[j]] == s.scores[order[i]]) {
      (s.labels[order[j]] == 1 ? tp : fp)++;
      ++j;
    }
    if (static_cast<double>(tp) / static_cast<double>(pos) >= target)
      return static_cast<double>(neg - fp) / static_cast<double>(neg);
    i = j;
  }
  throw MetricError("sensitivity_matched_specificity: target sensitivity unreachable");
}

double breast_level(double cc, double mlo) { return 0.5 * (cc + mlo); }

ScoredSet breast_level(const ScoredSet& cc, const ScoredSet& mlo) {
  cc.validate();
  mlo.validate();
  ScoredSet out;
  if (cc.group_ids.empty() || mlo.group_ids.empty()) {
    check_aligned(cc.scores.size(), mlo.scores.size(), "breast_level");
    for (std::size_t i = 0; i < cc.scores.size(); ++i) {
      if (cc.labels[i] != mlo.labels[i]) throw MetricError("breast_level: views of one breast disagree on the label");
      out.scores.push_back(breast_level(cc.scores[i], mlo.scores[i]));
      out.labels.push_back(cc.labels[i]);
    }
    return out;
  }
  std::map<int, std::size_t> by_id;
  for (std::size_t i = 0; i < mlo.group_ids.size(); ++i)
    if (!by_id.emplace(mlo.group_ids[i], i).second)
      throw MetricError("breast_level: duplicate breast id " + std::to_string(mlo.group_ids[i]));
  if (by_id.size() != cc.group_ids.size()) throw MetricError("breast_level: unpaired breast");
  for (std::size_t i = 0; i < cc.scores.size(); ++i) {
    const auto it = by_id.find(cc.group_ids[i]);
    if (it == by_id.end()) throw MetricError("breast_level: unpaired breast " + std::to_string(cc.group_ids[i]));
    if (cc.labels[i] != mlo.labels[it->second])
      throw MetricError("breast_level: views of one breast disagree on the label");
    out.scores.push_back(breast_level(cc.scores[i], mlo.scores[it->second]));
    out.labels.push_back(cc.labels[i]);
    out.group_ids.push_back(cc.group_ids[i]);
  }
  return out;
}

std::vector<double> hybrid(const std::vector<double>& reader, const std::vector<double>& model, double lambda) {
  check_aligned(reader.size(), model.size(), "hybrid");
  if (!(lambda >= 0 && lambda <= 1)) throw MetricError("hybrid: lambda must lie in [0,1]");
  std::vector<double> out(reader.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Endpoints return the inputs bit-for-bit.
    if (lambda == 1.0)
      out[i] = reader[i];
    else if (lambda == 0.0)
      out[i] = model[i];
    else
      out[i] = lambda * reader[i] + (1 - lambda) * model[i];
  }
  return out;
}

HybridSweep hybrid_sweep(const std::vector<double>& reader, const std::vector<double>& model,
                         const std::vector<int>& labels, double step) {
  if (!(step > 0 && step <= 1)) throw MetricError("hybrid_sweep: step must lie in (0,1]");
  const int n = static_cast<int>(std::ceil(1.0 / step - 1e-9));
  HybridSweep out;
  out.best_auc = -1;
  for (int i = 0; i <= n; ++i) {
    const double lambda = i == n ? 1.0 : std::min(1.0, i * step);
    ScoredSet s{hybrid(reader, model, lambda), labels, {}};
    SweepPoint pt{lambda, auc(s), prauc(s)};
    if (pt.auc > out.best_auc) {
      out.best_auc = pt.auc;
      out.best_lambda = lambda;
    }
    out.curve.push_back(pt);
  }
  return out;
}

std::vector<double> simplex_ensemble(const std::vector<std::vector<double>>& members,
                                     const std::vector<double>& weights) {
  if (members.size() < 2) throw MetricError("simplex_ensemble: needs at least two members");
  check_aligned(members.size(), weights.size(), "simplex_ensemble members/weights");
  double total = 0;
  for (double w : weights) {
    if (w < 0) throw MetricError("simplex_ensemble: weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw MetricError("simplex_ensemble: weights must sum to 1");
  for (const auto& m : members) check_aligned(m.size(), members[0].size(), "simplex_ensemble members");
  std::vector<double> out(members[0].size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double acc = 0;
    for (std::size_t k = 0; k < members.size(); ++k) acc += weights[k] * members[k][i];
    out[i] = acc;
  }
  // A vertex reproduces its member exactly.
  for (std::size_t k = 0; k < weights.size(); ++k)
    if (weights[k] == 1.0) out = members[k];
  return out;
}

SimplexSearch simplex_grid_search(const std::vector<std::vector<double>>& members, const std::vector<int>& labels,
                                  double step) {
  if (members.size() < 2) throw MetricError("simplex_grid_search: needs at least two members");
  if (!(step > 0 && step <= 1)) throw MetricError("simplex_grid_search: step must lie in (0,1]");
  const int n = static_cast<int>(std::lround(1.0 / step));
  const std::size_t m = members.size();
  SimplexSearch best;
  best.auc = -1;
  // Enumerate compositions of n into m parts in lexicographic order.
  std::vector<int> c(m, 0);
  auto visit = [&](auto&& self, std::size_t k, int left) -> void {
    if (k + 1 == m) {
      c[k] = left;
      std::vector<double> w(m);
      for (std::size_t i = 0; i < m; ++i) w[i] = static_cast<double>(c[i]) / n;
      const double a = auc(ScoredSet{simplex_ensemble(members, w), labels, {}});
      if (a > best.auc) {
        best.auc = a;
        best.weights = w;
      }
      return;
    }
    for (int v = 0; v <= left; ++v) {
      c[k] = v;
      self(self, k + 1, left - v);
    }
  };
  visit(visit, 0, n);
  return best;
}

std::vector<double> topk_ensemble(const std::vector<std::vector<double>>& members) {
  if (members.empty()) throw MetricError("topk_ensemble: needs at least one member");
  std::vector<double> out(members[0].size(), 0.0);
  for (const auto& m : members) check_aligned(m.size(), out.size(), "topk_ensemble");
  for (std::size_t i = 0; i < out.size(); ++i) {
    double acc = 0;
    for (const auto& m : members) acc += m[i];
    out[i] = acc / static_cast<double>(members.size());
  }
  return out;
}

void write_scores(const std::filesystem::path& path, const std::vector<ScoreRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "id,view,label_benign,label_malignant,score_benign,score_malignant\n" << std::setprecision(17);
  for (const ScoreRow& r : rows)
    out << r.id << ',' << r.view << ',' << r.label_benign << ',' << r.label_malignant << ',' << r.score_benign << ','
        << r.score_malignant << '\n';
}

std::vector<ScoreRow> read_scores(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const auto ci = t.column("id"), cv = t.column("view"), cb = t.column("label_benign"),
             cm = t.column("label_malignant"), sb = t.column("score_benign"), sm = t.column("score_malignant");
  std::vector<ScoreRow> rows;
  for (const auto& f : t.rows)
    rows.push_back({f[ci], f[cv], std::stoi(f[cb]), std::stoi(f[cm]), std::stod(f[sb]), std::stod(f[sm])});
  return rows;
}

void write_sweep(const std::filesystem::path& path, const HybridSweep& sweep) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "lambda,auc,prauc\n" << std::setprecision(17);
  for (const SweepPoint& p : sweep.curve) out << p.lambda << ',' << p.auc << ',' << p.prauc << '\n';
}

}  // namespace gmic
