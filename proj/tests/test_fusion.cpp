#include "doctest.h"
#include "gradcheck.hpp"
#include "tiny_config.hpp"

#include "gmic/fusion.hpp"
#include "gmic/training.hpp"

using namespace gmic;
using gmic::testing::gradcheck;
using gmic::testing::random_tensor;
using gmic::testing::tiny_config;

TEST_CASE("fusion head: zero weights give 0.5 and the desk feature length is 176") {
  std::mt19937_64 rng(51);
  const NetworkConfig desk = NetworkConfig::desk();
  FusionHead<double> head(desk.global_feature_dim(), desk.embedding_dim, rng);
  CHECK(head.weight.shape() == Shape{176, 2});
  head.weight.mutable_value().array().setZero();
  auto y = fusion_head(constant(Tensor<double>({1, 48, 8, 8})), constant(Tensor<double>({1, 128})), head);
  CHECK(y.value()[0] == 0.5);
  CHECK(y.value()[1] == 0.5);
  CHECK_THROWS_AS(fusion_head(constant(Tensor<double>({1, 40, 8, 8})), constant(Tensor<double>({1, 128})), head),
                  DimensionError);
}

TEST_CASE("fusion head gradient through max pooling and concatenation") {
  std::mt19937_64 rng(52);
  FusionHead<double> head(4, 3, rng);
  auto hg = parameter(random_tensor({2, 4, 3, 3}, rng));
  auto z = parameter(random_tensor({2, 3}, rng));
  auto weights = constant(random_tensor({2, 2}, rng));
  auto r = gradcheck([&] { return sum(mul(fusion_head(hg, z, head), weights)); }, {hg, z, head.weight, head.bias}, 1e-4);
  CHECK(r.ok);
}

TEST_CASE("model outputs: shapes, ranges, determinism") {
  const NetworkConfig cfg = tiny_config();
  GmicModel<double> model(cfg, 53);
  std::mt19937_64 rng(54);
  const Tensor<double> x = random_tensor({3, 1, 32, 32}, rng, 0.0, 1.0);
  ForwardOptions<double> opt;
  const auto a = model.forward(x, opt);
  const auto b = model.forward(x, opt);
  CHECK(a.saliency.shape() == Shape{3, 2, 4, 4});
  CHECK(a.alpha.shape() == Shape{3, 2});
  for (const auto* y : {&a.y_global, &a.y_local, &a.y_fusion}) {
    CHECK(y->shape() == Shape{3, 2});
    CHECK(y->value().array().minCoeff() >= 0.0);
    CHECK(y->value().array().maxCoeff() <= 1.0);
  }
  CHECK(a.y_fusion.value() == b.y_fusion.value());
  CHECK(a.y_local.value() == b.y_local.value());
  CHECK(a.alpha.value() == b.alpha.value());
  REQUIRE(a.patchsets.size() == 3);
  for (std::size_t n = 0; n < 3; ++n) {
    CHECK(a.patchsets[n].patches.shape() == Shape{2, 1, 16, 16});
    CHECK(a.patchsets[n].windows.size() == 2);
  }
  CHECK_THROWS_AS(model.forward(Tensor<double>({1, 32, 32}), opt), DimensionError);
}

TEST_CASE("uniform attention and random selection options") {
  const NetworkConfig cfg = tiny_config();
  GmicModel<double> model(cfg, 55);
  std::mt19937_64 rng(56);
  const Tensor<double> x = random_tensor({2, 1, 32, 32}, rng, 0.0, 1.0);
  ForwardOptions<double> opt;
  opt.attention = AttentionMode::uniform;
  const auto u = model.forward(x, opt);
  for (Index i = 0; i < u.alpha.value().size(); ++i) CHECK(u.alpha.value()[i] == 0.5);

  opt.selection = PatchSelection::random;
  CHECK_THROWS_AS(model.forward(x, opt), ConfigError);
  std::mt19937_64 r1(7), r2(7);
  opt.rng = &r1;
  const auto p1 = model.forward(x, opt);
  opt.rng = &r2;
  const auto p2 = model.forward(x, opt);
  CHECK(p1.y_local.value() == p2.y_local.value());
}

TEST_CASE("fusion output responds to both branches") {
  const NetworkConfig cfg = tiny_config();
  GmicModel<double> model(cfg, 57);
  std::mt19937_64 rng(58);
  const Tensor<double> x = random_tensor({2, 1, 32, 32}, rng, 0.0, 1.0);
  ForwardOptions<double> opt;
  const auto base = model.forward(x, opt);

  // local branch only: perturb the cropped patches after selection
  opt.patch_transform = [](Tensor<double>& p) { p.array() += 0.3; };
  const auto local_changed = model.forward(x, opt);
  CHECK(local_changed.global_features.value() == base.global_features.value());
  CHECK((local_changed.y_fusion.value().array() - base.y_fusion.value().array()).abs().maxCoeff() > 1e-9);

  // global branch only: change a global weight, then undo the effect on the
  // patch crops by keeping the same windows (checked below)
  opt.patch_transform = nullptr;
  auto params = model.global_parameters().parameters;
  params.front().second.mutable_value().array() *= 1.5;
  const auto global_changed = model.forward(x, opt);
  bool same_windows = true;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 2; ++k)
      same_windows = same_windows && global_changed.patchsets[n].windows[k].pixel_row == base.patchsets[n].windows[k].pixel_row &&
                     global_changed.patchsets[n].windows[k].pixel_col == base.patchsets[n].windows[k].pixel_col;
  if (same_windows) CHECK(global_changed.y_local.value() == base.y_local.value());
  CHECK((global_changed.y_fusion.value().array() - base.y_fusion.value().array()).abs().maxCoeff() > 1e-9);
}

TEST_CASE("total loss gradient end to end over 50 sampled parameters") {
  const NetworkConfig cfg = tiny_config();
  GmicModel<double> model(cfg, 59);
  std::mt19937_64 rng(60);
  const Tensor<double> x = random_tensor({2, 1, 32, 32}, rng, 0.0, 1.0);
  const Tensor<double> labels({2, 2}, {1.0, 0.0, 0.0, 1.0});
  ForwardOptions<double> opt;
  opt.mode = NormMode::train;
  auto loss_fn = [&] { return total_loss(model.forward(x, opt), labels, 1e-3); };

  auto named = model.named_parameters().parameters;
  model.zero_grad();
  backward(loss_fn());

  std::vector<std::pair<std::size_t, Index>> picks;
  std::uniform_int_distribution<std::size_t> leaf(0, named.size() - 1);
  while (picks.size() < 50) {
    const std::size_t l = leaf(rng);
    picks.emplace_back(l, std::uniform_int_distribution<Index>(0, named[l].second.value().size() - 1)(rng));
  }
  double worst = 0;
  int compared = 0;
  for (const auto& [l, i] : picks) {
    Var<double>& p = named[l].second;
    const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
    const double saved = p.value()[i];
    const double h = 1e-6;
    p.mutable_value()[i] = saved + h;
    const double plus = loss_fn().value()[0];
    p.mutable_value()[i] = saved - h;
    const double minus = loss_fn().value()[0];
    p.mutable_value()[i] = saved;
    const double numeric = (plus - minus) / (2 * h);
    const double abs_err = std::abs(analytic - numeric);
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    if (scale < 1e-10) continue;  // parameter outside the active path
    INFO(named[l].first);
    CHECK(abs_err / scale < 1e-3);
    worst = std::max(worst, abs_err / scale);
    ++compared;
  }
  CHECK(compared >= 25);
  CHECK(worst < 1e-3);
}

TEST_CASE("both branches receive gradient") {
  const NetworkConfig cfg = tiny_config();
  GmicModel<double> model(cfg, 61);
  std::mt19937_64 rng(62);
  const Tensor<double> x = random_tensor({2, 1, 32, 32}, rng, 0.0, 1.0);
  ForwardOptions<double> opt;
  opt.mode = NormMode::train;
  model.zero_grad();
  backward(total_loss(model.forward(x, opt), Tensor<double>({2, 2}, {1.0, 0.0, 0.0, 1.0}), 0.0));
  auto nonzero = [](const NamedParameters<double>& ps) {
    double total = 0;
    for (const auto& [name, p] : ps.parameters)
      if (p.has_grad()) total += p.grad().array().abs().sum();
    return total;
  };
  CHECK(nonzero(model.global_parameters()) > 0.0);
  CHECK(nonzero(model.local_parameters()) > 0.0);
  for (const auto& [name, p] : model.named_parameters().parameters) {
    INFO(name);
    CHECK(p.has_grad());
  }
}
