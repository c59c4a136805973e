// Test-only finite-difference oracle and random tensor helpers.
#pragma once

#include "gmic/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace gmic::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Index checked = 0;
  bool ok = true;
};

/// Compare analytic gradients of `loss_fn` with central differences.
/// An entry agrees when its relative error is below `tol` or the absolute
/// difference is below `abs_floor`. `max_entries` > 0 samples that many
/// coordinates per leaf (deterministically, from `seed`).
inline GradCheckResult gradcheck(const std::function<Var<double>()>& loss_fn, std::vector<Var<double>> leaves,
                                 double tol, double step = 1e-6, double abs_floor = 1e-8, Index max_entries = 0,
                                 unsigned seed = 0) {
  for (auto& leaf : leaves) leaf.zero_grad();
  Var<double> loss = loss_fn();
  backward(loss);
  std::vector<Tensor<double>> analytic;
  for (auto& leaf : leaves) analytic.push_back(leaf.has_grad() ? leaf.grad() : Tensor<double>::zeros(leaf.shape()));

  std::mt19937_64 rng(seed);
  GradCheckResult result;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    Tensor<double>& value = leaves[l].mutable_value();
    std::vector<Index> coords(static_cast<std::size_t>(value.size()));
    for (Index i = 0; i < value.size(); ++i) coords[static_cast<std::size_t>(i)] = i;
    if (max_entries > 0 && value.size() > max_entries) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(max_entries));
    }
    for (Index i : coords) {
      const double saved = value[i];
      value[i] = saved + step;
      const double plus = loss_fn().value()[0];
      value[i] = saved - step;
      const double minus = loss_fn().value()[0];
      value[i] = saved;
      const double numeric = (plus - minus) / (2 * step);
      const double a = analytic[l][i];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-300});
      ++result.checked;
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      if (abs_err >= abs_floor) {
        result.max_rel_error = std::max(result.max_rel_error, rel_err);
        if (rel_err >= tol) result.ok = false;
      }
    }
  }
  for (auto& leaf : leaves) leaf.zero_grad();
  return result;
}

}  // namespace gmic::testing
