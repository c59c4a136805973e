#include "gmic/saliency.hpp"

#include "gmic/networks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gmic {

Index pool_size(double t, Index n) {
  if (!(t > 0.0) || t > 1.0) throw ConfigError("pool_fraction: t must lie in (0, 1], got " + std::to_string(t));
  // The relative slack absorbs representation error, e.g. t = 1/(h*w).
  const double raw = std::ceil(t * static_cast<double>(n) * (1.0 - 1e-12));
  return std::clamp<Index>(static_cast<Index>(raw), 1, n);
}

template <typename Scalar>
SaliencyHead<Scalar>::SaliencyHead(Index feature_channels, std::mt19937_64& rng)
    : weight(parameter(he_normal<Scalar>({2, feature_channels, 1, 1}, feature_channels, rng))),
      bias(parameter(Tensor<Scalar>(Shape{2}, Scalar(0)))) {}

template <typename Scalar>
Var<Scalar> saliency_head(const Var<Scalar>& features, const SaliencyHead<Scalar>& head) {
  return sigmoid(add_channel_bias(conv2d(features, head.weight, 1, 0), head.bias));
}

template <typename Scalar>
std::vector<Index> topk_indices(const Scalar* values, Index n, Index k) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  const auto before = [values](Index a, Index b) { return values[a] > values[b] || (values[a] == values[b] && a < b); };
  std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), before);
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

template <typename Scalar>
Var<Scalar> topk_mean_pool(const Var<Scalar>& maps, double t) {
  if (maps.value().rank() != 4)
    throw DimensionError("topk_mean_pool: expected [N,C,h,w], got " + shape_string(maps.shape()));
  const Index N = maps.dim(0), C = maps.dim(1), S = maps.dim(2) * maps.dim(3);
  if (S < 1) throw DimensionError("topk_mean_pool: empty map");
  const Index k = pool_size(t, S);
  Tensor<Scalar> out(Shape{N, C});
  auto selected = std::make_shared<std::vector<Index>>();
  selected->reserve(static_cast<std::size_t>(N * C * k));
  const Scalar* a = maps.value().data();
  for (Index m = 0; m < N * C; ++m) {
    const Scalar* map = a + m * S;
    Scalar acc = 0;
    for (Index i : topk_indices(map, S, k)) {
      acc += map[i];
      selected->push_back(m * S + i);
    }
    out[m] = acc / Scalar(k);
  }
  return record<Scalar>(std::move(out), {maps}, [selected, k](Node<Scalar>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t j = 0; j < selected->size(); ++j)
      g[(*selected)[j]] += self.grad[static_cast<Index>(j) / k] / Scalar(k);
  });
}

template <typename Scalar>
Scalar topk_mean_pool(const Tensor<Scalar>& map, double t) {
  if (map.rank() != 2) throw DimensionError("topk_mean_pool: expected [h,w], got " + shape_string(map.shape()));
  return topk_mean_pool(constant(map.reshaped({1, 1, map.dim(0), map.dim(1)})), t).value()[0];
}

template <typename Scalar>
Var<Scalar> l1_regularizer(const Var<Scalar>& maps) {
  return sum(maps);
}

#define GMIC_INSTANTIATE_SALIENCY(T)                                             \
  template struct SaliencyHead<T>;                                               \
  template Var<T> saliency_head(const Var<T>&, const SaliencyHead<T>&);          \
  template std::vector<Index> topk_indices(const T*, Index, Index);              \
  template Var<T> topk_mean_pool(const Var<T>&, double);                         \
  template T topk_mean_pool(const Tensor<T>&, double);                           \
  template Var<T> l1_regularizer(const Var<T>&);

GMIC_INSTANTIATE_SALIENCY(float)
GMIC_INSTANTIATE_SALIENCY(double)

}  // namespace gmic
