// Saliency head, top-t% pooling and the L1 saliency penalty.
#pragma once

#include "gmic/autodiff.hpp"

#include <random>
#include <vector>

namespace gmic {

/// Number of pooled cells for a fraction t of n cells: ceil(t*n) clamped to
/// [1, n]. Throws ConfigError unless 0 < t <= 1.
Index pool_size(double t, Index n);

/// 1x1 convolution to two channels (benign, malignant) followed by a sigmoid.
template <typename Scalar>
struct SaliencyHead {
  Var<Scalar> weight;  // [2, C_g, 1, 1]
  Var<Scalar> bias;    // [2]

  SaliencyHead() = default;
  SaliencyHead(Index feature_channels, std::mt19937_64& rng);
};

/// h_g [N,C,h,w] -> A [N,2,h,w] with entries in [0,1].
template <typename Scalar>
Var<Scalar> saliency_head(const Var<Scalar>& features, const SaliencyHead<Scalar>& head);

/// Mean of the k = pool_size(t, h*w) largest entries of every [h,w] map.
/// A [N,C,h,w] -> [N,C]. Ties at the k-th rank go to the earlier row-major
/// cell; the backward pass sends 1/k to exactly the selected cells.
template <typename Scalar>
Var<Scalar> topk_mean_pool(const Var<Scalar>& maps, double t);

/// Single-map convenience over a [h,w] tensor.
template <typename Scalar>
Scalar topk_mean_pool(const Tensor<Scalar>& map, double t);

/// Row-major cell indices selected by top-k pooling of one map of n cells.
template <typename Scalar>
std::vector<Index> topk_indices(const Scalar* values, Index n, Index k);

/// Sum of |A| over every entry (A is non-negative, so this is sum(A)).
template <typename Scalar>
Var<Scalar> l1_regularizer(const Var<Scalar>& maps);

}  // namespace gmic
