// Gated-attention MIL pooling over patch embeddings and the local head.
#pragma once

#include "gmic/autodiff.hpp"

#include <random>

namespace gmic {

/// Gated attention parameters.
///
/// Scores are w^T (tanh(h V) * sigm(h U)) for a row embedding h in R^L, with
/// V, U in R^{L x M} projecting into the attention space and w in R^M. This is
/// the dimensionally consistent reading of the usual gated-attention MIL
/// formula; the output is one scalar score per patch.
template <typename Scalar>
struct AttentionParams {
  Var<Scalar> V;  // [L, M]
  Var<Scalar> U;  // [L, M]
  Var<Scalar> w;  // [M, 1]

  AttentionParams() = default;
  AttentionParams(Index embedding_dim, Index attention_dim, std::mt19937_64& rng);
};

/// Row-wise softmax of [N,K] logits with max subtraction.
template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& logits);

/// embeddings [N*K, L] -> alpha [N, K], each row on the probability simplex.
template <typename Scalar>
Var<Scalar> gated_attention(const Var<Scalar>& embeddings, const AttentionParams<Scalar>& params, Index patches);

/// z[n] = sum_k alpha[n,k] * embeddings[n*K + k], accumulated in ascending k.
/// embeddings [N*K, L], alpha [N, K] -> z [N, L].
template <typename Scalar>
Var<Scalar> attention_pool(const Var<Scalar>& embeddings, const Var<Scalar>& alpha);

/// Local prediction sigm(z W + b): z [N,L], W [L,2], b [2] -> [N,2].
template <typename Scalar>
struct LocalHead {
  Var<Scalar> weight;
  Var<Scalar> bias;

  LocalHead() = default;
  LocalHead(Index embedding_dim, std::mt19937_64& rng);
};

template <typename Scalar>
Var<Scalar> local_head(const Var<Scalar>& z, const LocalHead<Scalar>& head) {
  return sigmoid(linear(z, head.weight, head.bias));
}

}  // namespace gmic
