#include "gmic/attention.hpp"

#include <cmath>

namespace gmic {

namespace {

template <typename Scalar>
Tensor<Scalar> glorot(Shape shape, Index fan_in, Index fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

}  // namespace

template <typename Scalar>
AttentionParams<Scalar>::AttentionParams(Index L, Index M, std::mt19937_64& rng)
    : V(parameter(glorot<Scalar>({L, M}, L, M, rng))),
      U(parameter(glorot<Scalar>({L, M}, L, M, rng))),
      w(parameter(glorot<Scalar>({M, 1}, M, 1, rng))) {}

template <typename Scalar>
LocalHead<Scalar>::LocalHead(Index L, std::mt19937_64& rng)
    : weight(parameter(glorot<Scalar>({L, 2}, L, 2, rng))), bias(parameter(Tensor<Scalar>(Shape{2}, Scalar(0)))) {}

template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& logits) {
  if (logits.value().rank() != 2) throw DimensionError("softmax_rows: expected [N,K], got " + shape_string(logits.shape()));
  const Index N = logits.dim(0), K = logits.dim(1);
  Tensor<Scalar> out(Shape{N, K});
  auto y = out.matrix(N, K);
  const auto x = logits.value().matrix(N, K);
  for (Index n = 0; n < N; ++n) {
    const Scalar m = x.row(n).maxCoeff();
    y.row(n) = (x.row(n).array() - m).exp().matrix();
    y.row(n) /= y.row(n).sum();
  }
  return record<Scalar>(std::move(out), {logits}, [N, K](Node<Scalar>& self) {
    const auto yv = self.value.matrix(N, K);
    const auto gy = self.grad.matrix(N, K);
    auto gx = self.parents[0]->grad_buffer().matrix(N, K);
    for (Index n = 0; n < N; ++n) {
      const Scalar dot = yv.row(n).dot(gy.row(n));
      gx.row(n).array() += yv.row(n).array() * (gy.row(n).array() - dot);
    }
  });
}

template <typename Scalar>
Var<Scalar> gated_attention(const Var<Scalar>& embeddings, const AttentionParams<Scalar>& params, Index patches) {
  if (embeddings.value().rank() != 2 || patches < 1 || embeddings.dim(0) % patches != 0)
    throw DimensionError("gated_attention: embeddings " + shape_string(embeddings.shape()) +
                         " cannot be split into bags of " + std::to_string(patches));
  const Index bags = embeddings.dim(0) / patches;
  Var<Scalar> gate = mul(tanh(linear(embeddings, params.V)), sigmoid(linear(embeddings, params.U)));
  Var<Scalar> scores = linear(gate, params.w);  // [N*K, 1]
  return softmax_rows(reshape(scores, {bags, patches}));
}

template <typename Scalar>
Var<Scalar> attention_pool(const Var<Scalar>& embeddings, const Var<Scalar>& alpha) {
  if (embeddings.value().rank() != 2 || alpha.value().rank() != 2 ||
      embeddings.dim(0) != alpha.dim(0) * alpha.dim(1))
    throw DimensionError("attention_pool: embeddings " + shape_string(embeddings.shape()) + " vs alpha " +
                         shape_string(alpha.shape()));
  const Index N = alpha.dim(0), K = alpha.dim(1), L = embeddings.dim(1);
  Tensor<Scalar> out(Shape{N, L});
  const Scalar* e = embeddings.value().data();
  const Scalar* a = alpha.value().data();
  for (Index n = 0; n < N; ++n) {
    Scalar* z = out.data() + n * L;
    for (Index k = 0; k < K; ++k) {
      const Scalar wk = a[n * K + k];
      const Scalar* row = e + (n * K + k) * L;
      for (Index l = 0; l < L; ++l) z[l] += wk * row[l];
    }
  }
  auto e_node = embeddings.node(), a_node = alpha.node();
  return record<Scalar>(std::move(out), {embeddings, alpha}, [=](Node<Scalar>& self) {
    Node<Scalar>* en = nullptr;
    Node<Scalar>* an = nullptr;
    for (auto& p : self.parents) {
      if (p == e_node && p->requires_grad) en = p.get();
      if (p == a_node && p->requires_grad) an = p.get();
    }
    const auto gz = self.grad.matrix(N, L);
    const auto E = e_node->value.matrix(N * K, L);
    if (en) {
      auto gE = en->grad_buffer().matrix(N * K, L);
      for (Index n = 0; n < N; ++n)
        for (Index k = 0; k < K; ++k) gE.row(n * K + k) += a_node->value[n * K + k] * gz.row(n);
    }
    if (an) {
      auto& gA = an->grad_buffer();
      for (Index n = 0; n < N; ++n)
        for (Index k = 0; k < K; ++k) gA[n * K + k] += E.row(n * K + k).dot(gz.row(n));
    }
  });
}

#define GMIC_INSTANTIATE_ATTENTION(T)                                                 \
  template struct AttentionParams<T>;                                                 \
  template struct LocalHead<T>;                                                       \
  template Var<T> softmax_rows(const Var<T>&);                                        \
  template Var<T> gated_attention(const Var<T>&, const AttentionParams<T>&, Index);   \
  template Var<T> attention_pool(const Var<T>&, const Var<T>&);

GMIC_INSTANTIATE_ATTENTION(float)
GMIC_INSTANTIATE_ATTENTION(double)

}  // namespace gmic
