#include "gmic/autodiff.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace gmic {

template <typename Scalar>
Var<Scalar> record(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs, std::function<void(Node<Scalar>&)> rule) {
#ifndef NDEBUG
  bool finite_inputs = true;
  for (const auto& in : inputs)
    if (in.defined() && !in.value().all_finite()) finite_inputs = false;
  assert(!finite_inputs || value.all_finite());
#endif
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  if (NoGradGuard::enabled())
    for (const auto& in : inputs)
      if (in.defined() && in.requires_grad()) node->requires_grad = true;
  if (node->requires_grad) {
    node->parents.reserve(inputs.size());
    for (auto& in : inputs)
      if (in.defined()) node->parents.push_back(in.node());
    node->backward = std::move(rule);
  }
  return Var<Scalar>(std::move(node));
}

template <typename Scalar>
Graph<Scalar> topological_order(const Var<Scalar>& root) {
  Graph<Scalar> order;
  if (!root.defined() || !root.requires_grad()) return order;
  std::unordered_set<const Node<Scalar>*> visited;
  // Iterative post-order DFS; the flag marks a node whose parents are done.
  std::vector<std::pair<std::shared_ptr<Node<Scalar>>, bool>> stack{{root.node(), false}};
  while (!stack.empty()) {
    auto [node, expanded] = std::move(stack.back());
    stack.pop_back();
    if (expanded) {
      order.push_back(std::move(node));
      continue;
    }
    if (!visited.insert(node.get()).second) continue;
    stack.emplace_back(node, true);
    for (auto it = node->parents.rbegin(); it != node->parents.rend(); ++it)
      if ((*it)->requires_grad && !visited.count(it->get())) stack.emplace_back(*it, false);
  }
  return order;
}

template <typename Scalar>
void backward(const Var<Scalar>& loss) {
  if (!loss.defined() || loss.value().size() != 1)
    throw DimensionError("backward needs a scalar loss, got shape " +
                         (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  Graph<Scalar> order = topological_order(loss);
  if (order.empty()) return;
  loss.node()->grad_buffer().array().setOnes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>& node = **it;
    if (node.parents.empty()) {
      node.grad_buffer();
      continue;
    }
    if (!node.has_grad()) node.grad_buffer();
    for (auto& parent : node.parents)
      if (parent->requires_grad) parent->grad_buffer();
    node.backward(node);
  }
  for (auto& node : order) {
    if (node->parents.empty()) continue;
    node->parents.clear();
    node->backward = nullptr;
  }
}

namespace {

template <typename Scalar>
void require_rank(const Var<Scalar>& v, Index rank, const char* op) {
  if (v.value().rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " +
                         shape_string(v.shape()));
}

template <typename Scalar>
Tensor<Scalar>& parent_grad(Node<Scalar>& out, std::size_t i) {
  return out.parents[i]->grad_buffer();
}

/// The recorded parent node `v`, or nullptr when it does not need a gradient.
template <typename Scalar>
Node<Scalar>* recorded(Node<Scalar>& out, const std::shared_ptr<Node<Scalar>>& v) {
  for (auto& p : out.parents)
    if (p == v && p->requires_grad) return p.get();
  return nullptr;
}

// Output columns [lo, hi) whose input column ox*s - p + kj lies inside [0, W).
inline void valid_range(Index OW, Index W, int s, int p, int kj, Index& lo, Index& hi) {
  lo = std::max<Index>(0, (p - kj + s - 1) / s);
  hi = W - 1 + p - kj < 0 ? 0 : std::min<Index>(OW, (W - 1 + p - kj) / s + 1);
  if (hi < lo) hi = lo;
}

// im2col over the whole batch: rows are (c, ki, kj), columns are (n, oy, ox).
template <typename Scalar>
void im2col(const Scalar* x, Index N, Index C, Index H, Index W, int k, int s, int p, Index OH, Index OW,
            RowMatrix<Scalar>& cols) {
  const Index P = OH * OW;
  cols.resize(C * k * k, N * P);
  for (Index c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        Index lo, hi;
        valid_range(OW, W, s, p, kj, lo, hi);
        Scalar* row = cols.data() + ((c * k + ki) * k + kj) * N * P;
        for (Index n = 0; n < N; ++n) {
          const Scalar* plane = x + (n * C + c) * H * W;
          Scalar* dst = row + n * P;
          for (Index oy = 0; oy < OH; ++oy) {
            Scalar* out = dst + oy * OW;
            const Index iy = oy * s - p + ki;
            if (iy < 0 || iy >= H) {
              std::fill(out, out + OW, Scalar(0));
              continue;
            }
            std::fill(out, out + lo, Scalar(0));
            const Scalar* src = plane + iy * W - p + kj;
            if (s == 1) {
              std::copy(src + lo, src + hi, out + lo);
            } else {
              for (Index ox = lo; ox < hi; ++ox) out[ox] = src[ox * s];
            }
            std::fill(out + hi, out + OW, Scalar(0));
          }
        }
      }
}

template <typename Scalar>
void col2im(const Scalar* cols, Index col_stride, Index N, Index C, Index H, Index W, int k, int s, int p, Index OH,
            Index OW, Scalar* dx) {
  const Index P = OH * OW;
  for (Index c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        Index lo, hi;
        valid_range(OW, W, s, p, kj, lo, hi);
        const Scalar* row = cols + ((c * k + ki) * k + kj) * col_stride;
        for (Index n = 0; n < N; ++n) {
          Scalar* plane = dx + (n * C + c) * H * W;
          const Scalar* src = row + n * P;
          for (Index oy = 0; oy < OH; ++oy) {
            const Index iy = oy * s - p + ki;
            if (iy < 0 || iy >= H) continue;
            Scalar* dst = plane + iy * W - p + kj;
            const Scalar* in = src + oy * OW;
            for (Index ox = lo; ox < hi; ++ox) dst[ox * s] += in[ox];
          }
        }
      }
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& weight, int stride, int padding) {
  require_rank(input, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  const Index N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const Index O = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  if (weight.dim(1) != C || weight.dim(3) != k || stride < 1 || padding < 0 || H + 2 * padding < k ||
      W + 2 * padding < k)
    throw DimensionError("conv2d: input " + shape_string(input.shape()) + " incompatible with weight " +
                         shape_string(weight.shape()) + " (stride " + std::to_string(stride) + ", padding " +
                         std::to_string(padding) + ")");
  const Index OH = (H + 2 * padding - k) / stride + 1;
  const Index OW = (W + 2 * padding - k) / stride + 1;
  const Index P = OH * OW;

  auto cols = std::make_shared<RowMatrix<Scalar>>();
  im2col(input.value().data(), N, C, H, W, k, stride, padding, OH, OW, *cols);
  const Index CKK = C * k * k;
  const auto wmat = weight.value().matrix(O, CKK);
  // Large spatial extents: one GEMM per image written in place. Small ones:
  // a single batched GEMM followed by a scatter.
  const bool per_image = P >= 64;
  using Strided = Eigen::Map<const RowMatrix<Scalar>, 0, Eigen::OuterStride<>>;

  Tensor<Scalar> out(Shape{N, O, OH, OW});
  if (per_image) {
    for (Index n = 0; n < N; ++n)
      RowMatrixMap<Scalar>(out.data() + n * O * P, O, P).noalias() =
          wmat * Strided(cols->data() + n * P, CKK, P, Eigen::OuterStride<>(N * P));
  } else {
    RowMatrix<Scalar> prod = wmat * (*cols);
    for (Index n = 0; n < N; ++n) out.matrix(N * O, P).middleRows(n * O, O) = prod.middleCols(n * P, P);
  }

  auto in_node = input.node();
  auto w_node = weight.node();
  return record<Scalar>(std::move(out), {input, weight}, [=](Node<Scalar>& self) {
    Node<Scalar>* wn = recorded(self, w_node);
    Node<Scalar>* xn = recorded(self, in_node);
    const auto w = w_node->value.matrix(O, CKK);
    if (per_image) {
      RowMatrix<Scalar> dcols;
      for (Index n = 0; n < N; ++n) {
        const auto gy = ConstRowMatrixMap<Scalar>(self.grad.data() + n * O * P, O, P);
        const Strided cn(cols->data() + n * P, CKK, P, Eigen::OuterStride<>(N * P));
        if (wn) wn->grad_buffer().matrix(O, CKK).noalias() += gy * cn.transpose();
        if (xn) {
          dcols.noalias() = w.transpose() * gy;
          col2im(dcols.data(), P, Index{1}, C, H, W, k, stride, padding, OH, OW,
                 xn->grad_buffer().data() + n * C * H * W);
        }
      }
      return;
    }
    RowMatrix<Scalar> gy(O, N * P);
    const auto g = self.grad.matrix(N * O, P);
    for (Index n = 0; n < N; ++n) gy.middleCols(n * P, P) = g.middleRows(n * O, O);
    if (wn) wn->grad_buffer().matrix(O, CKK).noalias() += gy * cols->transpose();
    if (xn) {
      RowMatrix<Scalar> dcols = w.transpose() * gy;
      col2im(dcols.data(), N * P, N, C, H, W, k, stride, padding, OH, OW, xn->grad_buffer().data());
    }
  });
}

template <typename Scalar>
Var<Scalar> add_channel_bias(const Var<Scalar>& input, const Var<Scalar>& bias) {
  require_rank(input, 4, "add_channel_bias");
  const Index N = input.dim(0), C = input.dim(1), S = input.dim(2) * input.dim(3);
  if (bias.value().size() != C)
    throw DimensionError("add_channel_bias: bias " + shape_string(bias.shape()) + " does not match input " +
                         shape_string(input.shape()));
  Tensor<Scalar> out = input.value();
  auto rows = out.matrix(N * C, S);
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) rows.row(n * C + c).array() += bias.value()[c];
  auto x_node = input.node(), b_node = bias.node();
  return record<Scalar>(std::move(out), {input, bias}, [=](Node<Scalar>& self) {
    const auto g = self.grad.matrix(N * C, S);
    if (Node<Scalar>* xn = recorded(self, x_node)) xn->grad_buffer().array() += self.grad.array();
    if (Node<Scalar>* bn = recorded(self, b_node)) {
      auto& gb = bn->grad_buffer();
      for (Index n = 0; n < N; ++n)
        for (Index c = 0; c < C; ++c) gb[c] += g.row(n * C + c).sum();
    }
  });
}

template <typename Scalar>
Var<Scalar> max_pool2d(const Var<Scalar>& input, int kernel, int stride, int padding) {
  require_rank(input, 4, "max_pool2d");
  const Index N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (kernel < 1 || stride < 1 || padding < 0 || H + 2 * padding < kernel || W + 2 * padding < kernel ||
      2 * padding > kernel)
    throw DimensionError("max_pool2d: invalid window for input " + shape_string(input.shape()));
  const Index OH = (H + 2 * padding - kernel) / stride + 1;
  const Index OW = (W + 2 * padding - kernel) / stride + 1;
  Tensor<Scalar> out(Shape{N, C, OH, OW});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.size()));
  const Scalar* x = input.value().data();
  Index o = 0;
  for (Index nc = 0; nc < N * C; ++nc)
    for (Index oy = 0; oy < OH; ++oy)
      for (Index ox = 0; ox < OW; ++ox, ++o) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        Index best_at = -1;
        for (int ki = 0; ki < kernel; ++ki) {
          const Index iy = oy * stride - padding + ki;
          if (iy < 0 || iy >= H) continue;
          for (int kj = 0; kj < kernel; ++kj) {
            const Index ix = ox * stride - padding + kj;
            if (ix < 0 || ix >= W) continue;
            const Index at = nc * H * W + iy * W + ix;
            if (x[at] > best) {
              best = x[at];
              best_at = at;
            }
          }
        }
        out[o] = best;
        (*argmax)[static_cast<std::size_t>(o)] = best_at;
      }
  return record<Scalar>(std::move(out), {input}, [argmax](Node<Scalar>& self) {
    auto& gx = parent_grad(self, 0);
    for (Index i = 0; i < self.grad.size(); ++i) gx[(*argmax)[static_cast<std::size_t>(i)]] += self.grad[i];
  });
}

template <typename Scalar>
Var<Scalar> batchnorm2d(const Var<Scalar>& input, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                        BatchNormState<Scalar>& state, NormMode mode) {
  require_rank(input, 4, "batchnorm2d");
  const Index N = input.dim(0), C = input.dim(1), S = input.dim(2) * input.dim(3);
  if (gamma.value().size() != C || beta.value().size() != C || state.running_mean.size() != C)
    throw DimensionError("batchnorm2d: per-channel parameters do not match input " + shape_string(input.shape()));
  if (mode == NormMode::train && N < 2)
    throw DimensionError("batchnorm2d: train mode needs batch size >= 2, got " + std::to_string(N));

  const Index M = N * S;
  const Scalar* x = input.value().data();
  ArrayX<Scalar> mean(C), inv_std(C);
  if (mode == NormMode::train) {
    ArrayX<Scalar> var(C);
    for (Index c = 0; c < C; ++c) {
      Scalar acc = 0;
      for (Index n = 0; n < N; ++n)
        acc += Eigen::Map<const ArrayX<Scalar>>(x + (n * C + c) * S, S).sum();
      const Scalar mu = acc / Scalar(M);
      Scalar sq = 0;
      for (Index n = 0; n < N; ++n)
        sq += (Eigen::Map<const ArrayX<Scalar>>(x + (n * C + c) * S, S) - mu).square().sum();
      mean[c] = mu;
      var[c] = sq / Scalar(M);
    }
    inv_std = (var + state.eps).rsqrt();
    const Scalar m = state.momentum;
    state.running_mean.array() = (Scalar(1) - m) * state.running_mean.array() + m * mean;
    state.running_var.array() = (Scalar(1) - m) * state.running_var.array() + m * var * (Scalar(M) / Scalar(M - 1));
  } else {
    mean = state.running_mean.array();
    inv_std = (state.running_var.array() + state.eps).rsqrt();
  }

  auto xhat = std::make_shared<Tensor<Scalar>>(input.shape());
  Tensor<Scalar> out(input.shape());
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) {
      const Index off = (n * C + c) * S;
      auto xh = Eigen::Map<ArrayX<Scalar>>(xhat->data() + off, S);
      xh = (Eigen::Map<const ArrayX<Scalar>>(x + off, S) - mean[c]) * inv_std[c];
      Eigen::Map<ArrayX<Scalar>>(out.data() + off, S) = xh * gamma.value()[c] + beta.value()[c];
    }

  auto in_node = input.node(), g_node = gamma.node(), b_node = beta.node();
  const bool train = mode == NormMode::train;
  return record<Scalar>(std::move(out), {input, gamma, beta}, [=](Node<Scalar>& self) {
    ArrayX<Scalar> sum_dy = ArrayX<Scalar>::Zero(C), sum_dy_xhat = ArrayX<Scalar>::Zero(C);
    for (Index n = 0; n < N; ++n)
      for (Index c = 0; c < C; ++c) {
        const Index off = (n * C + c) * S;
        auto dy = Eigen::Map<const ArrayX<Scalar>>(self.grad.data() + off, S);
        sum_dy[c] += dy.sum();
        sum_dy_xhat[c] += (dy * Eigen::Map<const ArrayX<Scalar>>(xhat->data() + off, S)).sum();
      }
    if (Node<Scalar>* gn = recorded(self, g_node)) gn->grad_buffer().array() += sum_dy_xhat;
    if (Node<Scalar>* bn = recorded(self, b_node)) bn->grad_buffer().array() += sum_dy;
    if (Node<Scalar>* xn = recorded(self, in_node)) {
      Scalar* dx = xn->grad_buffer().data();
      const auto& gam = g_node->value;
      for (Index n = 0; n < N; ++n)
        for (Index c = 0; c < C; ++c) {
          const Index off = (n * C + c) * S;
          auto dy = Eigen::Map<const ArrayX<Scalar>>(self.grad.data() + off, S);
          auto d = Eigen::Map<ArrayX<Scalar>>(dx + off, S);
          const Scalar scale_c = gam[c] * inv_std[c];
          if (train) {
            auto xh = Eigen::Map<const ArrayX<Scalar>>(xhat->data() + off, S);
            d += scale_c * (dy - sum_dy[c] / Scalar(M) - xh * (sum_dy_xhat[c] / Scalar(M)));
          } else {
            d += scale_c * dy;
          }
        }
    }
  });
}

template <typename Scalar>
Var<Scalar> activation(const Var<Scalar>& input, Activation kind) {
  const auto& x = input.value().array();
  Tensor<Scalar> out(input.shape());
  switch (kind) {
    case Activation::relu: out.array() = x.max(Scalar(0)); break;
    case Activation::sigmoid: out.array() = Scalar(1) / (Scalar(1) + (-x).exp()); break;
    case Activation::tanh: out.array() = x.tanh(); break;
  }
  return record<Scalar>(out, {input}, [kind](Node<Scalar>& self) {
    auto& gx = parent_grad(self, 0).array();
    const auto& y = self.value.array();
    const auto& gy = self.grad.array();
    switch (kind) {
      case Activation::relu: gx += (y > Scalar(0)).select(gy, Scalar(0)); break;
      case Activation::sigmoid: gx += gy * y * (Scalar(1) - y); break;
      case Activation::tanh: gx += gy * (Scalar(1) - y.square()); break;
    }
  });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& input, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  require_rank(input, 2, "linear");
  require_rank(weight, 2, "linear");
  const Index N = input.dim(0), F = input.dim(1), G = weight.dim(1);
  if (weight.dim(0) != F || (bias.defined() && bias.value().size() != G))
    throw DimensionError("linear: input " + shape_string(input.shape()) + " incompatible with weight " +
                         shape_string(weight.shape()) +
                         (bias.defined() ? " and bias " + shape_string(bias.shape()) : std::string()));
  Tensor<Scalar> out(Shape{N, G});
  out.matrix(N, G).noalias() = input.value().matrix(N, F) * weight.value().matrix(F, G);
  if (bias.defined()) out.matrix(N, G).rowwise() += bias.value().matrix(1, G).row(0);
  auto x_node = input.node(), w_node = weight.node();
  auto b_node = bias.defined() ? bias.node() : nullptr;
  return record<Scalar>(std::move(out), {input, weight, bias}, [=](Node<Scalar>& self) {
    const auto gy = self.grad.matrix(N, G);
    if (Node<Scalar>* xn = recorded(self, x_node))
      xn->grad_buffer().matrix(N, F).noalias() += gy * w_node->value.matrix(F, G).transpose();
    if (Node<Scalar>* wn = recorded(self, w_node))
      wn->grad_buffer().matrix(F, G).noalias() += x_node->value.matrix(N, F).transpose() * gy;
    if (b_node)
      if (Node<Scalar>* bn = recorded(self, b_node)) bn->grad_buffer().matrix(1, G) += gy.colwise().sum();
  });
}

template <typename Scalar>
Var<Scalar> global_max_pool(const Var<Scalar>& input) {
  require_rank(input, 4, "global_max_pool");
  const Index N = input.dim(0), C = input.dim(1), S = input.dim(2) * input.dim(3);
  if (S < 1) throw DimensionError("global_max_pool: empty spatial extent");
  Tensor<Scalar> out(Shape{N, C});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(N * C));
  const Scalar* x = input.value().data();
  for (Index i = 0; i < N * C; ++i) {
    Index best = 0;
    for (Index j = 1; j < S; ++j)
      if (x[i * S + j] > x[i * S + best]) best = j;
    out[i] = x[i * S + best];
    (*argmax)[static_cast<std::size_t>(i)] = i * S + best;
  }
  return record<Scalar>(std::move(out), {input}, [argmax](Node<Scalar>& self) {
    auto& gx = parent_grad(self, 0);
    for (Index i = 0; i < self.grad.size(); ++i) gx[(*argmax)[static_cast<std::size_t>(i)]] += self.grad[i];
  });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& input) {
  require_rank(input, 4, "global_avg_pool");
  const Index N = input.dim(0), C = input.dim(1), S = input.dim(2) * input.dim(3);
  Tensor<Scalar> out(Shape{N, C});
  out.array() = input.value().matrix(N * C, S).rowwise().mean().array();
  return record<Scalar>(std::move(out), {input}, [N, C, S](Node<Scalar>& self) {
    auto gx = parent_grad(self, 0).matrix(N * C, S);
    gx.colwise() += (self.grad.array() / Scalar(S)).matrix();
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  Tensor<Scalar> out(a.shape(), (a.value().array() + b.value().array()).eval());
  auto a_node = a.node(), b_node = b.node();
  return record<Scalar>(std::move(out), {a, b}, [a_node, b_node](Node<Scalar>& self) {
    if (Node<Scalar>* an = recorded(self, a_node)) an->grad_buffer().array() += self.grad.array();
    if (Node<Scalar>* bn = recorded(self, b_node)) bn->grad_buffer().array() += self.grad.array();
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  Tensor<Scalar> out(a.shape(), (a.value().array() * b.value().array()).eval());
  auto a_node = a.node(), b_node = b.node();
  return record<Scalar>(std::move(out), {a, b}, [a_node, b_node](Node<Scalar>& self) {
    if (Node<Scalar>* an = recorded(self, a_node)) an->grad_buffer().array() += self.grad.array() * b_node->value.array();
    if (Node<Scalar>* bn = recorded(self, b_node)) bn->grad_buffer().array() += self.grad.array() * a_node->value.array();
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape(), (a.value().array() * factor).eval());
  return record<Scalar>(std::move(out), {a}, [factor](Node<Scalar>& self) {
    parent_grad(self, 0).array() += self.grad.array() * factor;
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Tensor<Scalar> out(Shape{}, a.value().array().sum());
  return record<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    parent_grad(self, 0).array() += self.grad[0];
  });
}

template <typename Scalar>
Var<Scalar> concat_columns(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_rank(a, 2, "concat_columns");
  require_rank(b, 2, "concat_columns");
  const Index N = a.dim(0), F1 = a.dim(1), F2 = b.dim(1);
  if (b.dim(0) != N)
    throw DimensionError("concat_columns: row counts differ: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  Tensor<Scalar> out(Shape{N, F1 + F2});
  out.matrix(N, F1 + F2).leftCols(F1) = a.value().matrix(N, F1);
  out.matrix(N, F1 + F2).rightCols(F2) = b.value().matrix(N, F2);
  auto a_node = a.node(), b_node = b.node();
  return record<Scalar>(std::move(out), {a, b}, [=](Node<Scalar>& self) {
    const auto g = self.grad.matrix(N, F1 + F2);
    if (Node<Scalar>* an = recorded(self, a_node)) an->grad_buffer().matrix(N, F1) += g.leftCols(F1);
    if (Node<Scalar>* bn = recorded(self, b_node)) bn->grad_buffer().matrix(N, F2) += g.rightCols(F2);
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  Tensor<Scalar> out = a.value().reshaped(std::move(shape));
  return record<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    parent_grad(self, 0).array() += self.grad.array();
  });
}

template <typename Scalar>
Var<Scalar> binary_cross_entropy(const Var<Scalar>& probs, const Tensor<Scalar>& targets) {
  if (probs.value().size() != targets.size())
    throw DimensionError("binary_cross_entropy: " + shape_string(probs.shape()) + " probabilities vs " +
                         shape_string(targets.shape()) + " targets");
  constexpr Scalar lo = Scalar(1e-7), hi = Scalar(1) - Scalar(1e-7);
  const ArrayX<Scalar> p = probs.value().array().max(lo).min(hi);
  const auto& y = targets.array();
  const Scalar loss = -(y * p.log() + (Scalar(1) - y) * (Scalar(1) - p).log()).sum();
  auto t = std::make_shared<ArrayX<Scalar>>(y);
  return record<Scalar>(Tensor<Scalar>(Shape{}, loss), {probs}, [t, lo, hi](Node<Scalar>& self) {
    const auto& raw = self.parents[0]->value.array();
    const ArrayX<Scalar> pc = raw.max(lo).min(hi);
    const ArrayX<Scalar> d = (pc - *t) / (pc * (Scalar(1) - pc));
    parent_grad(self, 0).array() += self.grad[0] * (raw == pc).select(d, Scalar(0));
  });
}

#define GMIC_INSTANTIATE_AUTODIFF(T)                                                                        \
  template Var<T> record(Tensor<T>, std::vector<Var<T>>, std::function<void(Node<T>&)>);                    \
  template Graph<T> topological_order(const Var<T>&);                                                       \
  template void backward(const Var<T>&);                                                                    \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, int, int);                                           \
  template Var<T> max_pool2d(const Var<T>&, int, int, int);                                                 \
  template Var<T> add_channel_bias(const Var<T>&, const Var<T>&);                                           \
  template Var<T> batchnorm2d(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormState<T>&, NormMode);   \
  template Var<T> activation(const Var<T>&, Activation);                                                    \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                      \
  template Var<T> global_max_pool(const Var<T>&);                                                           \
  template Var<T> global_avg_pool(const Var<T>&);                                                           \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> scale(const Var<T>&, T);                                                                  \
  template Var<T> sum(const Var<T>&);                                                                       \
  template Var<T> concat_columns(const Var<T>&, const Var<T>&);                                             \
  template Var<T> reshape(const Var<T>&, Shape);                                                            \
  template Var<T> binary_cross_entropy(const Var<T>&, const Tensor<T>&);

GMIC_INSTANTIATE_AUTODIFF(float)
GMIC_INSTANTIATE_AUTODIFF(double)

}  // namespace gmic
