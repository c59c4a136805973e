// Define-by-run reverse-mode differentiation over Tensor values.
//
// Every op returns a Var whose node remembers its inputs and a backward rule.
// backward(loss) sorts the reachable nodes topologically, runs each rule once
// in reverse order and then releases the recorded graph.
#pragma once

#include "gmic/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace gmic {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  /// Gradient buffer, zero-initialised to the value's shape on first use.
  Tensor<Scalar>& grad_buffer() {
    if (!has_grad()) grad = Tensor<Scalar>::zeros(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.shape() == value.shape() && grad.size() == value.size(); }
};

template <typename Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false) : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<Scalar>& value() const { return node_->value; }
  /// Mutable access for optimizers and initialisers; never call while a graph is live.
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(Index axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return node_->has_grad(); }
  const Tensor<Scalar>& grad() const { return node_->grad; }
  Tensor<Scalar>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<Scalar>(); }

  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// While alive, ops on this thread record no graph (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(enabled()) { enabled() = false; }
  ~NoGradGuard() { enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool& enabled() {
    thread_local bool grad_enabled = true;
    return grad_enabled;
  }

 private:
  bool previous_;
};

template <typename Scalar>
Var<Scalar> parameter(Tensor<Scalar> value) {
  return Var<Scalar>(std::move(value), true);
}

template <typename Scalar>
Var<Scalar> constant(Tensor<Scalar> value) {
  return Var<Scalar>(std::move(value), false);
}

/// Record an op result. The backward rule receives the output node and must
/// accumulate into the grad buffers of parents that require gradients.
template <typename Scalar>
Var<Scalar> record(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs, std::function<void(Node<Scalar>&)> rule);

/// Nodes reachable from `root` that carry gradients, in topological order.
template <typename Scalar>
using Graph = std::vector<std::shared_ptr<Node<Scalar>>>;

template <typename Scalar>
Graph<Scalar> topological_order(const Var<Scalar>& root);

/// Populate grads of every requires_grad leaf reachable from a scalar loss.
template <typename Scalar>
void backward(const Var<Scalar>& loss);

// ---------------------------------------------------------------------------
// Ops

enum class Activation { relu, sigmoid, tanh };
enum class NormMode { train, eval };

template <typename Scalar>
struct BatchNormState {
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);

  explicit BatchNormState(Index channels = 0)
      : running_mean(Shape{channels}, Scalar(0)), running_var(Shape{channels}, Scalar(1)) {}
};

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& weight, int stride, int padding);

/// x [N,C,H,W] + b [C] broadcast over batch and space.
template <typename Scalar>
Var<Scalar> add_channel_bias(const Var<Scalar>& input, const Var<Scalar>& bias);

template <typename Scalar>
Var<Scalar> max_pool2d(const Var<Scalar>& input, int kernel, int stride, int padding);

template <typename Scalar>
Var<Scalar> batchnorm2d(const Var<Scalar>& input, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                        BatchNormState<Scalar>& state, NormMode mode);

template <typename Scalar>
Var<Scalar> activation(const Var<Scalar>& input, Activation kind);

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) { return activation(x, Activation::relu); }
template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) { return activation(x, Activation::sigmoid); }
template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& x) { return activation(x, Activation::tanh); }

/// [N,F] x [F,G] (+ [G]) -> [N,G]. Pass an undefined Var for no bias.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& input, const Var<Scalar>& weight, const Var<Scalar>& bias = {});

/// [N,C,H,W] -> [N,C]; gradient goes to the first row-major maximum.
template <typename Scalar>
Var<Scalar> global_max_pool(const Var<Scalar>& input);

/// [N,C,H,W] -> [N,C]
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& input);

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor);

/// Sum of all entries as a rank-0 tensor.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a);

/// [N,F1], [N,F2] -> [N,F1+F2]
template <typename Scalar>
Var<Scalar> concat_columns(const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape);

/// Summed binary cross-entropy of probabilities against fixed {0,1} targets.
/// Probabilities are clamped to [1e-7, 1 - 1e-7].
template <typename Scalar>
Var<Scalar> binary_cross_entropy(const Var<Scalar>& probs, const Tensor<Scalar>& targets);

}  // namespace gmic
