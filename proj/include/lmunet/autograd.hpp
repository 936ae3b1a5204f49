#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lmunet/ops.hpp"
#include "lmunet/tensor.hpp"

// Reverse-mode differentiation over a recorded operation tape. A Var is a
// shared handle to a value plus (for leaves and recorded results) its
// gradient. Operations whose inputs carry no gradient-tracking Var are not
// recorded, so inference runs through the same code without a tape.
namespace lmunet::ad {

template <typename T>
class Tape;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool leaf = false;
  Tape<T>* tape = nullptr;
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  /// Value that never receives a gradient.
  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  explicit operator bool() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  const Tensor<T>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tape<T>* tape() const { return node_ ? node_->tape : nullptr; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;
  // grads[i] is null when input i does not require a gradient.
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, std::span<Tensor<T>* const> grads)>;

  struct Record {
    std::string op;
    std::vector<NodePtr> inputs;
    NodePtr output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true);

  void record(std::string op, std::vector<NodePtr> inputs, const NodePtr& output, BackwardFn fn);

  /// Accumulates d(loss)/d(leaf) into every gradient-tracking leaf. The tape
  /// is consumed: saved intermediates are released and a second call throws.
  void backward(const Var<T>& loss);

  const std::vector<Record>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<Record> records_;
  std::vector<NodePtr> leaves_;
  bool consumed_ = false;
};

/// Wraps a computed value as the result of `op`. Records a backward rule on
/// the inputs' tape when any input requires a gradient.
template <typename T>
Var<T> make_result(std::string op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                   typename Tape<T>::BackwardFn fn);

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = {});
template <typename T>
Var<T> dwconv(const Var<T>& x, const Var<T>& k, const Var<T>& b, std::size_t stride, std::size_t padding);
template <typename T>
Var<T> conv(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t padding);
template <typename T>
Var<T> pointwise_conv(const Var<T>& x, const Var<T>& w, const Var<T>& b = {});
template <typename T>
Var<T> causal_conv1d(const Var<T>& x, const Var<T>& k, const Var<T>& b = {});
template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps);
template <typename T>
Var<T> activation(ops::Activation kind, const Var<T>& x);
template <typename T>
Var<T> silu(const Var<T>& x) {
  return activation(ops::Activation::SiLU, x);
}
template <typename T>
Var<T> relu(const Var<T>& x) {
  return activation(ops::Activation::ReLU, x);
}
template <typename T>
Var<T> softplus(const Var<T>& x) {
  return activation(ops::Activation::Softplus, x);
}
template <typename T>
Var<T> maxpool2(const Var<T>& x);
template <typename T>
Var<T> upsample2x(const Var<T>& x);
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale_by_channel_vector(const Var<T>& x, const Var<T>& s,
                               ops::ChannelAxis axis = ops::ChannelAxis::Trailing);
template <typename T>
Var<T> flatten_spatial(const Var<T>& x);
template <typename T>
Var<T> unflatten_spatial(const Var<T>& x, const Shape& spatial);
template <typename T>
Var<T> transpose_lc(const Var<T>& x);
template <typename T>
Var<T> sum(const Var<T>& x);
/// Columns [begin, end) of the trailing axis.
template <typename T>
Var<T> slice_last(const Var<T>& x, std::size_t begin, std::size_t end);

}  // namespace lmunet::ad
