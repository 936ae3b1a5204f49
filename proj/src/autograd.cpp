#include "lmunet/autograd.hpp"

namespace lmunet::ad {

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  if (consumed_) throw StateError("tape already consumed by backward");
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->leaf = true;
  n->tape = this;
  if (requires_grad) leaves_.push_back(n);
  return Var<T>(std::move(n));
}

template <typename T>
void Tape<T>::record(std::string op, std::vector<NodePtr> inputs, const NodePtr& output, BackwardFn fn) {
  if (consumed_) throw StateError("cannot record '" + op + "' on a consumed tape");
  records_.push_back(Record{std::move(op), std::move(inputs), output, std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (consumed_) throw StateError("backward called on a consumed tape");
  if (!loss || loss.value().numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss ? shape_str(loss.shape()) : std::string("<empty>")));
  }
  for (auto& l : leaves_) {
    if (l->grad.shape() != l->value.shape()) l->grad = Tensor<T>(l->value.shape());
  }
  if (loss.requires_grad()) {
    if (loss.tape() != this) throw StateError("loss was not recorded on this tape");
    auto& g = loss.node()->grad;
    if (g.empty()) g = Tensor<T>(loss.shape());
    g[0] += T(1);
  }
  std::vector<Tensor<T>*> grads;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    auto& rec = *it;
    if (rec.output->grad.empty()) continue;
    grads.assign(rec.inputs.size(), nullptr);
    for (std::size_t i = 0; i < rec.inputs.size(); ++i) {
      auto& in = rec.inputs[i];
      if (!in || !in->requires_grad) continue;
      if (in->grad.empty()) in->grad = Tensor<T>(in->value.shape());
      grads[i] = &in->grad;
    }
    rec.backward(rec.output->grad, grads);
    if (!rec.output->leaf) rec.output->grad = Tensor<T>();
  }
  records_.clear();
  consumed_ = true;
}

template <typename T>
Var<T> make_result(std::string op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                   typename Tape<T>::BackwardFn fn) {
  Tape<T>* tape = nullptr;
  for (const auto& in : inputs) {
    if (!in.requires_grad()) continue;
    if (tape && in.tape() != tape) throw StateError("'" + op + "' mixes variables from different tapes");
    tape = in.tape();
  }
  auto out = std::make_shared<Node<T>>();
  out->value = std::move(value);
  if (tape) {
    out->requires_grad = true;
    out->tape = tape;
    std::vector<std::shared_ptr<Node<T>>> nodes;
    nodes.reserve(inputs.size());
    for (const auto& in : inputs) nodes.push_back(in.node());
    tape->record(std::move(op), std::move(nodes), out, std::move(fn));
  }
  return Var<T>(std::move(out));
}

namespace {

template <typename T>
const Tensor<T>* opt(const Var<T>& v) {
  return v ? &v.value() : nullptr;
}

}  // namespace

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return make_result<T>("linear", ops::linear(x.value(), w.value(), opt(b)), {x, w, b},
                        [x, w](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          ops::linear_backward(x.value(), w.value(), g, gr[0], gr[1], gr[2]);
                        });
}

template <typename T>
Var<T> dwconv(const Var<T>& x, const Var<T>& k, const Var<T>& b, std::size_t stride, std::size_t padding) {
  return make_result<T>("dwconv", ops::dwconv(x.value(), k.value(), opt(b), stride, padding), {x, k, b},
                        [x, k, stride, padding](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          ops::dwconv_backward(x.value(), k.value(), g, stride, padding, gr[0], gr[1], gr[2]);
                        });
}

template <typename T>
Var<T> conv(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t padding) {
  return make_result<T>("conv", ops::conv(x.value(), w.value(), opt(b), padding), {x, w, b},
                        [x, w, padding](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          ops::conv_backward(x.value(), w.value(), g, padding, gr[0], gr[1], gr[2]);
                        });
}

template <typename T>
Var<T> pointwise_conv(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return make_result<T>("pointwise_conv", ops::pointwise_conv(x.value(), w.value(), opt(b)), {x, w, b},
                        [x, w](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          ops::pointwise_conv_backward(x.value(), w.value(), g, gr[0], gr[1], gr[2]);
                        });
}

template <typename T>
Var<T> causal_conv1d(const Var<T>& x, const Var<T>& k, const Var<T>& b) {
  return make_result<T>("causal_conv1d", ops::causal_conv1d(x.value(), k.value(), opt(b)), {x, k, b},
                        [x, k](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          ops::causal_conv1d_backward(x.value(), k.value(), g, gr[0], gr[1], gr[2]);
                        });
}

template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
  return make_result<T>("layernorm", ops::layernorm(x.value(), gamma.value(), beta.value(), eps),
                        {x, gamma, beta},
                        [x, gamma, eps](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          ops::layernorm_backward(x.value(), gamma.value(), g, eps, gr[0], gr[1], gr[2]);
                        });
}

template <typename T>
Var<T> activation(ops::Activation kind, const Var<T>& x) {
  auto y = ops::activation(kind, x.value());
  // Softmax needs its own output for the backward rule; the others only need x.
  Tensor<T> saved = kind == ops::Activation::SoftmaxChannel && x.requires_grad() ? y : Tensor<T>();
  return make_result<T>("activation", std::move(y), {x},
                        [x, kind, saved = std::move(saved)](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          ops::activation_backward(kind, x.value(), saved, g, *gr[0]);
                        });
}

template <typename T>
Var<T> maxpool2(const Var<T>& x) {
  return make_result<T>("maxpool2", ops::maxpool2(x.value()), {x},
                        [x](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          ops::maxpool2_backward(x.value(), g, *gr[0]);
                        });
}

template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  return make_result<T>("upsample2x", ops::upsample2x(x.value()), {x},
                        [shape = x.shape()](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          ops::upsample2x_backward(shape, g, *gr[0]);
                        });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return make_result<T>("add", ops::add(a.value(), b.value()), {a, b},
                        [](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          for (std::size_t i = 0; i < g.numel(); ++i) {
                            if (gr[0]) (*gr[0])[i] += g[i];
                            if (gr[1]) (*gr[1])[i] += g[i];
                          }
                        });
}

template <typename T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b) {
  return make_result<T>("hadamard", ops::hadamard(a.value(), b.value()), {a, b},
                        [a, b](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          ops::elementwise_backward(ops::Elementwise::Hadamard, a.value(), b.value(), g,
                                                    ops::ChannelAxis::Trailing, gr[0], gr[1]);
                        });
}

template <typename T>
Var<T> scale_by_channel_vector(const Var<T>& x, const Var<T>& s, ops::ChannelAxis axis) {
  return make_result<T>("scale_by_channel_vector", ops::scale_by_channel_vector(x.value(), s.value(), axis),
                        {x, s}, [x, s, axis](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          ops::elementwise_backward(ops::Elementwise::ScaleByChannelVector, x.value(), s.value(),
                                                    g, axis, gr[0], gr[1]);
                        });
}

template <typename T>
Var<T> flatten_spatial(const Var<T>& x) {
  return make_result<T>("flatten_spatial", ops::flatten_spatial(x.value()), {x},
                        [spatial = spatial_of(x.value())](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          auto back = ops::unflatten_spatial(g, spatial);
                          for (std::size_t i = 0; i < back.numel(); ++i) (*gr[0])[i] += back[i];
                        });
}

template <typename T>
Var<T> unflatten_spatial(const Var<T>& x, const Shape& spatial) {
  return make_result<T>("unflatten_spatial", ops::unflatten_spatial(x.value(), spatial), {x},
                        [](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          auto back = ops::flatten_spatial(g);
                          for (std::size_t i = 0; i < back.numel(); ++i) (*gr[0])[i] += back[i];
                        });
}

template <typename T>
Var<T> transpose_lc(const Var<T>& x) {
  return make_result<T>("transpose_lc", ops::transpose_lc(x.value()), {x},
                        [](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          auto back = ops::transpose_lc(g);
                          for (std::size_t i = 0; i < back.numel(); ++i) (*gr[0])[i] += back[i];
                        });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  return make_result<T>("sum", ops::sum(x.value()), {x}, [](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
    const T go = g[0];
    for (auto& v : gr[0]->data()) v += go;
  });
}

template <typename T>
Var<T> slice_last(const Var<T>& x, std::size_t begin, std::size_t end) {
  const auto& xs = x.shape();
  if (xs.empty() || begin >= end || end > xs.back()) {
    throw DimensionError("slice_last: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside trailing axis of " + shape_str(xs));
  }
  const std::size_t C = xs.back(), W = end - begin, rows = x.value().numel() / C;
  Shape out_shape = xs;
  out_shape.back() = W;
  Tensor<T> y(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < W; ++j) y[r * W + j] = x.value()[r * C + begin + j];
  return make_result<T>("slice_last", std::move(y), {x},
                        [C, W, rows, begin](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < W; ++j) (*gr[0])[r * C + begin + j] += g[r * W + j];
                        });
}

#define LMUNET_INSTANTIATE_AD(T)                                                                            \
  template class Tape<T>;                                                                                   \
  template Var<T> make_result(std::string, Tensor<T>, std::initializer_list<Var<T>>,                       \
                              typename Tape<T>::BackwardFn);                                                \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                      \
  template Var<T> dwconv(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t);            \
  template Var<T> conv(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t);                           \
  template Var<T> pointwise_conv(const Var<T>&, const Var<T>&, const Var<T>&);                              \
  template Var<T> causal_conv1d(const Var<T>&, const Var<T>&, const Var<T>&);                               \
  template Var<T> layernorm(const Var<T>&, const Var<T>&, const Var<T>&, double);                           \
  template Var<T> activation(ops::Activation, const Var<T>&);                                               \
  template Var<T> maxpool2(const Var<T>&);                                                                  \
  template Var<T> upsample2x(const Var<T>&);                                                                \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> hadamard(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> scale_by_channel_vector(const Var<T>&, const Var<T>&, ops::ChannelAxis);                  \
  template Var<T> flatten_spatial(const Var<T>&);                                                           \
  template Var<T> unflatten_spatial(const Var<T>&, const Shape&);                                           \
  template Var<T> transpose_lc(const Var<T>&);                                                              \
  template Var<T> sum(const Var<T>&);                                                                       \
  template Var<T> slice_last(const Var<T>&, std::size_t, std::size_t);

LMUNET_INSTANTIATE_AD(float)
LMUNET_INSTANTIATE_AD(double)

}  // namespace lmunet::ad
