#pragma once

#include <cstddef>

#include "lmunet/tensor.hpp"

// Pure tensor kernels. Forward functions never mutate their inputs; backward
// functions accumulate (+=) into whichever gradient buffers are non-null, which
// must already have the shape of the matching input.
namespace lmunet::ops {

enum class Activation { SiLU, ReLU, Softplus, SoftmaxChannel };

enum class ChannelAxis { Leading, Trailing };

enum class Elementwise { Add, Hadamard, ScaleByChannelVector };

// y[..., o] = sum_i x[..., i] * w[o, i] (+ b[o])
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b = nullptr);
template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, Tensor<T>* gx,
                     Tensor<T>* gw, Tensor<T>* gb);

// Depthwise cross-correlation over 1-3 spatial axes: x (C, s...), k (C, k...).
template <typename T>
Tensor<T> dwconv(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>* b, std::size_t stride,
                 std::size_t padding);
template <typename T>
void dwconv_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& gy, std::size_t stride,
                     std::size_t padding, Tensor<T>* gx, Tensor<T>* gk, Tensor<T>* gb);

// Dense cross-correlation, stride 1: x (Cin, s...), w (Cout, Cin, k...).
template <typename T>
Tensor<T> conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, std::size_t padding);
template <typename T>
void conv_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, std::size_t padding,
                   Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb);

// 1x1(x1) convolution: x (Cin, s...), w (Cout, Cin).
template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b = nullptr);
template <typename T>
void pointwise_conv_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy,
                             Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb);

// Depthwise convolution along the token axis of an (L, C) sequence with
// left (causal) zero padding of width-1: y[t, c] = sum_j k[c, j] x[t - W + 1 + j, c].
template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>* b);
template <typename T>
void causal_conv1d_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& gy,
                            Tensor<T>* gx, Tensor<T>* gk, Tensor<T>* gb);

// Normalization over the trailing axis with biased variance.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps);
template <typename T>
void layernorm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& gy, double eps,
                        Tensor<T>* gx, Tensor<T>* ggamma, Tensor<T>* gbeta);

// SoftmaxChannel normalizes over the leading (channel) axis of a (C, s...) map.
template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x);
template <typename T>
void activation_backward(Activation kind, const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& gy,
                         Tensor<T>& gx);

// Softmax over the trailing axis (rows of a matrix).
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x);
template <typename T>
void maxpool2_backward(const Tensor<T>& x, const Tensor<T>& gy, Tensor<T>& gx);

// Linear interpolation to twice the extent on every spatial axis (rank 2 or 3),
// half-pixel centers, clamped at the borders.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x);
template <typename T>
void upsample2x_backward(const Shape& x_shape, const Tensor<T>& gy, Tensor<T>& gx);

template <typename T>
Tensor<T> elementwise(Elementwise kind, const Tensor<T>& a, const Tensor<T>& b,
                      ChannelAxis axis = ChannelAxis::Trailing);
template <typename T>
void elementwise_backward(Elementwise kind, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& gy,
                          ChannelAxis axis, Tensor<T>* ga, Tensor<T>* gb);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(Elementwise::Add, a, b);
}
template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(Elementwise::Hadamard, a, b);
}
template <typename T>
Tensor<T> scale_by_channel_vector(const Tensor<T>& x, const Tensor<T>& s,
                                  ChannelAxis axis = ChannelAxis::Trailing) {
  return elementwise(Elementwise::ScaleByChannelVector, x, s, axis);
}

// (C, s...) -> (L, C) with row-major spatial order, and its inverse.
template <typename T>
Tensor<T> flatten_spatial(const Tensor<T>& x);
template <typename T>
Tensor<T> unflatten_spatial(const Tensor<T>& x, const Shape& spatial);
// (A, B) -> (B, A)
template <typename T>
Tensor<T> transpose_lc(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

}  // namespace lmunet::ops
