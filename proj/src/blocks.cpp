#include "lmunet/blocks.hpp"

#include <Eigen/Core>
#include <cmath>

#include "lmunet/flops.hpp"
#include "lmunet/ssm.hpp"

namespace lmunet::blocks {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using HeadMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutHeadMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

// Scaled dot-product attention over pre-projected q, k, v (L, C), split into
// `heads` contiguous column groups.
template <typename T>
Var<T> attention_core(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads) {
  const std::size_t L = q.shape()[0], C = q.shape()[1], dh = C / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const bool track = q.requires_grad() || k.requires_grad() || v.requires_grad();
  auto probs = std::make_shared<std::vector<RowMat<T>>>();
  Tensor<T> out(Shape{L, C});
  for (std::size_t h = 0; h < heads; ++h) {
    HeadMap<T> qh(q.value().ptr() + h * dh, L, dh, Eigen::OuterStride<>(C));
    HeadMap<T> kh(k.value().ptr() + h * dh, L, dh, Eigen::OuterStride<>(C));
    HeadMap<T> vh(v.value().ptr() + h * dh, L, dh, Eigen::OuterStride<>(C));
    RowMat<T> s = (qh * kh.transpose()) * scale;
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const T mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp().matrix();
      s.row(r) /= s.row(r).sum();
    }
    MutHeadMap<T>(out.ptr() + h * dh, L, dh, Eigen::OuterStride<>(C)).noalias() = s * vh;
    if (track) probs->push_back(std::move(s));
  }
  flops::add_macs(2 * L * L * C);
  flops::add_other(heads * L * L * (flops::kElementwiseFlops + flops::kActivationFlopsPerElement));

  return ad::make_result<T>(
      "attention", std::move(out), {q, k, v},
      [q, k, v, heads, scale, probs](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
        const std::size_t L = q.shape()[0], C = q.shape()[1], dh = C / heads;
        for (std::size_t h = 0; h < heads; ++h) {
          const auto& p = (*probs)[h];
          HeadMap<T> qh(q.value().ptr() + h * dh, L, dh, Eigen::OuterStride<>(C));
          HeadMap<T> kh(k.value().ptr() + h * dh, L, dh, Eigen::OuterStride<>(C));
          HeadMap<T> vh(v.value().ptr() + h * dh, L, dh, Eigen::OuterStride<>(C));
          HeadMap<T> gh(g.ptr() + h * dh, L, dh, Eigen::OuterStride<>(C));
          if (gr[2]) MutHeadMap<T>(gr[2]->ptr() + h * dh, L, dh, Eigen::OuterStride<>(C)).noalias() += p.transpose() * gh;
          RowMat<T> dp = gh * vh.transpose();
          const Eigen::Matrix<T, Eigen::Dynamic, 1> dot = (dp.array() * p.array()).rowwise().sum();
          RowMat<T> ds = (p.array() * (dp.colwise() - dot).array()).matrix() * scale;
          if (gr[0]) MutHeadMap<T>(gr[0]->ptr() + h * dh, L, dh, Eigen::OuterStride<>(C)).noalias() += ds * kh;
          if (gr[1]) MutHeadMap<T>(gr[1]->ptr() + h * dh, L, dh, Eigen::OuterStride<>(C)).noalias() += ds.transpose() * qh;
        }
      });
}

void require_sequence(const Shape& s, std::size_t channels, const char* what) {
  if (s.size() != 2 || s[1] != channels) {
    throw DimensionError(std::string(what) + ": expected an (L, " + std::to_string(channels) + ") sequence, got " +
                         shape_str(s));
  }
}

}  // namespace

template <typename T>
Var<T> vss_forward(const Var<T>& x, const VssWeights<T>& w) {
  require_sequence(x.shape(), w.in1_w.shape()[1], "vss_forward");
  const std::size_t N = w.a_log.shape()[1];
  auto z = ad::silu(ad::causal_conv1d(ad::linear(x, w.in1_w, w.in1_b), w.conv_k, w.conv_b));
  auto delta = ad::softplus(ad::linear(ad::linear(z, w.dt_down), w.dt_up, w.dt_bias));
  auto bc = ad::linear(z, w.w_bc);
  auto y = ad::selective_scan(z, delta, w.a_log, ad::slice_last(bc, 0, N), ad::slice_last(bc, N, 2 * N), w.d_skip);
  auto w1 = ad::layernorm(y, w.norm_g, w.norm_b, kNormEps);
  auto w2 = ad::silu(ad::linear(x, w.in2_w, w.in2_b));
  return ad::linear(ad::hadamard(w1, w2), w.out_w, w.out_b);
}

template <typename T>
Var<T> conv3_block_forward(const Var<T>& x, const Conv3Weights<T>& w, const Shape& spatial) {
  require_sequence(x.shape(), w.w.shape()[0], "conv3_block_forward");
  const auto& ks = w.w.shape();
  return ad::flatten_spatial(ad::conv(ad::unflatten_spatial(x, spatial), w.w, w.b, ks.back() / 2));
}

template <typename T>
Var<T> self_attention_forward(const Var<T>& x, const AttentionWeights<T>& w) {
  const std::size_t C = w.wq.shape()[0];
  require_sequence(x.shape(), C, "self_attention_forward");
  if (x.shape()[0] == 0) throw DimensionError("self_attention_forward: empty sequence");
  if (w.heads == 0 || C % w.heads != 0) {
    throw ConfigError("self_attention_forward: " + std::to_string(C) + " channels not divisible by " +
                      std::to_string(w.heads) + " heads");
  }
  auto o = attention_core(ad::linear(x, w.wq), ad::linear(x, w.wk), ad::linear(x, w.wv), w.heads);
  return ad::linear(o, w.wo);
}

template <typename T>
Var<T> rvm_forward(const Var<T>& m, const RvmWeights<T>& w, Residual residual, const Shape& spatial) {
  auto n1 = ad::layernorm(m, w.norm1_g, w.norm1_b, kNormEps);
  Var<T> mixed;
  switch (w.mixer) {
    case Mixer::Vss:
      mixed = vss_forward(n1, w.vss);
      break;
    case Mixer::Conv3:
      mixed = conv3_block_forward(n1, w.conv3, spatial);
      break;
    case Mixer::SelfAttention:
      mixed = self_attention_forward(n1, w.attn);
      break;
  }
  Var<T> merged;
  switch (residual) {
    case Residual::Scaled:
      if (!w.scale) throw ConfigError("rvm_forward: scaled residual requires an adjustment factor");
      merged = ad::add(mixed, ad::scale_by_channel_vector(m, w.scale));
      break;
    case Residual::Identity:
      merged = ad::add(mixed, m);
      break;
    case Residual::None:
      merged = mixed;
      break;
  }
  return ad::linear(ad::layernorm(merged, w.norm2_g, w.norm2_b, kNormEps), w.proj);
}

template <typename T>
Var<T> encoder_block_forward(const Var<T>& f, const std::vector<RvmWeights<T>>& layers, Residual residual) {
  if (f.shape().size() < 2) throw DimensionError("encoder block: expected (C, spatial...), got " + shape_str(f.shape()));
  const Shape spatial(f.shape().begin() + 1, f.shape().end());
  for (auto e : spatial) {
    if (e % 2 != 0) throw DimensionError("encoder block: odd spatial extent in " + shape_str(f.shape()));
  }
  if (layers.empty()) throw ConfigError("encoder block: needs at least one RVM layer");
  const std::size_t C = f.shape()[0];
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& ps = layers[i].proj.shape();
    const std::size_t want = i + 1 == layers.size() ? 2 * C : C;
    if (ps != Shape{want, C}) {
      throw ConfigError("encoder block: layer " + std::to_string(i) + " projection " + shape_str(ps) +
                        " (only the last layer doubles " + std::to_string(C) + " channels)");
    }
  }
  auto m = ad::flatten_spatial(f);
  for (const auto& layer : layers) m = rvm_forward(m, layer, residual, spatial);
  return ad::maxpool2(ad::unflatten_spatial(m, spatial));
}

template <typename T>
Var<T> bottleneck_forward(const Var<T>& f, const std::vector<RvmWeights<T>>& layers, Residual residual) {
  if (layers.size() != kBottleneckLayers) {
    throw ConfigError("bottleneck: expected " + std::to_string(kBottleneckLayers) + " RVM layers, got " +
                      std::to_string(layers.size()));
  }
  const std::size_t C = f.shape()[0];
  for (const auto& layer : layers) {
    if (layer.proj.shape() != Shape{C, C}) throw ConfigError("bottleneck: RVM layers must preserve channels");
  }
  const Shape spatial(f.shape().begin() + 1, f.shape().end());
  auto m = ad::flatten_spatial(f);
  for (const auto& layer : layers) m = rvm_forward(m, layer, residual, spatial);
  return ad::unflatten_spatial(m, spatial);
}

template <typename T>
Var<T> decoder_block_forward(const Var<T>& p_in, const Var<T>& f_skip, const DecoderWeights<T>& w) {
  if (p_in.shape() != f_skip.shape()) {
    throw DimensionError("decoder block: input " + shape_str(p_in.shape()) + " and skip " +
                         shape_str(f_skip.shape()) + " differ");
  }
  const std::size_t C = p_in.shape()[0];
  if (C % 2 != 0) throw ConfigError("decoder block: channel count " + std::to_string(C) + " is odd");
  auto q = ad::add(p_in, f_skip);
  auto r = ad::relu(ad::add(ad::dwconv(q, w.dw_k, w.dw_b, 1, 1),
                            ad::scale_by_channel_vector(q, w.scale, ops::ChannelAxis::Leading)));
  return ad::upsample2x(ad::pointwise_conv(r, w.half_w, w.half_b));
}

#define LMUNET_INSTANTIATE_BLOCKS(T)                                                                       \
  template Var<T> vss_forward(const Var<T>&, const VssWeights<T>&);                                        \
  template Var<T> conv3_block_forward(const Var<T>&, const Conv3Weights<T>&, const Shape&);                \
  template Var<T> self_attention_forward(const Var<T>&, const AttentionWeights<T>&);                       \
  template Var<T> rvm_forward(const Var<T>&, const RvmWeights<T>&, Residual, const Shape&);                \
  template Var<T> encoder_block_forward(const Var<T>&, const std::vector<RvmWeights<T>>&, Residual);       \
  template Var<T> bottleneck_forward(const Var<T>&, const std::vector<RvmWeights<T>>&, Residual);          \
  template Var<T> decoder_block_forward(const Var<T>&, const Var<T>&, const DecoderWeights<T>&);

LMUNET_INSTANTIATE_BLOCKS(float)
LMUNET_INSTANTIATE_BLOCKS(double)

}  // namespace lmunet::blocks
