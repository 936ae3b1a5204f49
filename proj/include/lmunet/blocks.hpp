#pragma once

#include <vector>

#include "lmunet/autograd.hpp"

// Composite layers of the network. All weights arrive as Vars so one forward
// implementation serves inference (constant Vars) and training (tape leaves).
namespace lmunet::blocks {

using ad::Var;

/// Vision state-space module over an (L, C) sequence, two branches of width E:
///   w1 = LayerNorm(SSM(SiLU(CausalDWConv(Linear(x)))))
///   w2 = SiLU(Linear(x))
///   out = Linear(w1 * w2)
template <typename T>
struct VssWeights {
  Var<T> in1_w, in1_b;    // (E, C), (E)
  Var<T> in2_w, in2_b;    // (E, C), (E)
  Var<T> conv_k, conv_b;  // (E, W), (E)
  Var<T> a_log;           // (E, N)
  Var<T> d_skip;          // (E)
  Var<T> w_bc;            // (2N, E)
  Var<T> dt_down;         // (R, E)
  Var<T> dt_up;           // (E, R)
  Var<T> dt_bias;         // (E)
  Var<T> norm_g, norm_b;  // (E)
  Var<T> out_w, out_b;    // (C, E), (C)
};

/// Full k x k (x k) convolution standing in for the VSS module.
template <typename T>
struct Conv3Weights {
  Var<T> w;  // (C, C, 3, 3[, 3])
  Var<T> b;  // (C)
};

/// Multi-head self-attention standing in for the VSS module.
template <typename T>
struct AttentionWeights {
  Var<T> wq, wk, wv, wo;  // (C, C) each
  std::size_t heads = 1;
};

enum class Mixer { Vss, Conv3, SelfAttention };

/// How the residual of the RVM layer is formed.
enum class Residual {
  Scaled,    // VSSM(LN(m)) + s * m
  Identity,  // VSSM(LN(m)) + m       (no adjustment factor)
  None,      // VSSM(LN(m))           (no residual connection)
};

template <typename T>
struct RvmWeights {
  Var<T> norm1_g, norm1_b;
  Mixer mixer = Mixer::Vss;
  VssWeights<T> vss;
  Conv3Weights<T> conv3;
  AttentionWeights<T> attn;
  Var<T> scale;  // adjustment factor s, (C); empty unless Residual::Scaled
  Var<T> norm2_g, norm2_b;
  Var<T> proj;  // (C_out, C), no bias
};

template <typename T>
struct DecoderWeights {
  Var<T> dw_k, dw_b;      // (C, 3, 3[, 3]), (C)
  Var<T> scale;           // s', (C)
  Var<T> half_w, half_b;  // (C/2, C), (C/2)
};

inline constexpr double kNormEps = 1e-5;

template <typename T>
Var<T> vss_forward(const Var<T>& x, const VssWeights<T>& w);

/// x is an (L, C) sequence over the given spatial extents.
template <typename T>
Var<T> conv3_block_forward(const Var<T>& x, const Conv3Weights<T>& w, const Shape& spatial);

template <typename T>
Var<T> self_attention_forward(const Var<T>& x, const AttentionWeights<T>& w);

/// Residual Vision Mamba layer on an (L, C) sequence; `spatial` is only used
/// by the convolutional stand-in.
template <typename T>
Var<T> rvm_forward(const Var<T>& m, const RvmWeights<T>& w, Residual residual, const Shape& spatial);

/// (C, s...) -> (2C, s/2...): flatten, RVM layers (the last one doubles the
/// channels), unflatten, 2x max pooling.
template <typename T>
Var<T> encoder_block_forward(const Var<T>& f, const std::vector<RvmWeights<T>>& layers, Residual residual);

inline constexpr std::size_t kBottleneckLayers = 4;

/// Shape-preserving stack of four RVM layers.
template <typename T>
Var<T> bottleneck_forward(const Var<T>& f, const std::vector<RvmWeights<T>>& layers, Residual residual);

/// (C, s...) + skip (C, s...) -> (C/2, 2s...):
///   q = p + skip; r = ReLU(DWConv(q) + s' * q); pointwise C -> C/2; 2x upsample.
template <typename T>
Var<T> decoder_block_forward(const Var<T>& p_in, const Var<T>& f_skip, const DecoderWeights<T>& w);

}  // namespace lmunet::blocks
