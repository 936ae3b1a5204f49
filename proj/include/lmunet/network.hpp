#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "lmunet/autograd.hpp"
#include "lmunet/blocks.hpp"
#include "lmunet/tensor.hpp"

namespace lmunet::net {

enum class Replacement { None, Conv3, SelfAttentionBottleneck };

struct Ablation {
  Replacement vssm_replacement = Replacement::None;
  bool use_adjustment_factors = true;
  bool use_residual_connections = true;

  bool operator==(const Ablation&) const = default;
};

/// Named ablation variants as accepted on the command line.
enum class Variant { Baseline, Conv3, Attention, NoAdjust, NoResidual };

Variant parse_variant(std::string_view name);
std::string_view variant_name(Variant v);

struct NetworkConfig {
  int rank = 3;
  std::size_t in_channels = 1;
  std::size_t num_classes = 3;
  std::size_t base_channels = 32;
  std::vector<std::size_t> encoder_rvm_counts{1, 2, 2};
  std::size_t bottleneck_rvm_count = blocks::kBottleneckLayers;
  std::size_t expand = 1;           // VSS branch width = expand * C
  std::size_t d_state = 16;         // N
  std::size_t dt_rank = 0;          // 0: ceil(E / 16)
  std::size_t conv_width = 4;       // causal sequence conv inside VSS
  std::size_t attention_heads = 8;  // only with the attention stand-in
  Ablation ablation;

  /// Defaults for a dimensionality: 3 classes in 3D, 2 in 2D.
  static NetworkConfig defaults(int rank);

  /// Throws ConfigError naming the offending field.
  void validate() const;

  std::size_t dt_rank_for(std::size_t width) const;
  blocks::Residual residual_mode() const;
  bool has_adjustment_factors() const;
  std::size_t encoder_channels(std::size_t level) const;  // input width of encoder `level` (1-based)
  std::size_t bottleneck_channels() const { return base_channels << 3; }

  bool operator==(const NetworkConfig&) const = default;
};

inline constexpr std::size_t kInputDivisor = 8;

/// Returns `config` with the variant's switches applied. Stacking a second
/// mixer replacement on top of an existing one is a ConfigError.
NetworkConfig apply_ablation(const NetworkConfig& config, Variant variant);

/// Token mixer used inside encoder and bottleneck RVM layers.
blocks::Mixer encoder_mixer(const NetworkConfig& config);
blocks::Mixer bottleneck_mixer(const NetworkConfig& config);

enum class Init { Kaiming, Zeros, Ones, StateLog, StepBias };

struct WeightSpec {
  std::string name;
  Shape shape;
  Init init = Init::Kaiming;
  std::size_t fan_in = 1;
};

/// Ordered list of every learnable tensor the config induces.
std::vector<WeightSpec> weight_schema(const NetworkConfig& config);

template <typename T>
using ModelWeights = std::map<std::string, Tensor<T>>;

template <typename T>
ModelWeights<T> build(const NetworkConfig& config, std::uint64_t seed);

/// Name-set and shape agreement with the schema; LoadError lists missing,
/// extra and mis-shaped names.
template <typename T>
void check_weights(const ModelWeights<T>& weights, const NetworkConfig& config);

template <typename T>
using ParamSet = std::map<std::string, ad::Var<T>>;

template <typename T>
ParamSet<T> constant_params(const ModelWeights<T>& weights);

/// Registers every weight as a gradient-tracking leaf of `tape`.
template <typename T>
ParamSet<T> tape_params(const ModelWeights<T>& weights, ad::Tape<T>& tape);

/// Intermediate feature shapes captured during forward.
struct ForwardProbe {
  std::vector<std::pair<std::string, Shape>> stages;

  const Shape& at(std::string_view stage) const;
};

template <typename T>
ad::Var<T> forward(const ParamSet<T>& params, const NetworkConfig& config, const ad::Var<T>& image,
                   ForwardProbe* probe = nullptr);

/// Inference convenience: raw logits (num_classes, spatial...).
template <typename T>
Tensor<T> forward(const ModelWeights<T>& weights, const NetworkConfig& config, const Tensor<T>& image,
                  ForwardProbe* probe = nullptr);

/// Throws DimensionError unless `image` is (in_channels, spatial...) with
/// every extent a positive multiple of 8.
void check_input(const NetworkConfig& config, const Shape& image_shape);

template <typename T>
void save_weights(const ModelWeights<T>& weights, const std::filesystem::path& path);

ModelWeights<float> load_weights(const std::filesystem::path& path);
ModelWeights<float> load_weights(const std::filesystem::path& path, const NetworkConfig& config);

}  // namespace lmunet::net
