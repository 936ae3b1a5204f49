#include "lmunet/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "binio.hpp"
#include "lmunet/init.hpp"

namespace lmunet::net {

namespace {

constexpr char kWeightMagic[4] = {'L', 'M', 'U', 'W'};
constexpr std::uint32_t kWeightVersion = 1;
constexpr std::size_t kMaxRank = 8;

[[noreturn]] void bad_field(const std::string& field, const std::string& why) {
  throw ConfigError("invalid config field '" + field + "': " + why);
}

std::size_t pow3(int r) { return r == 2 ? 9 : 27; }

Shape kernel_shape(std::size_t lead, std::size_t lead2, int rank) {
  Shape s{lead};
  if (lead2) s.push_back(lead2);
  for (int i = 0; i < rank; ++i) s.push_back(3);
  return s;
}

void rvm_schema(std::vector<WeightSpec>& out, const NetworkConfig& cfg, const std::string& p, std::size_t C,
                std::size_t c_out, blocks::Mixer mixer) {
  out.push_back({p + ".norm1.gamma", {C}, Init::Ones});
  out.push_back({p + ".norm1.beta", {C}, Init::Zeros});
  switch (mixer) {
    case blocks::Mixer::Vss: {
      const std::size_t E = cfg.expand * C, N = cfg.d_state, R = cfg.dt_rank_for(E), W = cfg.conv_width;
      const std::string v = p + ".vss";
      out.push_back({v + ".in1.weight", {E, C}, Init::Kaiming, C});
      out.push_back({v + ".in1.bias", {E}, Init::Zeros});
      out.push_back({v + ".in2.weight", {E, C}, Init::Kaiming, C});
      out.push_back({v + ".in2.bias", {E}, Init::Zeros});
      out.push_back({v + ".conv.weight", {E, W}, Init::Kaiming, W});
      out.push_back({v + ".conv.bias", {E}, Init::Zeros});
      out.push_back({v + ".ssm.a_log", {E, N}, Init::StateLog});
      out.push_back({v + ".ssm.d_skip", {E}, Init::Ones});
      out.push_back({v + ".ssm.w_bc", {2 * N, E}, Init::Kaiming, E});
      out.push_back({v + ".ssm.dt_down", {R, E}, Init::Kaiming, E});
      out.push_back({v + ".ssm.dt_up", {E, R}, Init::Kaiming, R});
      out.push_back({v + ".ssm.dt_bias", {E}, Init::StepBias});
      out.push_back({v + ".norm.gamma", {E}, Init::Ones});
      out.push_back({v + ".norm.beta", {E}, Init::Zeros});
      out.push_back({v + ".out.weight", {C, E}, Init::Kaiming, E});
      out.push_back({v + ".out.bias", {C}, Init::Zeros});
      break;
    }
    case blocks::Mixer::Conv3:
      out.push_back({p + ".conv3.weight", kernel_shape(C, C, cfg.rank), Init::Kaiming, C * pow3(cfg.rank)});
      out.push_back({p + ".conv3.bias", {C}, Init::Zeros});
      break;
    case blocks::Mixer::SelfAttention:
      for (const char* n : {"wq", "wk", "wv", "wo"}) out.push_back({p + ".attn." + n, {C, C}, Init::Kaiming, C});
      break;
  }
  if (cfg.has_adjustment_factors()) out.push_back({p + ".residual.scale", {C}, Init::Ones});
  out.push_back({p + ".norm2.gamma", {C}, Init::Ones});
  out.push_back({p + ".norm2.beta", {C}, Init::Zeros});
  out.push_back({p + ".proj.weight", {c_out, C}, Init::Kaiming, C});
}

template <typename T>
Tensor<T> init_tensor(const WeightSpec& s, std::mt19937_64& rng) {
  switch (s.init) {
    case Init::Kaiming:
      return kaiming_uniform<T>(s.shape, s.fan_in, rng);
    case Init::Zeros:
      return Tensor<T>(s.shape, T(0));
    case Init::Ones:
      return Tensor<T>(s.shape, T(1));
    case Init::StateLog: {
      Tensor<T> t(s.shape);
      const std::size_t N = s.shape[1];
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(std::log(double(i % N + 1)));
      return t;
    }
    case Init::StepBias: {
      // softplus^-1 of a log-uniform step in [1e-3, 1e-1]
      Tensor<T> t(s.shape);
      std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
      for (auto& v : t.data()) {
        const double dt = std::exp(u(rng));
        v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
      }
      return t;
    }
  }
  throw ContractError("unknown init kind");
}

template <typename T>
const ad::Var<T>& get(const ParamSet<T>& ps, const std::string& name) {
  auto it = ps.find(name);
  if (it == ps.end()) throw LoadError("missing weight '" + name + "'");
  return it->second;
}

template <typename T>
ad::Var<T> opt(const ParamSet<T>& ps, const std::string& name) {
  auto it = ps.find(name);
  return it == ps.end() ? ad::Var<T>{} : it->second;
}

template <typename T>
blocks::RvmWeights<T> bind_rvm(const ParamSet<T>& ps, const std::string& p, blocks::Mixer mixer,
                               std::size_t heads) {
  blocks::RvmWeights<T> w;
  w.norm1_g = get(ps, p + ".norm1.gamma");
  w.norm1_b = get(ps, p + ".norm1.beta");
  w.mixer = mixer;
  switch (mixer) {
    case blocks::Mixer::Vss: {
      const std::string v = p + ".vss";
      auto& s = w.vss;
      s.in1_w = get(ps, v + ".in1.weight");
      s.in1_b = get(ps, v + ".in1.bias");
      s.in2_w = get(ps, v + ".in2.weight");
      s.in2_b = get(ps, v + ".in2.bias");
      s.conv_k = get(ps, v + ".conv.weight");
      s.conv_b = get(ps, v + ".conv.bias");
      s.a_log = get(ps, v + ".ssm.a_log");
      s.d_skip = get(ps, v + ".ssm.d_skip");
      s.w_bc = get(ps, v + ".ssm.w_bc");
      s.dt_down = get(ps, v + ".ssm.dt_down");
      s.dt_up = get(ps, v + ".ssm.dt_up");
      s.dt_bias = get(ps, v + ".ssm.dt_bias");
      s.norm_g = get(ps, v + ".norm.gamma");
      s.norm_b = get(ps, v + ".norm.beta");
      s.out_w = get(ps, v + ".out.weight");
      s.out_b = get(ps, v + ".out.bias");
      break;
    }
    case blocks::Mixer::Conv3:
      w.conv3 = {get(ps, p + ".conv3.weight"), get(ps, p + ".conv3.bias")};
      break;
    case blocks::Mixer::SelfAttention:
      w.attn = {get(ps, p + ".attn.wq"), get(ps, p + ".attn.wk"), get(ps, p + ".attn.wv"), get(ps, p + ".attn.wo"),
                heads};
      break;
  }
  w.scale = opt(ps, p + ".residual.scale");
  w.norm2_g = get(ps, p + ".norm2.gamma");
  w.norm2_b = get(ps, p + ".norm2.beta");
  w.proj = get(ps, p + ".proj.weight");
  return w;
}

template <typename P>
void put_tensor_body(binio::Writer& w, const Shape& shape, DType dt, const P* data, std::size_t n) {
  w.pod<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
  for (auto e : shape) w.pod<std::uint64_t>(e);
  w.pod<std::uint8_t>(static_cast<std::uint8_t>(dt));
  w.bytes(data, n * sizeof(P));
}

}  // namespace

Variant parse_variant(std::string_view name) {
  if (name == "none" || name == "baseline") return Variant::Baseline;
  if (name == "conv3") return Variant::Conv3;
  if (name == "attn") return Variant::Attention;
  if (name == "no-adjust") return Variant::NoAdjust;
  if (name == "no-residual") return Variant::NoResidual;
  throw ConfigError("unknown ablation '" + std::string(name) + "' (none, conv3, attn, no-adjust, no-residual)");
}

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Baseline:
      return "none";
    case Variant::Conv3:
      return "conv3";
    case Variant::Attention:
      return "attn";
    case Variant::NoAdjust:
      return "no-adjust";
    case Variant::NoResidual:
      return "no-residual";
  }
  return "?";
}

NetworkConfig NetworkConfig::defaults(int rank) {
  NetworkConfig c;
  c.rank = rank;
  c.num_classes = rank == 2 ? 2 : 3;
  return c;
}

void NetworkConfig::validate() const {
  if (rank != 2 && rank != 3) bad_field("rank", "must be 2 or 3, got " + std::to_string(rank));
  if (in_channels < 1) bad_field("in_channels", "must be >= 1");
  if (num_classes < 2) bad_field("num_classes", "must be >= 2 (background plus at least one target)");
  if (base_channels < 1) bad_field("base_channels", "must be >= 1");
  if (encoder_rvm_counts.size() != 3) {
    bad_field("encoder_rvm_counts", "needs exactly 3 entries, got " + std::to_string(encoder_rvm_counts.size()));
  }
  for (auto n : encoder_rvm_counts)
    if (n < 1) bad_field("encoder_rvm_counts", "every encoder block needs at least one RVM layer");
  if (bottleneck_rvm_count != blocks::kBottleneckLayers) {
    bad_field("bottleneck_rvm_count", "the bottleneck stacks exactly " + std::to_string(blocks::kBottleneckLayers) +
                                          " RVM layers");
  }
  if (expand < 1) bad_field("expand", "must be >= 1");
  if (d_state < 1) bad_field("d_state", "must be >= 1");
  if (conv_width < 1) bad_field("conv_width", "must be >= 1");
  if (ablation.vssm_replacement == Replacement::SelfAttentionBottleneck) {
    if (attention_heads < 1 || bottleneck_channels() % attention_heads != 0) {
      bad_field("attention_heads", std::to_string(bottleneck_channels()) + " bottleneck channels not divisible by " +
                                       std::to_string(attention_heads) + " heads");
    }
  }
}

std::size_t NetworkConfig::dt_rank_for(std::size_t width) const {
  return dt_rank ? dt_rank : (width + 15) / 16;
}

blocks::Residual NetworkConfig::residual_mode() const {
  if (!ablation.use_residual_connections) return blocks::Residual::None;
  if (!ablation.use_adjustment_factors) return blocks::Residual::Identity;
  return blocks::Residual::Scaled;
}

bool NetworkConfig::has_adjustment_factors() const { return residual_mode() == blocks::Residual::Scaled; }

std::size_t NetworkConfig::encoder_channels(std::size_t level) const { return base_channels << (level - 1); }

blocks::Mixer encoder_mixer(const NetworkConfig& c) {
  return c.ablation.vssm_replacement == Replacement::Conv3 ? blocks::Mixer::Conv3 : blocks::Mixer::Vss;
}

blocks::Mixer bottleneck_mixer(const NetworkConfig& c) {
  switch (c.ablation.vssm_replacement) {
    case Replacement::Conv3:
      return blocks::Mixer::Conv3;
    case Replacement::SelfAttentionBottleneck:
      return blocks::Mixer::SelfAttention;
    case Replacement::None:
      break;
  }
  return blocks::Mixer::Vss;
}

NetworkConfig apply_ablation(const NetworkConfig& config, Variant variant) {
  NetworkConfig c = config;
  auto replace = [&](Replacement r) {
    if (c.ablation.vssm_replacement != Replacement::None && c.ablation.vssm_replacement != r) {
      throw ConfigError("invalid config field 'ablation': conv3 and self-attention replacements are exclusive");
    }
    c.ablation.vssm_replacement = r;
  };
  switch (variant) {
    case Variant::Baseline:
      break;
    case Variant::Conv3:
      replace(Replacement::Conv3);
      break;
    case Variant::Attention:
      replace(Replacement::SelfAttentionBottleneck);
      break;
    case Variant::NoAdjust:
      c.ablation.use_adjustment_factors = false;
      break;
    case Variant::NoResidual:
      c.ablation.use_residual_connections = false;
      break;
  }
  c.validate();
  return c;
}

std::vector<WeightSpec> weight_schema(const NetworkConfig& cfg) {
  cfg.validate();
  std::vector<WeightSpec> out;
  const std::size_t B = cfg.base_channels, Cin = cfg.in_channels, K = cfg.num_classes;
  const std::size_t taps = pow3(cfg.rank);
  out.push_back({"stem.dw.weight", kernel_shape(Cin, 0, cfg.rank), Init::Kaiming, taps});
  out.push_back({"stem.dw.bias", {Cin}, Init::Zeros});
  out.push_back({"stem.pw.weight", {B, Cin}, Init::Kaiming, Cin});
  out.push_back({"stem.pw.bias", {B}, Init::Zeros});
  for (std::size_t l = 1; l <= 3; ++l) {
    const std::size_t C = cfg.encoder_channels(l), n = cfg.encoder_rvm_counts[l - 1];
    for (std::size_t j = 0; j < n; ++j) {
      rvm_schema(out, cfg, "encoder." + std::to_string(l) + ".rvm." + std::to_string(j), C,
                 j + 1 == n ? 2 * C : C, encoder_mixer(cfg));
    }
  }
  const std::size_t Cb = cfg.bottleneck_channels();
  for (std::size_t j = 0; j < cfg.bottleneck_rvm_count; ++j)
    rvm_schema(out, cfg, "bottleneck.rvm." + std::to_string(j), Cb, Cb, bottleneck_mixer(cfg));
  for (std::size_t d = 1; d <= 3; ++d) {
    const std::size_t C = Cb >> (d - 1);
    const std::string p = "decoder." + std::to_string(d);
    out.push_back({p + ".dw.weight", kernel_shape(C, 0, cfg.rank), Init::Kaiming, taps});
    out.push_back({p + ".dw.bias", {C}, Init::Zeros});
    out.push_back({p + ".residual.scale", {C}, Init::Ones});
    out.push_back({p + ".half.weight", {C / 2, C}, Init::Kaiming, C});
    out.push_back({p + ".half.bias", {C / 2}, Init::Zeros});
  }
  out.push_back({"head.weight", {K, B}, Init::Kaiming, B});
  out.push_back({"head.bias", {K}, Init::Zeros});
  return out;
}

template <typename T>
ModelWeights<T> build(const NetworkConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelWeights<T> w;
  for (const auto& s : weight_schema(config)) w.emplace(s.name, init_tensor<T>(s, rng));
  return w;
}

template <typename T>
void check_weights(const ModelWeights<T>& weights, const NetworkConfig& config) {
  std::vector<std::string> missing, extra, misshaped;
  std::set<std::string> expected;
  for (const auto& s : weight_schema(config)) {
    expected.insert(s.name);
    auto it = weights.find(s.name);
    if (it == weights.end())
      missing.push_back(s.name);
    else if (it->second.shape() != s.shape)
      misshaped.push_back(s.name + " " + shape_str(it->second.shape()) + " != " + shape_str(s.shape));
  }
  for (const auto& [name, _] : weights)
    if (!expected.count(name)) extra.push_back(name);
  if (missing.empty() && extra.empty() && misshaped.empty()) return;
  std::ostringstream msg;
  msg << "weights do not match the network config";
  auto list = [&](const char* what, const std::vector<std::string>& v) {
    if (v.empty()) return;
    msg << "; " << what << " (" << v.size() << "):";
    for (const auto& n : v) msg << ' ' << n;
  };
  list("missing", missing);
  list("extra", extra);
  list("wrong shape", misshaped);
  throw LoadError(msg.str());
}

template <typename T>
ParamSet<T> constant_params(const ModelWeights<T>& weights) {
  ParamSet<T> ps;
  for (const auto& [name, t] : weights) ps.emplace(name, ad::Var<T>::constant(t));
  return ps;
}

template <typename T>
ParamSet<T> tape_params(const ModelWeights<T>& weights, ad::Tape<T>& tape) {
  ParamSet<T> ps;
  for (const auto& [name, t] : weights) ps.emplace(name, tape.leaf(t, true));
  return ps;
}

const Shape& ForwardProbe::at(std::string_view stage) const {
  for (const auto& [name, shape] : stages)
    if (name == stage) return shape;
  throw ContractError("probe has no stage '" + std::string(stage) + "'");
}

void check_input(const NetworkConfig& config, const Shape& s) {
  if (s.size() != static_cast<std::size_t>(config.rank) + 1 || s[0] != config.in_channels) {
    throw DimensionError("network input must be (" + std::to_string(config.in_channels) + ", " +
                         std::to_string(config.rank) + " spatial extents), got " + shape_str(s));
  }
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (s[i] == 0 || s[i] % kInputDivisor != 0) {
      throw DimensionError("network input extents must be positive multiples of " + std::to_string(kInputDivisor) +
                           ", got " + shape_str(s));
    }
  }
}

template <typename T>
ad::Var<T> forward(const ParamSet<T>& ps, const NetworkConfig& cfg, const ad::Var<T>& image, ForwardProbe* probe) {
  cfg.validate();
  check_input(cfg, image.shape());
  auto note = [&](std::string name, const ad::Var<T>& v) {
    if (probe) probe->stages.emplace_back(std::move(name), v.shape());
  };
  const auto residual = cfg.residual_mode();

  auto f = ad::dwconv(image, get(ps, "stem.dw.weight"), get(ps, "stem.dw.bias"), 1, 1);
  f = ad::pointwise_conv(f, get(ps, "stem.pw.weight"), get(ps, "stem.pw.bias"));
  note("stem", f);

  std::vector<ad::Var<T>> skips;
  for (std::size_t l = 1; l <= 3; ++l) {
    std::vector<blocks::RvmWeights<T>> layers;
    for (std::size_t j = 0; j < cfg.encoder_rvm_counts[l - 1]; ++j) {
      layers.push_back(bind_rvm(ps, "encoder." + std::to_string(l) + ".rvm." + std::to_string(j), encoder_mixer(cfg),
                                cfg.attention_heads));
    }
    f = blocks::encoder_block_forward(f, layers, residual);
    note("encoder." + std::to_string(l), f);
    skips.push_back(f);
  }

  std::vector<blocks::RvmWeights<T>> bottleneck;
  for (std::size_t j = 0; j < cfg.bottleneck_rvm_count; ++j)
    bottleneck.push_back(bind_rvm(ps, "bottleneck.rvm." + std::to_string(j), bottleneck_mixer(cfg), cfg.attention_heads));
  auto p = blocks::bottleneck_forward(f, bottleneck, residual);
  note("bottleneck", p);

  for (std::size_t d = 1; d <= 3; ++d) {
    const std::string pre = "decoder." + std::to_string(d);
    blocks::DecoderWeights<T> w{get(ps, pre + ".dw.weight"), get(ps, pre + ".dw.bias"),
                                get(ps, pre + ".residual.scale"), get(ps, pre + ".half.weight"),
                                get(ps, pre + ".half.bias")};
    p = blocks::decoder_block_forward(p, skips[3 - d], w);
    note(pre, p);
  }
  auto logits = ad::pointwise_conv(p, get(ps, "head.weight"), get(ps, "head.bias"));
  note("head", logits);
  return logits;
}

template <typename T>
Tensor<T> forward(const ModelWeights<T>& weights, const NetworkConfig& config, const Tensor<T>& image,
                  ForwardProbe* probe) {
  return forward(constant_params(weights), config, ad::Var<T>::constant(image), probe).value();
}

template <typename T>
void save_weights(const ModelWeights<T>& weights, const std::filesystem::path& path) {
  binio::Writer w;
  w.bytes(kWeightMagic, 4);
  w.pod<std::uint32_t>(kWeightVersion);
  w.pod<std::uint64_t>(weights.size());
  for (const auto& [name, t] : weights) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    put_tensor_body(w, t.shape(), dtype_of<T>(), t.ptr(), t.numel());
  }
  w.save(path);
}

ModelWeights<float> load_weights(const std::filesystem::path& path) {
  binio::Reader r(path);
  const auto* magic = r.take(4);
  if (!std::equal(magic, magic + 4, kWeightMagic)) throw LoadError(r.path() + ": not a weight file (bad magic)");
  const auto version = r.pod<std::uint32_t>();
  if (version != kWeightVersion) {
    throw LoadError(r.path() + ": unsupported weight format version " + std::to_string(version));
  }
  const auto count = r.pod<std::uint64_t>();
  ModelWeights<float> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.pod<std::uint32_t>();
    const auto* np = r.take(len);
    std::string name(reinterpret_cast<const char*>(np), len);
    const auto rank = r.pod<std::uint8_t>();
    if (rank > kMaxRank) throw LoadError(r.path() + ": tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = r.pod<std::uint64_t>();
    const auto dt = r.pod<std::uint8_t>();
    const std::size_t n = shape_numel(shape);
    std::size_t width;
    if (dt == static_cast<std::uint8_t>(DType::F32))
      width = sizeof(float);
    else if (dt == static_cast<std::uint8_t>(DType::F64))
      width = sizeof(double);
    else
      throw LoadError(r.path() + ": tensor '" + name + "' has unsupported dtype tag " + std::to_string(dt));
    if (n > SIZE_MAX / width) throw LoadError(r.path() + ": absurd extents for '" + name + "'");
    const auto* src = r.take(n * width);  // bounds-checked before allocating
    Tensor<float> t(shape);
    if (width == sizeof(float)) {
      std::memcpy(t.ptr(), src, n * sizeof(float));
    } else {
      for (std::size_t k = 0; k < n; ++k) {
        double v;
        std::memcpy(&v, src + k * sizeof(double), sizeof(double));
        t[k] = static_cast<float>(v);
      }
    }
    if (!out.emplace(std::move(name), std::move(t)).second) throw LoadError(r.path() + ": duplicate tensor name");
  }
  if (!r.at_end()) throw LoadError(r.path() + ": trailing bytes after the tensor table");
  return out;
}

ModelWeights<float> load_weights(const std::filesystem::path& path, const NetworkConfig& config) {
  auto w = load_weights(path);
  check_weights(w, config);
  return w;
}

#define LMUNET_INSTANTIATE_NET(T)                                                                             \
  template ModelWeights<T> build(const NetworkConfig&, std::uint64_t);                                        \
  template void check_weights(const ModelWeights<T>&, const NetworkConfig&);                                  \
  template ParamSet<T> constant_params(const ModelWeights<T>&);                                               \
  template ParamSet<T> tape_params(const ModelWeights<T>&, ad::Tape<T>&);                                     \
  template ad::Var<T> forward(const ParamSet<T>&, const NetworkConfig&, const ad::Var<T>&, ForwardProbe*);    \
  template Tensor<T> forward(const ModelWeights<T>&, const NetworkConfig&, const Tensor<T>&, ForwardProbe*); \
  template void save_weights(const ModelWeights<T>&, const std::filesystem::path&);

LMUNET_INSTANTIATE_NET(float)
LMUNET_INSTANTIATE_NET(double)

}  // namespace lmunet::net
