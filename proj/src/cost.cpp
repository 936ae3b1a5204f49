#include "lmunet/cost.hpp"

#include <sstream>

#include "lmunet/flops.hpp"

namespace lmunet::cost {

namespace {

using u64 = std::uint64_t;
constexpr u64 kNorm = flops::kNormFlopsPerElement;
constexpr u64 kAct = flops::kActivationFlopsPerElement;
constexpr u64 kElt = flops::kElementwiseFlops;

class Auditor {
 public:
  explicit Auditor(CostReport& r) : r_(r) {}

  void row(std::string name, u64 params, u64 macs = 0, u64 other = 0) {
    r_.rows.push_back({std::move(name), params, flops::kFlopsPerMac * macs + other, macs});
  }

  void rvm(const net::NetworkConfig& cfg, const std::string& p, u64 L, u64 C, u64 c_out, blocks::Mixer mixer) {
    row(p + ".norm1", 2 * C, 0, kNorm * L * C);
    switch (mixer) {
      case blocks::Mixer::Vss: {
        const u64 E = cfg.expand * C, N = cfg.d_state, R = cfg.dt_rank_for(E), W = cfg.conv_width;
        row(p + ".vss.in1", E * C + E, L * C * E, kElt * L * E);
        row(p + ".vss.conv", E * W + E, L * E * W, kElt * L * E + kAct * L * E);
        row(p + ".vss.ssm", E * N + E + 2 * N * E + 2 * R * E + E, L * E * R + L * R * E + L * E * 2 * N,
            kElt * L * E + kAct * L * E + flops::kScanFlopsPerStatePerStep * N * L * E);
        row(p + ".vss.norm", 2 * E, 0, kNorm * L * E);
        row(p + ".vss.in2", E * C + E, L * C * E, kElt * L * E + kAct * L * E);
        row(p + ".vss.out", C * E + C, L * E * C, kElt * L * E + kElt * L * C);
        break;
      }
      case blocks::Mixer::Conv3: {
        const u64 taps = cfg.rank == 2 ? 9 : 27;
        row(p + ".conv3", C * C * taps + C, L * C * C * taps, kElt * L * C);
        break;
      }
      case blocks::Mixer::SelfAttention: {
        const u64 h = cfg.attention_heads;
        row(p + ".attn", 4 * C * C, 4 * L * C * C + 2 * L * L * C, h * L * L * (kElt + kAct));
        break;
      }
    }
    switch (cfg.residual_mode()) {
      case blocks::Residual::Scaled:
        row(p + ".residual", C, 0, 2 * kElt * L * C);
        break;
      case blocks::Residual::Identity:
        row(p + ".residual", 0, 0, kElt * L * C);
        break;
      case blocks::Residual::None:
        row(p + ".residual", 0);
        break;
    }
    row(p + ".norm2", 2 * C, 0, kNorm * L * C);
    row(p + ".proj", C * c_out, L * C * c_out);
  }

 private:
  CostReport& r_;
};

CostReport audit(const net::NetworkConfig& cfg, const Shape* spatial) {
  cfg.validate();
  CostReport r;
  r.convention = flops::kConventionTag;
  r.has_flops = spatial != nullptr;
  u64 S = 0;
  if (spatial) {
    Shape full{cfg.in_channels};
    full.insert(full.end(), spatial->begin(), spatial->end());
    net::check_input(cfg, full);
    S = shape_numel(*spatial);
  }
  const u64 rank = static_cast<u64>(cfg.rank), taps = rank == 2 ? 9 : 27, down = u64{1} << rank;
  const u64 Cin = cfg.in_channels, B = cfg.base_channels, K = cfg.num_classes;
  Auditor a(r);

  a.row("stem.dw", Cin * taps + Cin, Cin * S * taps, kElt * Cin * S);
  a.row("stem.pw", B * Cin + B, S * Cin * B, kElt * S * B);

  u64 sites = S;
  for (std::size_t l = 1; l <= 3; ++l) {
    const u64 C = cfg.encoder_channels(l), n = cfg.encoder_rvm_counts[l - 1];
    const std::string p = "encoder." + std::to_string(l);
    for (u64 j = 0; j < n; ++j)
      a.rvm(cfg, p + ".rvm." + std::to_string(j), sites, C, j + 1 == n ? 2 * C : C, net::encoder_mixer(cfg));
    a.row(p + ".pool", 0, 0, 2 * C * sites);
    sites /= down;
  }

  const u64 Cb = cfg.bottleneck_channels();
  for (u64 j = 0; j < cfg.bottleneck_rvm_count; ++j)
    a.rvm(cfg, "bottleneck.rvm." + std::to_string(j), sites, Cb, Cb, net::bottleneck_mixer(cfg));

  for (std::size_t d = 1; d <= 3; ++d) {
    const u64 C = Cb >> (d - 1);
    const std::string p = "decoder." + std::to_string(d);
    a.row(p + ".fuse", 0, 0, kElt * C * sites);
    a.row(p + ".dw", C * taps + C, C * sites * taps, kElt * C * sites);
    a.row(p + ".residual", C, 0, 2 * kElt * C * sites + kAct * C * sites);
    a.row(p + ".half", C * C / 2 + C / 2, sites * C * (C / 2), kElt * sites * (C / 2));
    a.row(p + ".upsample", 0, (C / 2) * sites * down * down);
    sites *= down;
  }
  a.row("head", K * B + K, S * B * K, kElt * S * K);

  for (const auto& row : r.rows) {
    r.total_params += row.params;
    r.total_flops += row.flops;
    r.total_macs += row.macs;
  }
  return r;
}

}  // namespace

std::string CostReport::to_csv() const {
  std::ostringstream out;
  out << "name,params,flops\n";
  for (const auto& r : rows) out << r.name << ',' << r.params << ',' << r.flops << '\n';
  out << "TOTAL," << total_params << ',' << total_flops << '\n';
  return out.str();
}

const CostRow& CostReport::row(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return r;
  throw ContractError("cost report has no row '" + name + "'");
}

CostReport count_params(const net::NetworkConfig& config) { return audit(config, nullptr); }

CostReport count_flops(const net::NetworkConfig& config, const Shape& spatial) { return audit(config, &spatial); }

}  // namespace lmunet::cost
