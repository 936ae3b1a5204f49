#include "lmunet/config_io.hpp"

#include <fstream>

namespace lmunet::cfgio {

namespace {

std::string replacement_name(net::Replacement r) {
  switch (r) {
    case net::Replacement::Conv3:
      return "conv3";
    case net::Replacement::SelfAttentionBottleneck:
      return "self_attention_bottleneck";
    case net::Replacement::None:
      break;
  }
  return "none";
}

net::Replacement parse_replacement(const std::string& s) {
  if (s == "none") return net::Replacement::None;
  if (s == "conv3") return net::Replacement::Conv3;
  if (s == "self_attention_bottleneck") return net::Replacement::SelfAttentionBottleneck;
  throw ConfigError("invalid config field 'ablation.vssm_replacement': unknown value '" + s + "'");
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& scope = "") {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<V>();
  } catch (const json::exception&) {
    throw ConfigError("invalid config field '" + scope + key + "': wrong type (" + it->dump() + ")");
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& scope) {
  if (!j.is_object()) throw ConfigError("config " + (scope.empty() ? std::string("root") : scope) + " must be an object");
  for (const auto& [k, _] : j.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* n) { return k == n; }) == known.end()) {
      throw ConfigError("invalid config field '" + scope + k + "': unknown key");
    }
  }
}

}  // namespace

json to_json(const net::NetworkConfig& c) {
  return json{{"rank", c.rank},
              {"in_channels", c.in_channels},
              {"num_classes", c.num_classes},
              {"base_channels", c.base_channels},
              {"encoder_rvm_counts", c.encoder_rvm_counts},
              {"bottleneck_rvm_count", c.bottleneck_rvm_count},
              {"expand", c.expand},
              {"d_state", c.d_state},
              {"dt_rank", c.dt_rank},
              {"conv_width", c.conv_width},
              {"attention_heads", c.attention_heads},
              {"ablation",
               {{"vssm_replacement", replacement_name(c.ablation.vssm_replacement)},
                {"use_adjustment_factors", c.ablation.use_adjustment_factors},
                {"use_residual_connections", c.ablation.use_residual_connections}}}};
}

json to_json(const train::TrainConfig& c) {
  return json{{"lr0", c.lr0},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"poly_exponent", c.poly_exponent},
              {"momentum", c.momentum},
              {"nesterov", c.nesterov},
              {"weight_decay", c.weight_decay},
              {"seed", c.seed},
              {"deterministic", c.deterministic}};
}

net::NetworkConfig network_from_json(const json& j, net::NetworkConfig c) {
  reject_unknown(j,
                 {"rank", "in_channels", "num_classes", "base_channels", "encoder_rvm_counts", "bottleneck_rvm_count",
                  "expand", "d_state", "dt_rank", "conv_width", "attention_heads", "ablation"},
                 "");
  read(j, "rank", c.rank);
  read(j, "in_channels", c.in_channels);
  read(j, "num_classes", c.num_classes);
  read(j, "base_channels", c.base_channels);
  read(j, "encoder_rvm_counts", c.encoder_rvm_counts);
  read(j, "bottleneck_rvm_count", c.bottleneck_rvm_count);
  read(j, "expand", c.expand);
  read(j, "d_state", c.d_state);
  read(j, "dt_rank", c.dt_rank);
  read(j, "conv_width", c.conv_width);
  read(j, "attention_heads", c.attention_heads);
  if (auto it = j.find("ablation"); it != j.end()) {
    reject_unknown(*it, {"vssm_replacement", "use_adjustment_factors", "use_residual_connections"}, "ablation.");
    std::string rep = replacement_name(c.ablation.vssm_replacement);
    read(*it, "vssm_replacement", rep, "ablation.");
    c.ablation.vssm_replacement = parse_replacement(rep);
    read(*it, "use_adjustment_factors", c.ablation.use_adjustment_factors, "ablation.");
    read(*it, "use_residual_connections", c.ablation.use_residual_connections, "ablation.");
  }
  c.validate();
  return c;
}

train::TrainConfig train_from_json(const json& j, train::TrainConfig c) {
  reject_unknown(j,
                 {"lr0", "epochs", "batch_size", "poly_exponent", "momentum", "nesterov", "weight_decay", "seed",
                  "deterministic"},
                 "");
  read(j, "lr0", c.lr0);
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  read(j, "poly_exponent", c.poly_exponent);
  read(j, "momentum", c.momentum);
  read(j, "nesterov", c.nesterov);
  read(j, "weight_decay", c.weight_decay);
  read(j, "seed", c.seed);
  read(j, "deterministic", c.deterministic);
  c.validate();
  return c;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

}  // namespace lmunet::cfgio
