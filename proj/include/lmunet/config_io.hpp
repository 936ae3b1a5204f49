#pragma once

#include <filesystem>

#include "json.hpp"
#include "lmunet/network.hpp"
#include "lmunet/train.hpp"

// JSON views of the configs. Field names mirror the struct members; reading
// starts from a base config and overrides only the fields present.
namespace lmunet::cfgio {

using nlohmann::json;

json to_json(const net::NetworkConfig& c);
json to_json(const train::TrainConfig& c);

/// Unknown keys and ill-typed values raise ConfigError naming the field.
net::NetworkConfig network_from_json(const json& j, net::NetworkConfig base);
train::TrainConfig train_from_json(const json& j, train::TrainConfig base);

json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const json& j);

}  // namespace lmunet::cfgio
