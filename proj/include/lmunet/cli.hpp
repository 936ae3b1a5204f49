#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "lmunet/network.hpp"
#include "lmunet/train.hpp"

namespace lmunet::cli {

enum ExitCode : int { kOk = 0, kConfigOrData = 1, kUsage = 2, kNumeric = 3 };

/// Parsed command line. Optional fields are overrides on top of the config
/// file (or the defaults when no file is given).
struct Invocation {
  std::string subcommand;
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> out;  // defaults to ./lmunet_out where a directory is needed
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool deterministic = false;

  // network overrides
  std::optional<int> rank;
  std::optional<std::size_t> in_channels, classes, base_channels, expand, d_state, dt_rank, conv_width,
      attention_heads;
  std::optional<std::string> ablation;

  // training overrides
  std::optional<std::size_t> epochs, batch;
  std::optional<double> lr0, momentum, weight_decay, poly_exponent;

  // subcommand inputs
  std::optional<std::filesystem::path> data;     // manifest.json
  std::optional<std::filesystem::path> weights;  // .lmuw
  std::size_t n = 8;                             // gen: sample count
  std::vector<std::size_t> size;                 // spatial extents (one value broadcasts)
  bool overlay = false;                          // predict: also write PGM overlays
  bool no_attention = false;                     // bench: skip the attention timing
  std::size_t trials = 5;                        // bench
};

/// Thrown by parse for usage problems and --help; carries the exit code and
/// the text to print.
struct UsageExit {
  int code;
  std::string text;
};

Invocation parse(const std::vector<std::string>& args);

/// Effective configs after applying the file and flag overrides.
net::NetworkConfig network_config(const Invocation& inv);
train::TrainConfig train_config(const Invocation& inv);

int cmd_gen(const Invocation& inv, std::ostream& out);
int cmd_train(const Invocation& inv, std::ostream& out);
int cmd_eval(const Invocation& inv, std::ostream& out);
int cmd_predict(const Invocation& inv, std::ostream& out);
int cmd_cost(const Invocation& inv, std::ostream& out);
int cmd_bench(const Invocation& inv, std::ostream& out);
int cmd_ablate(const Invocation& inv, std::ostream& out);

/// Parse + dispatch with the exit-code contract: 0 ok, 1 config/data error,
/// 2 usage error, 3 numeric failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lmunet::cli
