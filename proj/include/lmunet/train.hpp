#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lmunet/autograd.hpp"
#include "lmunet/network.hpp"
#include "lmunet/tensor.hpp"

namespace lmunet::train {

inline constexpr double kDiceEps = 1e-5;

/// Combined loss CE + Dice on raw logits (K, spatial...) and a label map.
/// CE is averaged over sites; Dice is 1 - mean over classes k >= 1 of
/// (2 sum p g + eps) / (sum p + sum g + eps).
template <typename T>
ad::Var<T> dice_ce_loss(const ad::Var<T>& logits, const LabelMap& target);

template <typename T>
T dice_ce_loss(const Tensor<T>& logits, const LabelMap& target);

/// Arg-max over the leading class axis; ties go to the lowest class index.
template <typename T>
LabelMap argmax_classes(const Tensor<T>& logits);

/// Per-class Dice, 1 when both masks lack the class.
std::vector<double> dsc(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes);

struct IouResult {
  std::vector<double> per_class;
  double mean = 0;  // over classes present in the ground truth
};

IouResult miou(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes);

/// Mean of per-class values over foreground classes (k >= 1).
double foreground_mean(const std::vector<double>& per_class);

double poly_lr(double lr0, std::size_t epoch, std::size_t total, double exponent = 0.9);

struct SgdOptions {
  double lr = 1e-4;
  double momentum = 0.99;
  bool nesterov = true;
  double weight_decay = 3e-5;
};

template <typename T>
using TensorMap = std::map<std::string, Tensor<T>>;

/// In-place update of `weights` and momentum buffers `state`; empty buffers
/// are created on first use.
template <typename T>
void sgd_step(TensorMap<T>& weights, const TensorMap<T>& grads, TensorMap<T>& state, const SgdOptions& opt);

struct Sample {
  std::string id;
  Tensor<float> image;  // (in_channels, spatial...)
  LabelMap mask;        // (spatial...)
};

struct TrainConfig {
  double lr0 = 1e-4;
  std::size_t epochs = 50;
  std::size_t batch_size = 2;
  double poly_exponent = 0.9;
  double momentum = 0.99;
  bool nesterov = true;
  double weight_decay = 3e-5;
  std::uint64_t seed = 0;
  bool deterministic = false;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;
  double train_dsc = 0;  // foreground DSC of the epoch's training forwards, averaged over samples
  double wall_ms = 0;
};

std::string to_json_line(const EpochLog& e);

struct TrainResult {
  net::ModelWeights<float> weights;  // last
  net::ModelWeights<float> best;     // highest train_dsc
  std::vector<EpochLog> log;
  std::size_t steps = 0;
};

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  /// When set, best/last checkpoints (weights + sidecar JSON) land here.
  std::optional<std::filesystem::path> checkpoint_dir;
};

/// Seeded per-epoch shuffle, gradient averaged over each mini-batch, one SGD
/// step per batch, poly schedule per epoch. Non-finite loss -> NumericError.
TrainResult train(const TrainConfig& config, const net::NetworkConfig& net_config, const std::vector<Sample>& data,
                  std::optional<net::ModelWeights<float>> init = std::nullopt, const TrainHooks& hooks = {});

struct MetricReport {
  std::vector<double> dsc;  // per class, averaged over samples
  std::vector<double> iou;  // per class, averaged over samples
  double mean_dsc = 0;      // foreground classes
  double miou = 0;          // per-sample mIoU (classes present in GT), averaged
  std::size_t samples = 0;

  std::string to_json() const;
};

/// Aggregates per-sample metrics of (prediction, ground truth) pairs.
MetricReport aggregate(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts, std::size_t num_classes);

MetricReport evaluate(const net::ModelWeights<float>& weights, const net::NetworkConfig& net_config,
                      const std::vector<Sample>& data);

/// Checkpoint sidecar: config, epoch and train DSC alongside the weight file.
void write_checkpoint(const std::filesystem::path& weights_path, const net::ModelWeights<float>& weights,
                      const net::NetworkConfig& net_config, const EpochLog& at);

}  // namespace lmunet::train
