#include "lmunet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "lmunet/config_io.hpp"

namespace lmunet::train {

namespace {

template <typename T>
struct LossParts {
  Tensor<T> probs;  // (K, M)
  double ce = 0;
  double dice = 0;
  std::vector<double> inter, psum, gsum;
};

template <typename T>
LossParts<T> loss_parts(const Tensor<T>& logits, const LabelMap& target) {
  if (logits.rank() < 2 || Shape(logits.shape().begin() + 1, logits.shape().end()) != target.shape()) {
    throw DimensionError("dice_ce_loss: logits " + shape_str(logits.shape()) + " do not match target " +
                         shape_str(target.shape()));
  }
  const std::size_t K = logits.dim(0), M = target.numel();
  if (K < 2) throw DimensionError("dice_ce_loss: needs at least 2 classes");
  for (std::size_t m = 0; m < M; ++m) {
    if (target[m] >= K) {
      throw DataError("label " + std::to_string(target[m]) + " at site " + std::to_string(m) + " is outside [0, " +
                      std::to_string(K) + ")");
    }
  }
  LossParts<T> r;
  r.probs = Tensor<T>(Shape{K, M});
  r.inter.assign(K, 0);
  r.psum.assign(K, 0);
  r.gsum.assign(K, 0);
  for (std::size_t m = 0; m < M; ++m) {
    T mx = logits[m];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits[k * M + m]);
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(double(logits[k * M + m] - mx));
    const std::size_t y = target[m];
    r.ce -= double(logits[y * M + m] - mx) - std::log(z);
    for (std::size_t k = 0; k < K; ++k) {
      const double p = std::exp(double(logits[k * M + m] - mx)) / z;
      r.probs[k * M + m] = static_cast<T>(p);
      r.psum[k] += p;
    }
    r.inter[y] += r.probs[y * M + m];
    r.gsum[y] += 1;
  }
  r.ce /= double(M);
  double acc = 0;
  for (std::size_t k = 1; k < K; ++k) acc += (2 * r.inter[k] + kDiceEps) / (r.psum[k] + r.gsum[k] + kDiceEps);
  r.dice = 1.0 - acc / double(K - 1);
  return r;
}

}  // namespace

template <typename T>
ad::Var<T> dice_ce_loss(const ad::Var<T>& logits, const LabelMap& target) {
  auto parts = std::make_shared<LossParts<T>>(loss_parts(logits.value(), target));
  const T value = static_cast<T>(parts->ce + parts->dice);
  return ad::make_result<T>(
      "dice_ce_loss", Tensor<T>::scalar(value), {logits},
      [parts, target](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
        if (!gr[0]) return;
        const std::size_t K = parts->probs.dim(0), M = parts->probs.dim(1);
        const double go = g[0];
        std::vector<double> dp(K), coef_i(K, 0), coef_c(K, 0);
        for (std::size_t k = 1; k < K; ++k) {
          const double den = parts->psum[k] + parts->gsum[k] + kDiceEps;
          coef_i[k] = -2.0 / (den * double(K - 1));
          coef_c[k] = (2 * parts->inter[k] + kDiceEps) / (den * den * double(K - 1));
        }
        auto& out = *gr[0];
        for (std::size_t m = 0; m < M; ++m) {
          const std::size_t y = target[m];
          // d(dice)/dp, then through the softmax Jacobian; CE contributes (p - g) / M
          double dot = 0;
          for (std::size_t k = 0; k < K; ++k) {
            const double gk = k == y ? 1.0 : 0.0;
            dp[k] = coef_i[k] * gk + coef_c[k];
            dot += dp[k] * double(parts->probs[k * M + m]);
          }
          for (std::size_t k = 0; k < K; ++k) {
            const double p = parts->probs[k * M + m];
            const double gk = k == y ? 1.0 : 0.0;
            out[k * M + m] += static_cast<T>(go * ((p - gk) / double(M) + p * (dp[k] - dot)));
          }
        }
      });
}

template <typename T>
T dice_ce_loss(const Tensor<T>& logits, const LabelMap& target) {
  auto p = loss_parts(logits, target);
  return static_cast<T>(p.ce + p.dice);
}

template <typename T>
LabelMap argmax_classes(const Tensor<T>& logits) {
  if (logits.rank() < 2) throw DimensionError("argmax_classes: expected (K, spatial...), got " + shape_str(logits.shape()));
  const std::size_t K = logits.dim(0), M = logits.numel() / K;
  LabelMap out(Shape(logits.shape().begin() + 1, logits.shape().end()));
  for (std::size_t m = 0; m < M; ++m) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits[k * M + m] > logits[best * M + m]) best = k;
    out[m] = static_cast<std::uint16_t>(best);
  }
  return out;
}

namespace {

struct Counts {
  std::vector<std::size_t> pred, gt, inter;
};

Counts count_sets(const LabelMap& pred, const LabelMap& gt, std::size_t K) {
  if (pred.shape() != gt.shape()) {
    throw DimensionError("metric masks differ in shape: " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  }
  Counts c{std::vector<std::size_t>(K), std::vector<std::size_t>(K), std::vector<std::size_t>(K)};
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const auto p = pred[i], g = gt[i];
    if (p >= K || g >= K) throw DataError("label outside [0, " + std::to_string(K) + ") at site " + std::to_string(i));
    ++c.pred[p];
    ++c.gt[g];
    if (p == g) ++c.inter[p];
  }
  return c;
}

}  // namespace

std::vector<double> dsc(const LabelMap& pred, const LabelMap& gt, std::size_t K) {
  auto c = count_sets(pred, gt, K);
  std::vector<double> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t den = c.pred[k] + c.gt[k];
    out[k] = den == 0 ? 1.0 : 2.0 * double(c.inter[k]) / double(den);
  }
  return out;
}

IouResult miou(const LabelMap& pred, const LabelMap& gt, std::size_t K) {
  auto c = count_sets(pred, gt, K);
  IouResult r;
  r.per_class.resize(K);
  double acc = 0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t uni = c.pred[k] + c.gt[k] - c.inter[k];
    r.per_class[k] = uni == 0 ? 1.0 : double(c.inter[k]) / double(uni);
    if (c.gt[k] > 0) {
      acc += r.per_class[k];
      ++present;
    }
  }
  r.mean = present ? acc / double(present) : 1.0;
  return r;
}

double foreground_mean(const std::vector<double>& per_class) {
  if (per_class.size() < 2) return per_class.empty() ? 0.0 : per_class[0];
  return std::accumulate(per_class.begin() + 1, per_class.end(), 0.0) / double(per_class.size() - 1);
}

double poly_lr(double lr0, std::size_t epoch, std::size_t total, double exponent) {
  if (total == 0 || epoch > total) {
    throw ContractError("poly_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(total) + "]");
  }
  return lr0 * std::pow(1.0 - double(epoch) / double(total), exponent);
}

template <typename T>
void sgd_step(TensorMap<T>& weights, const TensorMap<T>& grads, TensorMap<T>& state, const SgdOptions& opt) {
  if (grads.size() != weights.size()) throw ContractError("sgd_step: gradient and weight name sets differ");
  for (const auto& [name, g] : grads) {
    auto it = weights.find(name);
    if (it == weights.end()) throw ContractError("sgd_step: gradient for unknown weight '" + name + "'");
    if (it->second.shape() != g.shape()) throw ContractError("sgd_step: gradient shape mismatch for '" + name + "'");
  }
  const T lr = static_cast<T>(opt.lr), mu = static_cast<T>(opt.momentum), wd = static_cast<T>(opt.weight_decay);
  for (auto& [name, p] : weights) {
    const auto& g = grads.at(name);
    auto& v = state[name];
    if (v.shape() != p.shape()) v = Tensor<T>(p.shape(), T(0));
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const T d = g[i] + wd * p[i];
      v[i] = mu * v[i] + d;
      p[i] -= lr * (opt.nesterov ? d + mu * v[i] : v[i]);
    }
  }
}

void TrainConfig::validate() const {
  auto bad = [](const char* f, const std::string& why) {
    throw ConfigError(std::string("invalid config field '") + f + "': " + why);
  };
  if (!(lr0 > 0)) bad("lr0", "must be > 0");
  if (!(momentum >= 0 && momentum < 1)) bad("momentum", "must lie in [0, 1)");
  if (epochs < 1) bad("epochs", "must be >= 1");
  if (batch_size < 1) bad("batch_size", "must be >= 1");
  if (!(weight_decay >= 0)) bad("weight_decay", "must be >= 0");
  if (!(poly_exponent >= 0)) bad("poly_exponent", "must be >= 0");
}

std::string to_json_line(const EpochLog& e) {
  cfgio::json j{{"epoch", e.epoch}, {"lr", e.lr}, {"loss", e.loss}, {"train_dsc", e.train_dsc}, {"wall_ms", e.wall_ms}};
  return j.dump();
}

void write_checkpoint(const std::filesystem::path& weights_path, const net::ModelWeights<float>& weights,
                      const net::NetworkConfig& net_config, const EpochLog& at) {
  net::save_weights(weights, weights_path);
  cfgio::json side{{"config", cfgio::to_json(net_config)},
                   {"epoch", at.epoch},
                   {"loss", at.loss},
                   {"train_dsc", at.train_dsc}};
  auto sidecar = weights_path;
  sidecar += ".json";
  cfgio::write_json_file(sidecar, side);
}

TrainResult train(const TrainConfig& config, const net::NetworkConfig& net_config, const std::vector<Sample>& data,
                  std::optional<net::ModelWeights<float>> init, const TrainHooks& hooks) {
  config.validate();
  net_config.validate();
  if (data.empty()) throw DataError("train: empty dataset");
  for (const auto& s : data) net::check_input(net_config, s.image.shape());

  TrainResult res;
  res.weights = init ? std::move(*init) : net::build<float>(net_config, config.seed);
  net::check_weights(res.weights, net_config);
  res.best = res.weights;
  double best_dsc = -1;

  TensorMap<float> momentum;
  std::mt19937_64 shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const SgdOptions base{0, config.momentum, config.nesterov, config.weight_decay};

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    SgdOptions opt = base;
    opt.lr = poly_lr(config.lr0, epoch, config.epochs, config.poly_exponent);
    double loss_sum = 0, dsc_sum = 0;

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const float inv = 1.0f / float(stop - start);
      TensorMap<float> grads;
      for (const auto& [name, w] : res.weights) grads.emplace(name, Tensor<float>(w.shape(), 0.0f));
      for (std::size_t i = start; i < stop; ++i) {
        const auto& s = data[order[i]];
        ad::Tape<float> tape;
        auto params = net::tape_params(res.weights, tape);
        const auto where = "epoch " + std::to_string(epoch) + ", step " + std::to_string(res.steps) + ", sample '" +
                           s.id + "'";
        std::optional<ad::Var<float>> logits_opt;
        try {
          logits_opt = net::forward(params, net_config, ad::Var<float>::constant(s.image));
        } catch (const NumericError& e) {
          // NaN inputs trip the scan guard before a loss exists
          throw NumericError("non-finite loss at " + where + " (" + e.what() + ")");
        }
        const auto& logits = *logits_opt;
        auto loss = dice_ce_loss(logits, s.mask);
        const double lv = loss.value()[0];
        if (!std::isfinite(lv)) throw NumericError("non-finite loss at " + where);
        loss_sum += lv;
        dsc_sum += foreground_mean(dsc(argmax_classes(logits.value()), s.mask, net_config.num_classes));
        tape.backward(loss);
        for (auto& [name, v] : params) {
          auto& acc = grads.at(name);
          const auto& g = v.grad();
          for (std::size_t k = 0; k < acc.numel(); ++k) acc[k] += inv * g[k];
        }
      }
      sgd_step(res.weights, grads, momentum, opt);
      ++res.steps;
    }

    EpochLog e;
    e.epoch = epoch;
    e.lr = opt.lr;
    e.loss = loss_sum / double(data.size());
    e.train_dsc = dsc_sum / double(data.size());
    e.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(e);
    if (e.train_dsc > best_dsc) {
      best_dsc = e.train_dsc;
      res.best = res.weights;
      if (hooks.checkpoint_dir) write_checkpoint(*hooks.checkpoint_dir / "best.lmuw", res.best, net_config, e);
    }
    if (hooks.checkpoint_dir) write_checkpoint(*hooks.checkpoint_dir / "last.lmuw", res.weights, net_config, e);
    if (hooks.on_epoch) hooks.on_epoch(e);
  }
  return res;
}

MetricReport aggregate(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts, std::size_t K) {
  if (preds.size() != gts.size()) throw DimensionError("aggregate: prediction and ground-truth counts differ");
  MetricReport r;
  r.dsc.assign(K, 0);
  r.iou.assign(K, 0);
  r.samples = preds.size();
  if (preds.empty()) return r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto d = dsc(preds[i], gts[i], K);
    const auto u = miou(preds[i], gts[i], K);
    for (std::size_t k = 0; k < K; ++k) {
      r.dsc[k] += d[k];
      r.iou[k] += u.per_class[k];
    }
    r.miou += u.mean;
  }
  const double n = double(preds.size());
  for (std::size_t k = 0; k < K; ++k) {
    r.dsc[k] /= n;
    r.iou[k] /= n;
  }
  r.miou /= n;
  r.mean_dsc = foreground_mean(r.dsc);
  return r;
}

MetricReport evaluate(const net::ModelWeights<float>& weights, const net::NetworkConfig& net_config,
                      const std::vector<Sample>& data) {
  net::check_weights(weights, net_config);
  const auto params = net::constant_params(weights);
  std::vector<LabelMap> preds, gts;
  for (const auto& s : data) {
    auto logits = net::forward(params, net_config, ad::Var<float>::constant(s.image)).value();
    preds.push_back(argmax_classes(logits));
    gts.push_back(s.mask);
  }
  return aggregate(preds, gts, net_config.num_classes);
}

std::string MetricReport::to_json() const {
  cfgio::json j{{"dsc", dsc}, {"iou", iou}, {"mean_dsc", mean_dsc}, {"miou", miou}, {"samples", samples}};
  return j.dump(2);
}

template ad::Var<float> dice_ce_loss(const ad::Var<float>&, const LabelMap&);
template ad::Var<double> dice_ce_loss(const ad::Var<double>&, const LabelMap&);
template float dice_ce_loss(const Tensor<float>&, const LabelMap&);
template double dice_ce_loss(const Tensor<double>&, const LabelMap&);
template LabelMap argmax_classes(const Tensor<float>&);
template LabelMap argmax_classes(const Tensor<double>&);
template void sgd_step(TensorMap<float>&, const TensorMap<float>&, TensorMap<float>&, const SgdOptions&);
template void sgd_step(TensorMap<double>&, const TensorMap<double>&, TensorMap<double>&, const SgdOptions&);

}  // namespace lmunet::train
