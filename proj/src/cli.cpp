#include "lmunet/cli.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "lmunet/bench.hpp"
#include "lmunet/config_io.hpp"
#include "lmunet/cost.hpp"
#include "lmunet/data_io.hpp"

namespace lmunet::cli {

namespace fs = std::filesystem;
using cfgio::json;

namespace {

const char* const kNetworkKeys[] = {"rank",     "in_channels", "num_classes", "base_channels", "encoder_rvm_counts",
                                    "bottleneck_rvm_count", "expand", "d_state", "dt_rank", "conv_width",
                                    "attention_heads", "ablation"};

bool is_network_key(const std::string& k) {
  return std::find(std::begin(kNetworkKeys), std::end(kNetworkKeys), k) != std::end(kNetworkKeys);
}

// Splits a combined config file into its network and training halves.
std::pair<json, json> config_file(const Invocation& inv) {
  json n = json::object(), t = json::object();
  if (!inv.config) return {n, t};
  const auto j = cfgio::read_json_file(*inv.config);
  if (!j.is_object()) throw ConfigError(inv.config->string() + ": config must be a JSON object");
  // the nested layout written next to checkpoints reads back as-is
  if (j.contains("network") || j.contains("train")) {
    for (const auto& [k, v] : j.items()) {
      if (k != "network" && k != "train") throw ConfigError("invalid config field '" + k + "': unknown key");
    }
    return {j.value("network", json::object()), j.value("train", json::object())};
  }
  for (const auto& [k, v] : j.items()) (is_network_key(k) ? n : t)[k] = v;
  return {n, t};
}

fs::path out_dir(const Invocation& inv) {
  const fs::path dir = inv.out.value_or("lmunet_out");
  fs::create_directories(dir);
  return dir;
}

Shape extents_for(const Invocation& inv, int rank, std::size_t fallback) {
  Shape s = inv.size;
  if (s.empty()) s.push_back(fallback);
  if (s.size() == 1) s.assign(static_cast<std::size_t>(rank), s[0]);
  if (s.size() != static_cast<std::size_t>(rank)) {
    throw ConfigError("invalid config field 'size': " + std::to_string(s.size()) + " extents for rank " +
                      std::to_string(rank));
  }
  return s;
}

// Config aligned with a dataset: rank and class count follow the manifest
// unless set explicitly, in which case they must agree.
net::NetworkConfig dataset_config(const Invocation& inv, const data::DatasetManifest& m) {
  auto [nj, tj] = config_file(inv);
  auto cfg = network_config(inv);
  const bool rank_set = inv.rank || nj.contains("rank");
  const bool classes_set = inv.classes || nj.contains("num_classes");
  if (rank_set && cfg.rank != m.rank) {
    throw ConfigError("invalid config field 'rank': " + std::to_string(cfg.rank) + " but the dataset is " +
                      std::to_string(m.rank) + "D");
  }
  if (classes_set && cfg.num_classes != m.num_classes) {
    throw ConfigError("invalid config field 'num_classes': dataset has " + std::to_string(m.num_classes));
  }
  cfg.rank = m.rank;
  cfg.num_classes = m.num_classes;
  cfg.validate();
  return cfg;
}

data::DatasetManifest require_manifest(const Invocation& inv) {
  if (!inv.data) throw ConfigError("--data <manifest.json> is required");
  return data::load_manifest(*inv.data);
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw DataError("cannot write " + p.string());
  f << s;
}

// 8-bit grayscale: image in the lower half of the range, labels brighten it.
void write_overlay_pgm(const fs::path& p, const Tensor<float>& image, const LabelMap& pred, std::size_t classes) {
  Shape sp = pred.shape();
  std::size_t h = sp[sp.size() - 2], w = sp.back();
  std::size_t offset = 0;
  if (sp.size() == 3) offset = (sp[0] / 2) * h * w;  // middle slice
  float lo = *std::min_element(image.data().begin(), image.data().end());
  float hi = *std::max_element(image.data().begin(), image.data().end());
  const float span = hi > lo ? hi - lo : 1.f;
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + p.string());
  f << "P5\n" << w << ' ' << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i) {
    const float g = (image[offset + i] - lo) / span;
    const float lab = classes > 1 ? float(pred[offset + i]) / float(classes - 1) : 0.f;
    f.put(static_cast<char>(static_cast<unsigned char>(std::lround(127.f * g + 128.f * lab))));
  }
}

std::string summary(const train::MetricReport& m) {
  std::ostringstream s;
  s << "mean_dsc=" << m.mean_dsc << " miou=" << m.miou << " samples=" << m.samples;
  return s.str();
}

}  // namespace

Invocation parse(const std::vector<std::string>& args) {
  Invocation inv;
  CLI::App app{"Lightweight state-space UNet for segmentation: generate data, train, evaluate, predict, audit costs"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Expand all help");

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", inv.config, "JSON config (network and training fields)");
    sub->add_option("--out", inv.out, "Output directory");
    sub->add_option("--seed", inv.seed, "RNG seed");
    sub->add_option("--threads", inv.threads, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--deterministic", inv.deterministic, "Bitwise-reproducible execution");
    sub->add_option("--rank", inv.rank, "Spatial dimensionality")->check(CLI::IsMember({2, 3}));
    sub->add_option("--classes,--num_classes", inv.classes, "Number of classes");
    sub->add_option("--in_channels", inv.in_channels, "Input channels");
    sub->add_option("--base_channels", inv.base_channels, "Stem width");
    sub->add_option("--expand", inv.expand, "VSS expansion factor");
    sub->add_option("--d_state", inv.d_state, "SSM state size");
    sub->add_option("--dt_rank", inv.dt_rank, "Step-size projection rank (0: automatic)");
    sub->add_option("--conv_width", inv.conv_width, "Causal sequence conv width");
    sub->add_option("--attention_heads", inv.attention_heads, "Heads of the attention stand-in");
    sub->add_option("--ablation", inv.ablation, "Ablation variant")
        ->check(CLI::IsMember({"none", "conv3", "attn", "no-adjust", "no-residual"}));
    sub->add_option("--epochs", inv.epochs, "Training epochs");
    sub->add_option("--batch,--batch_size", inv.batch, "Mini-batch size");
    sub->add_option("--lr0", inv.lr0, "Initial learning rate");
    sub->add_option("--momentum", inv.momentum, "SGD momentum");
    sub->add_option("--weight_decay", inv.weight_decay, "L2 weight decay");
    sub->add_option("--poly_exponent", inv.poly_exponent, "Poly schedule exponent");
    sub->add_option("--size", inv.size, "Spatial extents (one value broadcasts)");
  };

  auto* gen = app.add_subcommand("gen", "Generate a synthetic organ/tumour dataset");
  common(gen);
  gen->add_option("--n", inv.n, "Number of samples");
  auto* tr = app.add_subcommand("train", "Train on a dataset manifest");
  common(tr);
  tr->add_option("--data", inv.data, "Dataset manifest")->required();
  tr->add_option("--weights", inv.weights, "Initial weights");
  auto* ev = app.add_subcommand("eval", "Evaluate weights on a dataset");
  common(ev);
  ev->add_option("--data", inv.data, "Dataset manifest")->required();
  ev->add_option("--weights", inv.weights, "Weight file")->required();
  auto* pr = app.add_subcommand("predict", "Write predicted label maps");
  common(pr);
  pr->add_option("--data", inv.data, "Dataset manifest")->required();
  pr->add_option("--weights", inv.weights, "Weight file")->required();
  pr->add_flag("--overlay", inv.overlay, "Also write grayscale PGM overlays");
  auto* co = app.add_subcommand("cost", "Analytic parameter and FLOP report");
  common(co);
  auto* be = app.add_subcommand("bench", "Time the scan kernels against attention");
  common(be);
  be->add_flag("--no-attention", inv.no_attention, "Skip attention timings");
  be->add_option("--trials", inv.trials, "Timed trials per point")->check(CLI::PositiveNumber);
  auto* ab = app.add_subcommand("ablate", "Train, evaluate and cost every ablation variant");
  common(ab);
  ab->add_option("--data", inv.data, "Dataset manifest (default: generated toy set)");
  ab->add_option("--n", inv.n, "Toy samples when no dataset is given");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    const int code = app.exit(e, o, er);
    if (code == 0) throw UsageExit{kOk, o.str()};
    throw UsageExit{kUsage, er.str() + o.str() + app.help()};
  }
  for (auto* sub : app.get_subcommands()) inv.subcommand = sub->get_name();
  return inv;
}

net::NetworkConfig network_config(const Invocation& inv) {
  auto [nj, tj] = config_file(inv);
  const int rank = inv.rank.value_or(nj.contains("rank") && nj["rank"].is_number_integer() ? nj["rank"].get<int>() : 3);
  auto c = cfgio::network_from_json(nj, net::NetworkConfig::defaults(rank));
  if (inv.rank) c.rank = *inv.rank;
  if (inv.in_channels) c.in_channels = *inv.in_channels;
  if (inv.classes) c.num_classes = *inv.classes;
  if (inv.base_channels) c.base_channels = *inv.base_channels;
  if (inv.expand) c.expand = *inv.expand;
  if (inv.d_state) c.d_state = *inv.d_state;
  if (inv.dt_rank) c.dt_rank = *inv.dt_rank;
  if (inv.conv_width) c.conv_width = *inv.conv_width;
  if (inv.attention_heads) c.attention_heads = *inv.attention_heads;
  if (inv.ablation) c = net::apply_ablation(c, net::parse_variant(*inv.ablation));
  c.validate();
  return c;
}

train::TrainConfig train_config(const Invocation& inv) {
  auto [nj, tj] = config_file(inv);
  auto t = cfgio::train_from_json(tj, train::TrainConfig{});
  if (inv.epochs) t.epochs = *inv.epochs;
  if (inv.batch) t.batch_size = *inv.batch;
  if (inv.lr0) t.lr0 = *inv.lr0;
  if (inv.momentum) t.momentum = *inv.momentum;
  if (inv.weight_decay) t.weight_decay = *inv.weight_decay;
  if (inv.poly_exponent) t.poly_exponent = *inv.poly_exponent;
  if (inv.seed) t.seed = *inv.seed;
  if (inv.deterministic) t.deterministic = true;
  t.validate();
  return t;
}

int cmd_gen(const Invocation& inv, std::ostream& out) {
  const int rank = inv.rank.value_or(2);
  const auto extents = extents_for(inv, rank, 64);
  const auto dir = out_dir(inv);
  const auto m = data::synth_generate(inv.seed.value_or(0), inv.n, rank, extents, dir, inv.classes.value_or(3));
  out << "generated " << m.entries.size() << " samples of " << shape_str(extents) << " into "
      << (dir / "manifest.json").string() << '\n';
  return kOk;
}

int cmd_train(const Invocation& inv, std::ostream& out) {
  const auto m = require_manifest(inv);
  const auto cfg = dataset_config(inv, m);
  const auto tc = train_config(inv);
  const auto samples = data::load_dataset(m);
  const auto dir = out_dir(inv);
  std::optional<net::ModelWeights<float>> init;
  if (inv.weights) init = net::load_weights(*inv.weights, cfg);

  cfgio::write_json_file(dir / "config.json", {{"network", cfgio::to_json(cfg)}, {"train", cfgio::to_json(tc)}});
  std::ofstream log(dir / "train_log.jsonl", std::ios::trunc);
  train::TrainHooks hooks;
  hooks.checkpoint_dir = dir;
  hooks.on_epoch = [&](const train::EpochLog& e) {
    log << train::to_json_line(e) << '\n';
    log.flush();
    out << "epoch " << e.epoch << " lr=" << e.lr << " loss=" << e.loss << " train_dsc=" << e.train_dsc << '\n';
  };
  const auto res = train::train(tc, cfg, samples, std::move(init), hooks);
  out << "trained " << res.steps << " steps; checkpoints in " << dir.string() << '\n';
  return kOk;
}

int cmd_eval(const Invocation& inv, std::ostream& out) {
  const auto m = require_manifest(inv);
  const auto cfg = dataset_config(inv, m);
  const auto w = net::load_weights(*inv.weights, cfg);
  const auto report = train::evaluate(w, cfg, data::load_dataset(m));
  write_text(out_dir(inv) / "metrics.json", report.to_json() + "\n");
  out << report.to_json() << '\n' << summary(report) << '\n';
  return kOk;
}

int cmd_predict(const Invocation& inv, std::ostream& out) {
  const auto m = require_manifest(inv);
  const auto cfg = dataset_config(inv, m);
  const auto w = net::load_weights(*inv.weights, cfg);
  const auto params = net::constant_params(w);
  const auto dir = out_dir(inv);
  std::vector<LabelMap> preds, gts;
  for (const auto& s : data::load_dataset(m)) {
    auto logits = net::forward(params, cfg, ad::Var<float>::constant(s.image)).value();
    auto pred = train::argmax_classes(logits);
    data::save_tensor(pred, dir / (s.id + "_pred.lmtx"));
    if (inv.overlay) write_overlay_pgm(dir / (s.id + "_overlay.pgm"), s.image, pred, cfg.num_classes);
    preds.push_back(std::move(pred));
    gts.push_back(s.mask);
  }
  const auto report = train::aggregate(preds, gts, cfg.num_classes);
  out << "wrote " << preds.size() << " predictions to " << dir.string() << "; " << summary(report) << '\n';
  return kOk;
}

int cmd_cost(const Invocation& inv, std::ostream& out) {
  const auto cfg = network_config(inv);
  const auto extents = extents_for(inv, cfg.rank, cfg.rank == 3 ? 128 : 512);
  const auto r = cost::count_flops(cfg, extents);
  const auto csv = r.to_csv();
  out << csv;
  out << "convention=" << r.convention << " input=" << shape_str(extents) << '\n';
  out << "GFLOPs=" << double(r.total_flops) / 1e9 << " GMACs=" << double(r.total_macs) / 1e9
      << " Mparams=" << double(r.total_params) / 1e6 << '\n';
  out << "params=" << r.total_params << " flops=" << r.total_flops << " macs=" << r.total_macs << '\n';
  if (inv.out) write_text(out_dir(inv) / "cost.csv", csv);
  return kOk;
}

int cmd_bench(const Invocation& inv, std::ostream& out) {
  bench::BenchOptions opt;
  opt.trials = inv.trials;
  opt.attention = !inv.no_attention;
  opt.seed = inv.seed.value_or(0);
  const auto rows = bench::run(opt);
  const auto csv = bench::to_csv(rows);
  out << csv;
  for (const auto& d : bench::doubling_ratios(rows)) {
    out << d.kernel << " t(" << 2 * d.length << ")/t(" << d.length << ")=" << d.ratio << " band=[" << d.lo << ", "
        << d.hi << "]" << (d.in_band ? "" : " FLAGGED: outside band") << '\n';
  }
  write_text(out_dir(inv) / "bench.csv", csv);
  return kOk;
}

int cmd_ablate(const Invocation& inv, std::ostream& out) {
  const auto dir = out_dir(inv);
  data::DatasetManifest m;
  if (inv.data) {
    m = data::load_manifest(*inv.data);
  } else {
    const int rank = inv.rank.value_or(2);
    m = data::synth_generate(inv.seed.value_or(0), inv.n, rank, extents_for(inv, rank, 32), dir / "toy_data",
                             inv.classes.value_or(3));
  }
  const auto base = dataset_config(inv, m);
  if (base.ablation != net::Ablation{}) throw ConfigError("invalid config field 'ablation': ablate starts from the baseline");
  const auto tc = train_config(inv);
  const auto samples = data::load_dataset(m);
  const Shape extents = spatial_of(samples.front().image);
  const std::size_t K = base.num_classes;

  std::ostringstream csv;
  csv << "variant,params,flops";
  for (std::size_t k = 0; k < K; ++k) csv << ",dsc_" << k;
  for (std::size_t k = 0; k < K; ++k) csv << ",iou_" << k;
  csv << ",mean_dsc,miou,max_abs_diff_vs_baseline\n";

  Tensor<float> baseline_logits;
  for (auto v : {net::Variant::Baseline, net::Variant::Conv3, net::Variant::Attention, net::Variant::NoAdjust,
                 net::Variant::NoResidual}) {
    const auto cfg = net::apply_ablation(base, v);
    const auto name = std::string(net::variant_name(v));
    const auto res = train::train(tc, cfg, samples);
    const auto report = train::evaluate(res.weights, cfg, samples);
    const auto c = cost::count_flops(cfg, extents);
    write_text(dir / ("cost_" + name + ".csv"), c.to_csv());
    const auto logits = net::forward(res.weights, cfg, samples.front().image);
    double diff = 0;
    if (v == net::Variant::Baseline) {
      baseline_logits = logits;
    } else {
      for (std::size_t i = 0; i < logits.numel(); ++i)
        diff = std::max(diff, double(std::abs(logits[i] - baseline_logits[i])));
    }
    csv << name << ',' << c.total_params << ',' << c.total_flops;
    for (auto d : report.dsc) csv << ',' << d;
    for (auto d : report.iou) csv << ',' << d;
    csv << ',' << report.mean_dsc << ',' << report.miou << ',' << diff << '\n';
    out << name << ": params=" << c.total_params << " flops=" << c.total_flops << ' ' << summary(report)
        << " max_abs_diff_vs_baseline=" << diff << '\n';
  }
  write_text(dir / "ablation.csv", csv.str());
  out << "wrote " << (dir / "ablation.csv").string() << '\n';
  return kOk;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Invocation inv;
  try {
    inv = parse(args);
  } catch (const UsageExit& u) {
    (u.code == kOk ? out : err) << u.text;
    return u.code;
  }
  try {
    if (inv.threads) omp_set_num_threads(*inv.threads);
    if (inv.deterministic) omp_set_dynamic(0);
    if (inv.subcommand == "gen") return cmd_gen(inv, out);
    if (inv.subcommand == "train") return cmd_train(inv, out);
    if (inv.subcommand == "eval") return cmd_eval(inv, out);
    if (inv.subcommand == "predict") return cmd_predict(inv, out);
    if (inv.subcommand == "cost") return cmd_cost(inv, out);
    if (inv.subcommand == "bench") return cmd_bench(inv, out);
    if (inv.subcommand == "ablate") return cmd_ablate(inv, out);
    err << "unknown subcommand\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kConfigOrData;
  } catch (const cfgio::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfigOrData;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kConfigOrData;
  }
}

}  // namespace lmunet::cli
