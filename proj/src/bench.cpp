#include "lmunet/bench.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <random>
#include <sstream>

#include "lmunet/blocks.hpp"
#include "lmunet/init.hpp"
#include "lmunet/ssm.hpp"

namespace lmunet::bench {

namespace {

template <typename F>
double median_ns(std::size_t trials, F&& fn) {
  fn();  // warm-up
  std::vector<double> t;
  for (std::size_t i = 0; i < std::max<std::size_t>(trials, 1); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double, std::nano>(std::chrono::steady_clock::now() - t0).count());
  }
  std::nth_element(t.begin(), t.begin() + t.size() / 2, t.end());
  return t[t.size() / 2];
}

Tensor<float> random_tensor(Shape s, std::mt19937_64& rng) {
  Tensor<float> t(std::move(s));
  std::normal_distribution<float> g(0.f, 1.f);
  for (auto& v : t.data()) v = g(rng);
  return t;
}

}  // namespace

std::vector<BenchRow> run(const BenchOptions& opt) {
  std::mt19937_64 rng(opt.seed);
  const auto params = ssm::init_params<float>(opt.channels, opt.state, (opt.channels + 15) / 16, rng);
  blocks::AttentionWeights<float> attn;
  if (opt.attention) {
    const std::size_t C = opt.attention_channels;
    attn.wq = ad::Var<float>::constant(kaiming_uniform<float>({C, C}, C, rng));
    attn.wk = ad::Var<float>::constant(kaiming_uniform<float>({C, C}, C, rng));
    attn.wv = ad::Var<float>::constant(kaiming_uniform<float>({C, C}, C, rng));
    attn.wo = ad::Var<float>::constant(kaiming_uniform<float>({C, C}, C, rng));
    attn.heads = opt.attention_heads;
  }
  std::vector<BenchRow> rows;
  for (auto L : opt.lengths) {
    const auto x = random_tensor({L, opt.channels}, rng);
    rows.push_back({L, "scan_seq", median_ns(opt.trials, [&] { ssm::selective_scan_seq(x, params); })});
    rows.push_back({L, "scan_par", median_ns(opt.trials, [&] { ssm::selective_scan_par(x, params); })});
    if (opt.attention) {
      const auto xa = ad::Var<float>::constant(random_tensor({L, opt.attention_channels}, rng));
      rows.push_back({L, "attention", median_ns(opt.trials, [&] { blocks::self_attention_forward(xa, attn); })});
    }
  }
  return rows;
}

std::string to_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out << "L,kernel,median_ns\n";
  for (const auto& r : rows) out << r.length << ',' << r.kernel << ',' << static_cast<long long>(r.median_ns) << '\n';
  return out.str();
}

std::vector<Doubling> doubling_ratios(const std::vector<BenchRow>& rows, std::size_t min_length) {
  std::map<std::string, std::map<std::size_t, double>> by;
  for (const auto& r : rows) by[r.kernel][r.length] = r.median_ns;
  std::vector<Doubling> out;
  for (const auto& [kernel, times] : by) {
    const bool quad = kernel == "attention";
    for (const auto& [L, t] : times) {
      auto next = times.find(2 * L);
      if (L < min_length || next == times.end() || t <= 0) continue;
      Doubling d{kernel, L, next->second / t, quad ? 3.0 : 1.4, quad ? 6.0 : 3.0};
      d.in_band = d.ratio >= d.lo && d.ratio <= d.hi;
      out.push_back(d);
    }
  }
  return out;
}

}  // namespace lmunet::bench
