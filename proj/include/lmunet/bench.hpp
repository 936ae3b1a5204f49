#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Wall-clock scaling of the selective scan against self-attention.
namespace lmunet::bench {

struct BenchOptions {
  std::vector<std::size_t> lengths{256, 512, 1024, 2048, 4096};
  std::size_t channels = 64;
  std::size_t state = 16;
  std::size_t trials = 5;
  bool attention = true;
  std::size_t attention_channels = 32;
  std::size_t attention_heads = 4;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t length = 0;
  std::string kernel;  // scan_seq, scan_par, attention
  double median_ns = 0;
};

std::vector<BenchRow> run(const BenchOptions& opt);

/// "L,kernel,median_ns" rows.
std::string to_csv(const std::vector<BenchRow>& rows);

struct Doubling {
  std::string kernel;
  std::size_t length = 0;  // t(2L) / t(L) at this L
  double ratio = 0;
  double lo = 0, hi = 0;
  bool in_band = false;
};

/// Doubling ratios for L >= min_length against [1.4, 3.0] for scans and
/// [3.0, 6.0] for attention.
std::vector<Doubling> doubling_ratios(const std::vector<BenchRow>& rows, std::size_t min_length = 1024);

}  // namespace lmunet::bench
