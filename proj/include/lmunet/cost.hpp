#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lmunet/network.hpp"

// Analytic parameter and FLOP accounting. Nothing is allocated: every row is
// derived from the config alone, and each row's parameter count equals the
// element count of the weights whose names start with "<row>.".
namespace lmunet::cost {

struct CostRow {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::uint64_t macs = 0;
};

struct CostReport {
  std::vector<CostRow> rows;
  std::uint64_t total_params = 0;
  std::uint64_t total_flops = 0;
  std::uint64_t total_macs = 0;
  bool has_flops = false;
  std::string convention;

  /// "name,params,flops" rows plus a trailing TOTAL row.
  std::string to_csv() const;
  /// Row lookup; throws ContractError when absent.
  const CostRow& row(const std::string& name) const;
};

CostReport count_params(const net::NetworkConfig& config);

/// `spatial` holds the input extents (rank entries, each divisible by 8).
CostReport count_flops(const net::NetworkConfig& config, const Shape& spatial);

/// Elementary counts used by the auditor.
constexpr std::uint64_t linear_params(std::uint64_t cin, std::uint64_t cout, bool bias) {
  return cin * cout + (bias ? cout : 0);
}
constexpr std::uint64_t linear_flops(std::uint64_t tokens, std::uint64_t cin, std::uint64_t cout, bool bias) {
  return 2 * tokens * cin * cout + (bias ? tokens * cout : 0);
}

}  // namespace lmunet::cost
