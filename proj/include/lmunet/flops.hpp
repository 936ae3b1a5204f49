#pragma once

#include <cstdint>

namespace lmunet::flops {

// Counting convention shared by the analytic cost model and the instrumented
// kernels: one multiply-accumulate is two FLOPs, normalizations and
// activations cost five FLOPs per element, elementwise arithmetic one FLOP per
// element, and the selective scan 6N FLOPs per channel-step.
inline constexpr std::uint64_t kFlopsPerMac = 2;
inline constexpr std::uint64_t kNormFlopsPerElement = 5;
inline constexpr std::uint64_t kActivationFlopsPerElement = 5;
inline constexpr std::uint64_t kElementwiseFlops = 1;
inline constexpr std::uint64_t kScanFlopsPerStatePerStep = 6;

inline constexpr const char* kConventionTag = "mac=2flop;norm=5;act=5;elementwise=1;scan=6N";

struct Tally {
  std::uint64_t macs = 0;
  std::uint64_t other = 0;  // FLOPs that are not multiply-accumulates

  std::uint64_t flops() const { return kFlopsPerMac * macs + other; }
};

/// Active tally for the calling thread, or nullptr when counting is off.
Tally* active();

inline void add_macs(std::uint64_t n) {
  if (auto* t = active()) t->macs += n;
}
inline void add_other(std::uint64_t n) {
  if (auto* t = active()) t->other += n;
}

/// Routes every instrumented kernel invoked on this thread into `tally` for
/// the recorder's lifetime.
class Recorder {
 public:
  explicit Recorder(Tally& tally);
  ~Recorder();
  Recorder(const Recorder&) = delete;
  Recorder& operator=(const Recorder&) = delete;

 private:
  Tally* previous_;
};

}  // namespace lmunet::flops
