#include "lmunet/flops.hpp"

namespace lmunet::flops {

namespace {
thread_local Tally* g_active = nullptr;
}

Tally* active() { return g_active; }

Recorder::Recorder(Tally& tally) : previous_(g_active) { g_active = &tally; }

Recorder::~Recorder() { g_active = previous_; }

}  // namespace lmunet::flops
