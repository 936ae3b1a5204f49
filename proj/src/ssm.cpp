#include "lmunet/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>

#include "lmunet/flops.hpp"
#include "lmunet/init.hpp"
#include "lmunet/ops.hpp"

namespace lmunet::ssm {

template <typename T>
void SsmParams<T>::validate() const {
  if (a_log.rank() != 2) throw DimensionError("ssm: a_log must be (C, N), got " + shape_str(a_log.shape()));
  const std::size_t C = a_log.dim(0), N = a_log.dim(1);
  if (N == 0 || C == 0) throw DimensionError("ssm: empty state or channel axis");
  const std::size_t R = w_dt_down.rank() == 2 ? w_dt_down.dim(0) : 0;
  const bool ok = d_skip.shape() == Shape{C} && w_bc.shape() == Shape{2 * N, C} && R >= 1 &&
                  w_dt_down.shape() == Shape{R, C} && w_dt_up.shape() == Shape{C, R} && dt_bias.shape() == Shape{C};
  if (!ok) throw DimensionError("ssm: inconsistent parameter shapes for C=" + std::to_string(C) + ", N=" + std::to_string(N));
}

template <typename T>
SsmParams<T> init_params(std::size_t channels, std::size_t state_size, std::size_t dt_rank, std::mt19937_64& rng,
                         double dt_min, double dt_max) {
  SsmParams<T> p;
  p.a_log = Tensor<T>(Shape{channels, state_size});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t n = 0; n < state_size; ++n) p.a_log[c * state_size + n] = static_cast<T>(std::log(double(n + 1)));
  p.d_skip = Tensor<T>(Shape{channels}, T(1));
  p.w_bc = kaiming_uniform<T>(Shape{2 * state_size, channels}, channels, rng);
  p.w_dt_down = kaiming_uniform<T>(Shape{dt_rank, channels}, channels, rng);
  p.w_dt_up = kaiming_uniform<T>(Shape{channels, dt_rank}, dt_rank, rng);
  p.dt_bias = Tensor<T>(Shape{channels});
  std::uniform_real_distribution<double> u(std::log(dt_min), std::log(dt_max));
  for (auto& v : p.dt_bias.data()) {
    const double dt = std::exp(u(rng));
    v = static_cast<T>(dt + std::log(-std::expm1(-dt)));  // softplus^-1(dt)
  }
  return p;
}

template <typename T>
Tensor<T> state_matrix(const Tensor<T>& a_log) {
  Tensor<T> a(a_log.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] = -std::exp(a_log[i]);
  return a;
}

template <typename T>
StepParams<T> project_step_params(const Tensor<T>& x, const SsmParams<T>& p) {
  p.validate();
  const std::size_t N = p.state_size();
  auto dt = ops::activation(ops::Activation::Softplus,
                            ops::linear(ops::linear(x, p.w_dt_down), p.w_dt_up, &p.dt_bias));
  auto bc = ops::linear(x, p.w_bc);
  const std::size_t L = bc.numel() / (2 * N);
  StepParams<T> out{std::move(dt), Tensor<T>(Shape{L, N}), Tensor<T>(Shape{L, N})};
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t n = 0; n < N; ++n) {
      out.b[t * N + n] = bc[t * 2 * N + n];
      out.c[t * N + n] = bc[t * 2 * N + N + n];
    }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> discretize(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b,
                                           bool allow_zero_step) {
  if (delta.rank() != 2 || a.rank() != 2 || b.rank() != 2 || a.dim(0) != delta.dim(1) ||
      b.dim(0) != delta.dim(0) || b.dim(1) != a.dim(1)) {
    throw DimensionError("discretize: incompatible shapes delta " + shape_str(delta.shape()) + ", A " +
                         shape_str(a.shape()) + ", B " + shape_str(b.shape()));
  }
  const std::size_t L = delta.dim(0), C = delta.dim(1), N = a.dim(1);
  for (std::size_t i = 0; i < delta.numel(); ++i) {
    const bool bad = allow_zero_step ? !(delta[i] >= 0) : !(delta[i] > 0);
    if (bad) throw ContractError("discretize: step size must be positive, got " + std::to_string(double(delta[i])));
  }
  Tensor<T> a_bar(Shape{L, C, N}), b_bar(Shape{L, C, N});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < C; ++c) {
      const T dt = delta[t * C + c];
      for (std::size_t n = 0; n < N; ++n) {
        a_bar[(t * C + c) * N + n] = std::exp(dt * a[c * N + n]);
        b_bar[(t * C + c) * N + n] = dt * b[t * N + n];
      }
    }
  return {std::move(a_bar), std::move(b_bar)};
}

template <typename T>
std::vector<ScanStep<T>> make_steps(const Tensor<T>& a_bar, const Tensor<T>& b_bar, const Tensor<T>& x) {
  const std::size_t L = a_bar.dim(0), C = a_bar.dim(1), N = a_bar.dim(2);
  if (x.shape() != Shape{L, C}) throw DimensionError("make_steps: input " + shape_str(x.shape()) + " vs steps");
  std::vector<ScanStep<T>> steps;
  steps.reserve(L);
  for (std::size_t t = 0; t < L; ++t) {
    ScanStep<T> s{Tensor<T>(Shape{C, N}), Tensor<T>(Shape{C, N})};
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t i = (t * C + c) * N + n;
        s.a[c * N + n] = a_bar[i];
        s.u[c * N + n] = b_bar[i] * x[t * C + c];
      }
    steps.push_back(std::move(s));
  }
  return steps;
}

namespace {

// 32-bit scans carry the state in 64-bit so both kernels round only once.
template <typename T>
using Acc = std::conditional_t<(sizeof(T) < sizeof(double)), double, T>;

template <typename T>
void check_scan_shapes(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b,
                       const Tensor<T>& c, const Tensor<T>& d) {
  if (x.rank() != 2) throw DimensionError("selective scan: expected (L, C) input, got " + shape_str(x.shape()));
  if (x.dim(0) == 0) throw DimensionError("selective scan: empty sequence");
  const std::size_t L = x.dim(0), C = x.dim(1);
  const std::size_t N = a.rank() == 2 ? a.dim(1) : 0;
  const bool ok = delta.shape() == x.shape() && a.shape() == Shape{C, N} && b.shape() == Shape{L, N} &&
                  c.shape() == Shape{L, N} && d.shape() == Shape{C} && N > 0;
  if (!ok) {
    throw DimensionError("selective scan: inconsistent shapes x " + shape_str(x.shape()) + ", delta " +
                         shape_str(delta.shape()) + ", A " + shape_str(a.shape()) + ", B " + shape_str(b.shape()) +
                         ", C " + shape_str(c.shape()) + ", D " + shape_str(d.shape()));
  }
  for (const T v : delta.data()) {
    if (!std::isfinite(v)) throw NumericError("selective scan: non-finite step size");
    if (v < 0) throw ContractError("selective scan: negative step size");
  }
}

template <typename T>
Tensor<T> scan_sequential(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b,
                          const Tensor<T>& c, const Tensor<T>& d, Tensor<T>* states) {
  const std::size_t L = x.dim(0), C = x.dim(1), N = a.dim(1);
  Tensor<T> y(Shape{L, C});
  std::vector<Acc<T>> h(C * N, 0);
  for (std::size_t t = 0; t < L; ++t) {
    const T* bt = b.ptr() + t * N;
    const T* ct = c.ptr() + t * N;
    for (std::size_t ch = 0; ch < C; ++ch) {
      const Acc<T> dt = delta[t * C + ch];
      const Acc<T> xv = x[t * C + ch];
      const T* ac = a.ptr() + ch * N;
      Acc<T>* hc = h.data() + ch * N;
      Acc<T> acc = 0;
      for (std::size_t n = 0; n < N; ++n) {
        hc[n] = std::exp(dt * ac[n]) * hc[n] + dt * bt[n] * xv;
        acc += ct[n] * hc[n];
      }
      y[t * C + ch] = T(acc + d[ch] * xv);
    }
    if (states) std::copy(h.begin(), h.end(), states->ptr() + t * C * N);
  }
  return y;
}

// Work-efficient (up-sweep / down-sweep) exclusive prefix over the affine
// maps, one independent lane per (channel, state) pair.
template <typename T>
Tensor<T> scan_parallel(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b,
                        const Tensor<T>& c, const Tensor<T>& d, Tensor<T>* states) {
  const std::size_t L = x.dim(0), C = x.dim(1), N = a.dim(1), W = C * N;
  if (L < kParallelScanMinLength) return scan_sequential(x, delta, a, b, c, d, states);
  std::size_t P = 1;
  while (P < L) P <<= 1;
  std::vector<Acc<T>> sa(P * W, 1), su(P * W, 0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t tt = 0; tt < static_cast<std::ptrdiff_t>(L); ++tt) {
    const auto t = static_cast<std::size_t>(tt);
    for (std::size_t ch = 0; ch < C; ++ch) {
      const Acc<T> dt = delta[t * C + ch];
      const Acc<T> xv = x[t * C + ch];
      for (std::size_t n = 0; n < N; ++n) {
        sa[t * W + ch * N + n] = std::exp(dt * a[ch * N + n]);
        su[t * W + ch * N + n] = dt * b[t * N + n] * xv;
      }
    }
  }
  const std::vector<Acc<T>> step_a(sa.begin(), sa.begin() + L * W), step_u(su.begin(), su.begin() + L * W);

  for (std::size_t stride = 1; stride < P; stride <<= 1) {
    const auto count = static_cast<std::ptrdiff_t>(P / (2 * stride));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = 0; j < count; ++j) {
      const std::size_t k = static_cast<std::size_t>(j) * 2 * stride + 2 * stride - 1;
      Acc<T>* ak = sa.data() + k * W;
      Acc<T>* uk = su.data() + k * W;
      const Acc<T>* ae = sa.data() + (k - stride) * W;
      const Acc<T>* ue = su.data() + (k - stride) * W;
      for (std::size_t i = 0; i < W; ++i) {
        uk[i] = ak[i] * ue[i] + uk[i];
        ak[i] = ak[i] * ae[i];
      }
    }
  }
  std::fill(sa.begin() + (P - 1) * W, sa.begin() + P * W, T(1));
  std::fill(su.begin() + (P - 1) * W, su.begin() + P * W, T(0));
  for (std::size_t stride = P / 2; stride >= 1; stride >>= 1) {
    const auto count = static_cast<std::ptrdiff_t>(P / (2 * stride));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = 0; j < count; ++j) {
      const std::size_t k = static_cast<std::size_t>(j) * 2 * stride + 2 * stride - 1;
      Acc<T>* ak = sa.data() + k * W;
      Acc<T>* uk = su.data() + k * W;
      Acc<T>* al = sa.data() + (k - stride) * W;
      Acc<T>* ul = su.data() + (k - stride) * W;
      for (std::size_t i = 0; i < W; ++i) {
        const Acc<T> la = al[i], lu = ul[i];
        al[i] = ak[i];
        ul[i] = uk[i];
        // right prefix = left subtree total applied after the incoming prefix
        uk[i] = la * uk[i] + lu;
        ak[i] = la * ak[i];
      }
    }
    if (stride == 1) break;
  }

  Tensor<T> y(Shape{L, C});
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t tt = 0; tt < static_cast<std::ptrdiff_t>(L); ++tt) {
    const auto t = static_cast<std::size_t>(tt);
    const T* ct = c.ptr() + t * N;
    for (std::size_t ch = 0; ch < C; ++ch) {
      Acc<T> acc = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t i = t * W + ch * N + n;
        const Acc<T> h = step_a[i] * su[i] + step_u[i];
        if (states) (*states)[i] = T(h);
        acc += ct[n] * h;
      }
      y[t * C + ch] = T(acc + Acc<T>(d[ch]) * x[t * C + ch]);
    }
  }
  return y;
}

}  // namespace

template <typename T>
Tensor<T> scan(ScanKernel kernel, const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a,
               const Tensor<T>& b, const Tensor<T>& c, const Tensor<T>& d_skip, Tensor<T>* states) {
  check_scan_shapes(x, delta, a, b, c, d_skip);
  const std::size_t L = x.dim(0), C = x.dim(1), N = a.dim(1);
  if (states) *states = Tensor<T>(Shape{L, C, N});
  auto y = kernel == ScanKernel::Sequential ? scan_sequential(x, delta, a, b, c, d_skip, states)
                                            : scan_parallel(x, delta, a, b, c, d_skip, states);
  flops::add_other(flops::kScanFlopsPerStatePerStep * N * L * C);
  return y;
}

template <typename T>
Tensor<T> selective_scan_seq(const Tensor<T>& x, const SsmParams<T>& p) {
  if (x.rank() != 2 || x.dim(0) == 0) throw DimensionError("selective_scan_seq: empty or malformed sequence " + shape_str(x.shape()));
  auto steps = project_step_params(x, p);
  return scan(ScanKernel::Sequential, x, steps.delta, state_matrix(p.a_log), steps.b, steps.c, p.d_skip);
}

template <typename T>
Tensor<T> selective_scan_par(const Tensor<T>& x, const SsmParams<T>& p) {
  if (x.rank() != 2 || x.dim(0) == 0) throw DimensionError("selective_scan_par: empty or malformed sequence " + shape_str(x.shape()));
  auto steps = project_step_params(x, p);
  return scan(ScanKernel::ParallelPrefix, x, steps.delta, state_matrix(p.a_log), steps.b, steps.c, p.d_skip);
}

#define LMUNET_INSTANTIATE_SSM(T)                                                                              \
  template struct SsmParams<T>;                                                                                \
  template SsmParams<T> init_params(std::size_t, std::size_t, std::size_t, std::mt19937_64&, double, double); \
  template Tensor<T> state_matrix(const Tensor<T>&);                                                           \
  template StepParams<T> project_step_params(const Tensor<T>&, const SsmParams<T>&);                           \
  template std::pair<Tensor<T>, Tensor<T>> discretize(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                                      bool);                                                   \
  template std::vector<ScanStep<T>> make_steps(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> scan(ScanKernel, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                          const Tensor<T>&, const Tensor<T>&, Tensor<T>*);                                     \
  template Tensor<T> selective_scan_seq(const Tensor<T>&, const SsmParams<T>&);                                \
  template Tensor<T> selective_scan_par(const Tensor<T>&, const SsmParams<T>&);

LMUNET_INSTANTIATE_SSM(float)
LMUNET_INSTANTIATE_SSM(double)

}  // namespace lmunet::ssm

namespace lmunet::ad {

template <typename T>
Var<T> selective_scan(const Var<T>& x, const Var<T>& delta, const Var<T>& a_log, const Var<T>& b, const Var<T>& c,
                      const Var<T>& d_skip) {
  const bool track = x.requires_grad() || delta.requires_grad() || a_log.requires_grad() || b.requires_grad() ||
                     c.requires_grad() || d_skip.requires_grad();
  auto a = ssm::state_matrix(a_log.value());
  auto states = std::make_shared<Tensor<T>>();
  auto y = ssm::scan(ssm::ScanKernel::Sequential, x.value(), delta.value(), a, b.value(), c.value(),
                     d_skip.value(), track ? states.get() : nullptr);
  return make_result<T>(
      "selective_scan", std::move(y), {x, delta, a_log, b, c, d_skip},
      [x, delta, b, c, d_skip, a = std::move(a), states](const Tensor<T>& g, std::span<Tensor<T>* const> gr) {
        const std::size_t L = x.shape()[0], C = x.shape()[1], N = a.dim(1);
        const auto& xv = x.value();
        const auto& dv = delta.value();
        const auto& bv = b.value();
        const auto& cv = c.value();
        const auto& dsk = d_skip.value();
        const auto& H = *states;
        Tensor<T>* gx = gr[0];
        Tensor<T>* gdelta = gr[1];
        Tensor<T>* galog = gr[2];
        Tensor<T>* gb = gr[3];
        Tensor<T>* gc = gr[4];
        Tensor<T>* gd = gr[5];
        std::vector<T> carry(C * N, T(0));
        for (std::size_t ti = L; ti-- > 0;) {
          for (std::size_t ch = 0; ch < C; ++ch) {
            const T gy = g[ti * C + ch];
            const T xt = xv[ti * C + ch];
            const T dt = dv[ti * C + ch];
            if (gd) (*gd)[ch] += gy * xt;
            T g_delta = 0, g_x = gy * dsk[ch];
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t hi = (ti * C + ch) * N + n;
              const T h = H[hi];
              const T hprev = ti > 0 ? H[hi - C * N] : T(0);
              const T an = a[ch * N + n];
              const T abar = std::exp(dt * an);
              const T gh = gy * cv[ti * N + n] + carry[ch * N + n];
              if (gc) (*gc)[ti * N + n] += gy * h;
              const T g_abar = gh * hprev;
              g_delta += g_abar * abar * an + gh * bv[ti * N + n] * xt;
              if (galog) (*galog)[ch * N + n] += g_abar * abar * dt * an;
              if (gb) (*gb)[ti * N + n] += gh * dt * xt;
              g_x += gh * dt * bv[ti * N + n];
              carry[ch * N + n] = gh * abar;
            }
            if (gdelta) (*gdelta)[ti * C + ch] += g_delta;
            if (gx) (*gx)[ti * C + ch] += g_x;
          }
        }
      });
}

template Var<float> selective_scan(const Var<float>&, const Var<float>&, const Var<float>&, const Var<float>&,
                                   const Var<float>&, const Var<float>&);
template Var<double> selective_scan(const Var<double>&, const Var<double>&, const Var<double>&, const Var<double>&,
                                    const Var<double>&, const Var<double>&);

}  // namespace lmunet::ad
