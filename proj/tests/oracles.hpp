#pragma once

// Naive reference implementations. Nothing here calls into the library's
// kernels: loops are written out from the definitions so a shared bug cannot
// hide on both sides of a comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <type_traits>
#include <vector>

#include "lmunet/autograd.hpp"
#include "lmunet/tensor.hpp"

namespace oracle {

using lmunet::LabelMap;
using lmunet::Shape;
using lmunet::Tensor;

// ---- random inputs ----------------------------------------------------------

template <typename T = double>
Tensor<T> randn(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

template <typename T = double>
Tensor<T> uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline LabelMap random_labels(const Shape& shape, std::size_t k, std::mt19937_64& rng) {
  LabelMap m(shape);
  for (auto& v : m.data()) v = static_cast<std::uint16_t>(pick(rng, 0, k - 1));
  return m;
}

// ---- comparison ---------------------------------------------------------------

// |a - b| <= rtol * max(|a|, |b|, floor). The floor keeps values that should
// be zero from demanding an impossible relative match.
inline bool close(double a, double b, double rtol, double floor = 1e-12) {
  return std::abs(a - b) <= rtol * std::max({std::abs(a), std::abs(b), floor});
}

template <typename T, typename U>
double max_rel_err(const Tensor<T>& got, const Tensor<U>& want, double floor = 1e-12) {
  if (got.shape() != want.shape()) return INFINITY;
  double worst = 0;
  for (std::size_t i = 0; i < got.numel(); ++i) {
    const double a = got[i], b = want[i];
    worst = std::max(worst, std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor}));
  }
  return worst;
}

// ---- multi-index helpers ------------------------------------------------------

inline std::vector<std::size_t> unravel(std::size_t flat, const Shape& shape) {
  std::vector<std::size_t> idx(shape.size());
  for (std::size_t d = shape.size(); d-- > 0;) {
    idx[d] = flat % shape[d];
    flat /= shape[d];
  }
  return idx;
}

inline std::size_t ravel(const std::vector<std::size_t>& idx, const Shape& shape) {
  std::size_t f = 0;
  for (std::size_t d = 0; d < shape.size(); ++d) f = f * shape[d] + idx[d];
  return f;
}

// ---- tensor-core oracles -----------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* b) {
  const std::size_t cin = w.dim(1), cout = w.dim(0), rows = x.numel() / cin;
  Shape s = x.shape();
  s.back() = cout;
  Tensor<T> y(s);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < cout; ++o) {
      double acc = b ? double((*b)[o]) : 0.0;
      for (std::size_t i = 0; i < cin; ++i) acc += double(x[r * cin + i]) * double(w[o * cin + i]);
      y[r * cout + o] = T(acc);
    }
  return y;
}

// Dense cross-correlation; groups == C gives the depthwise case with w (C, 1, k...).
template <typename T>
Tensor<T> conv_generic(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* b, std::size_t stride,
                       std::size_t pad, bool depthwise) {
  const std::size_t C = x.dim(0), rank = x.rank() - 1;
  const std::size_t cout = depthwise ? C : w.dim(0);
  const std::size_t koff = depthwise ? 1 : 2;
  Shape xs(x.shape().begin() + 1, x.shape().end());
  Shape ks(w.shape().begin() + koff, w.shape().end());
  Shape ys(rank);
  for (std::size_t d = 0; d < rank; ++d) ys[d] = (xs[d] + 2 * pad - ks[d]) / stride + 1;
  Shape full{cout};
  full.insert(full.end(), ys.begin(), ys.end());
  Tensor<T> y(full);
  const std::size_t ysz = lmunet::shape_numel(ys), ksz = lmunet::shape_numel(ks), xsz = lmunet::shape_numel(xs);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t p = 0; p < ysz; ++p) {
      auto yi = unravel(p, ys);
      double acc = b ? double((*b)[o]) : 0.0;
      const std::size_t c_lo = depthwise ? o : 0, c_hi = depthwise ? o + 1 : C;
      for (std::size_t c = c_lo; c < c_hi; ++c)
        for (std::size_t q = 0; q < ksz; ++q) {
          auto ki = unravel(q, ks);
          std::vector<std::size_t> xi(rank);
          bool inside = true;
          for (std::size_t d = 0; d < rank; ++d) {
            const long pos = long(yi[d] * stride + ki[d]) - long(pad);
            if (pos < 0 || pos >= long(xs[d])) inside = false;
            else xi[d] = std::size_t(pos);
          }
          if (!inside) continue;
          const double wv = depthwise ? double(w[o * ksz + q]) : double(w[(o * C + c) * ksz + q]);
          acc += wv * double(x[c * xsz + ravel(xi, xs)]);
        }
      y[o * ysz + p] = T(acc);
    }
  return y;
}

template <typename T>
Tensor<T> pointwise(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* b) {
  const std::size_t cin = x.dim(0), cout = w.dim(0), sites = x.numel() / cin;
  Shape s = x.shape();
  s[0] = cout;
  Tensor<T> y(s);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t p = 0; p < sites; ++p) {
      double acc = b ? double((*b)[o]) : 0.0;
      for (std::size_t i = 0; i < cin; ++i) acc += double(w[o * cin + i]) * double(x[i * sites + p]);
      y[o * sites + p] = T(acc);
    }
  return y;
}

// y[t, c] = b[c] + sum_j k[c, j] * x[t - (W-1) + j, c]
template <typename T>
Tensor<T> causal_conv(const Tensor<T>& x, const Tensor<T>& k, const std::type_identity_t<Tensor<T>>* b) {
  const std::size_t L = x.dim(0), C = x.dim(1), W = k.dim(1);
  Tensor<T> y(x.shape());
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < C; ++c) {
      double acc = b ? double((*b)[c]) : 0.0;
      for (std::size_t j = 0; j < W; ++j) {
        const long src = long(t) - long(W - 1) + long(j);
        if (src >= 0) acc += double(k[c * W + j]) * double(x[std::size_t(src) * C + c]);
      }
      y[t * C + c] = T(acc);
    }
  return y;
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b, double eps) {
  const std::size_t C = x.shape().back(), rows = x.numel() / C;
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < C; ++c) mu += x[r * C + c];
    mu /= double(C);
    for (std::size_t c = 0; c < C; ++c) var += (x[r * C + c] - mu) * (x[r * C + c] - mu);
    var /= double(C);
    for (std::size_t c = 0; c < C; ++c)
      y[r * C + c] = T(double(g[c]) * (x[r * C + c] - mu) / std::sqrt(var + eps) + double(b[c]));
  }
  return y;
}

inline double silu(double v) { return v / (1.0 + std::exp(-v)); }
inline double relu(double v) { return v > 0 ? v : 0.0; }
inline double softplus(double v) { return v > 30 ? v : std::log1p(std::exp(v)); }

template <typename T>
Tensor<T> map(const Tensor<T>& x, double (*f)(double)) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = T(f(double(x[i])));
  return y;
}

template <typename T>
Tensor<T> softmax_channel(const Tensor<T>& x) {
  const std::size_t C = x.dim(0), sites = x.numel() / C;
  Tensor<T> y(x.shape());
  for (std::size_t p = 0; p < sites; ++p) {
    double total = 0;
    for (std::size_t c = 0; c < C; ++c) total += std::exp(double(x[c * sites + p]));
    for (std::size_t c = 0; c < C; ++c) y[c * sites + p] = T(std::exp(double(x[c * sites + p])) / total);
  }
  return y;
}

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  Shape ys = x.shape();
  for (std::size_t d = 1; d < ys.size(); ++d) ys[d] /= 2;
  Tensor<T> y(ys);
  for (std::size_t p = 0; p < y.numel(); ++p) {
    auto yi = unravel(p, ys);
    double best = -INFINITY;
    const std::size_t corners = std::size_t{1} << (ys.size() - 1);
    for (std::size_t m = 0; m < corners; ++m) {
      auto xi = yi;
      for (std::size_t d = 1; d < ys.size(); ++d) xi[d] = 2 * yi[d] + ((m >> (d - 1)) & 1);
      best = std::max(best, double(x[ravel(xi, x.shape())]));
    }
    y[p] = T(best);
  }
  return y;
}

// Source position of output o on a 2x half-pixel grid, as (lower index, weight of upper).
inline std::pair<std::size_t, double> upsample_tap(std::size_t o, std::size_t n) {
  double src = (double(o) + 0.5) / 2.0 - 0.5;
  if (src < 0) src = 0;
  if (src > double(n - 1)) src = double(n - 1);
  const auto i0 = std::size_t(std::floor(src));
  return {i0, src - double(i0)};
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  Shape ys = x.shape();
  for (std::size_t d = 1; d < ys.size(); ++d) ys[d] *= 2;
  Tensor<T> y(ys);
  const std::size_t sr = ys.size() - 1;
  for (std::size_t p = 0; p < y.numel(); ++p) {
    auto yi = unravel(p, ys);
    double acc = 0;
    for (std::size_t m = 0; m < (std::size_t{1} << sr); ++m) {
      auto xi = yi;
      double wgt = 1;
      for (std::size_t d = 1; d <= sr; ++d) {
        auto [i0, f] = upsample_tap(yi[d], x.dim(d));
        const bool up = (m >> (d - 1)) & 1;
        xi[d] = std::min(i0 + (up ? 1 : 0), x.dim(d) - 1);
        wgt *= up ? f : 1 - f;
      }
      acc += wgt * double(x[ravel(xi, x.shape())]);
    }
    y[p] = T(acc);
  }
  return y;
}

// ---- ssm oracle ---------------------------------------------------------------

// h_t = exp(delta_t A) h_{t-1} + delta_t B_t x_t ; y_t = C_t . h_t + D x_t,
// A = -exp(a_log). Written per (channel, state) with scalar state.
template <typename T>
Tensor<T> scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a_log, const Tensor<T>& b,
               const Tensor<T>& c, const Tensor<T>& d) {
  const std::size_t L = x.dim(0), C = x.dim(1), N = a_log.dim(1);
  Tensor<T> y(x.shape());
  for (std::size_t ch = 0; ch < C; ++ch) {
    std::vector<double> h(N, 0.0);
    for (std::size_t t = 0; t < L; ++t) {
      const double dt = delta[t * C + ch], xv = x[t * C + ch];
      double out = double(d[ch]) * xv;
      for (std::size_t n = 0; n < N; ++n) {
        const double A = -std::exp(double(a_log[ch * N + n]));
        h[n] = std::exp(dt * A) * h[n] + dt * double(b[t * N + n]) * xv;
        out += double(c[t * N + n]) * h[n];
      }
      y[t * C + ch] = T(out);
    }
  }
  return y;
}

// ---- attention oracle ---------------------------------------------------------

template <typename T>
Tensor<T> attention(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& wk, const Tensor<T>& wv,
                    const Tensor<T>& wo, std::size_t heads) {
  const std::size_t L = x.dim(0), C = x.dim(1), dh = C / heads;
  auto q = linear(x, wq, nullptr), k = linear(x, wk, nullptr), v = linear(x, wv, nullptr);
  Tensor<T> ctx({L, C});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < L; ++i) {
      std::vector<double> s(L);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < L; ++j) {
        double dot = 0;
        for (std::size_t e = 0; e < dh; ++e) dot += double(q[i * C + h * dh + e]) * double(k[j * C + h * dh + e]);
        s[j] = dot / std::sqrt(double(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& v2 : s) z += (v2 = std::exp(v2 - mx));
      for (std::size_t e = 0; e < dh; ++e) {
        double acc = 0;
        for (std::size_t j = 0; j < L; ++j) acc += s[j] / z * double(v[j * C + h * dh + e]);
        ctx[i * C + h * dh + e] = T(acc);
      }
    }
  return linear(ctx, wo, nullptr);
}

// ---- loss and metrics -----------------------------------------------------------

inline double dice_ce(const Tensor<double>& logits, const LabelMap& g, double eps = 1e-5) {
  const std::size_t K = logits.dim(0), S = g.numel();
  auto p = softmax_channel(logits);
  double ce = 0;
  for (std::size_t s = 0; s < S; ++s) ce -= std::log(p[g[s] * S + s]);
  ce /= double(S);
  double dice = 0;
  for (std::size_t k = 1; k < K; ++k) {
    double inter = 0, ps = 0, gs = 0;
    for (std::size_t s = 0; s < S; ++s) {
      const double gk = g[s] == k ? 1.0 : 0.0;
      inter += p[k * S + s] * gk;
      ps += p[k * S + s];
      gs += gk;
    }
    dice += (2 * inter + eps) / (ps + gs + eps);
  }
  return ce + 1.0 - dice / double(K - 1);
}

// Per-class |P n G| / |P u G| via explicit site sets.
inline std::vector<double> iou(const LabelMap& p, const LabelMap& g, std::size_t K) {
  std::vector<double> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<std::size_t> ps, gs, inter, uni;
    for (std::size_t s = 0; s < p.numel(); ++s) {
      if (p[s] == k) ps.push_back(s);
      if (g[s] == k) gs.push_back(s);
    }
    std::set_intersection(ps.begin(), ps.end(), gs.begin(), gs.end(), std::back_inserter(inter));
    std::set_union(ps.begin(), ps.end(), gs.begin(), gs.end(), std::back_inserter(uni));
    out[k] = uni.empty() ? 1.0 : double(inter.size()) / double(uni.size());
  }
  return out;
}

// ---- finite differences -----------------------------------------------------------

// Gradient check of fn(inputs) through the loss sum(fn(inputs) * R) for a fixed
// random R. Analytic gradients come from one tape pass; numeric ones from
// a central stencil with step h (five-point by default, plain two-point on
// request). Returns the worst relative error using max(|a|, |n|, floor) as
// the denominator.
struct FdResult {
  double worst = 0;
  std::size_t checked = 0;
};

enum class Stencil { TwoPoint, FivePoint };

using VarFn = std::function<lmunet::ad::Var<double>(const std::vector<lmunet::ad::Var<double>>&)>;

inline FdResult fd_check(const VarFn& fn, const std::vector<Tensor<double>>& inputs, std::uint64_t seed,
                         double h = 1e-4, double floor = 1e-2, std::size_t max_per_input = 0,
                         Stencil stencil = Stencil::FivePoint) {
  using lmunet::ad::Var;
  std::mt19937_64 rng(seed);
  auto as_const = [&](const std::vector<Tensor<double>>& vals) {
    std::vector<Var<double>> v;
    for (const auto& t : vals) v.push_back(Var<double>::constant(t));
    return v;
  };
  const auto probe = fn(as_const(inputs)).value();
  const auto R = randn(probe.shape(), rng);
  auto loss_of = [&](const std::vector<Tensor<double>>& vals) {
    const auto out = fn(as_const(vals)).value();
    double acc = 0;
    for (std::size_t i = 0; i < out.numel(); ++i) acc += out[i] * R[i];
    return acc;
  };

  lmunet::ad::Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  auto out = fn(leaves);
  auto loss = lmunet::ad::sum(lmunet::ad::hadamard(out, Var<double>::constant(R)));
  tape.backward(loss);

  FdResult res;
  auto vals = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& g = leaves[i].grad();
    std::vector<std::size_t> order(inputs[i].numel());
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
    if (max_per_input && order.size() > max_per_input) {
      std::shuffle(order.begin(), order.end(), rng);
      order.resize(max_per_input);
    }
    for (auto j : order) {
      const double keep = vals[i][j];
      auto at = [&](double d) {
        vals[i][j] = keep + d;
        return loss_of(vals);
      };
      const double num = stencil == Stencil::TwoPoint
                             ? (at(h) - at(-h)) / (2 * h)
                             : (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);  // O(h^4)
      vals[i][j] = keep;
      const double ana = g.empty() ? 0.0 : g[j];
      res.worst = std::max(res.worst, std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor}));
      ++res.checked;
    }
  }
  return res;
}

}  // namespace oracle
