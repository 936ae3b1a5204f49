#include "lmunet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include "lmunet/flops.hpp"

namespace lmunet {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

// Channel-first map (C, s...) viewed as (C, d0, d1, d2) with leading unit axes
// for spatial ranks below three.
struct Grid {
  std::size_t channels = 0;
  std::array<std::size_t, 3> ext{1, 1, 1};
  std::size_t rank = 0;

  std::size_t sites() const { return ext[0] * ext[1] * ext[2]; }
  bool real(std::size_t axis) const { return axis >= 3 - rank; }
};

Grid grid_of(const Shape& shape, const char* what) {
  if (shape.size() < 2 || shape.size() > 4) {
    throw DimensionError(std::string(what) + ": expected (C, spatial...) with spatial rank 1-3, got " +
                         shape_str(shape));
  }
  Grid g;
  g.channels = shape[0];
  g.rank = shape.size() - 1;
  for (std::size_t i = 0; i < g.rank; ++i) g.ext[3 - g.rank + i] = shape[1 + i];
  return g;
}

Shape shape_of(std::size_t channels, const Grid& g) {
  Shape s{channels};
  for (std::size_t a = 3 - g.rank; a < 3; ++a) s.push_back(g.ext[a]);
  return s;
}

void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

template <typename T>
T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

struct ConvGeometry {
  Grid in;
  Grid out;
  std::array<std::size_t, 3> k{1, 1, 1};
  std::array<std::size_t, 3> pad{0, 0, 0};
  std::array<std::size_t, 3> stride{1, 1, 1};
};

ConvGeometry conv_geometry(const Shape& x, const Shape& kernel_spatial, std::size_t stride,
                           std::size_t padding, const char* what) {
  ConvGeometry g;
  g.in = grid_of(x, what);
  if (kernel_spatial.size() != g.in.rank) {
    throw DimensionError(std::string(what) + ": kernel rank " + std::to_string(kernel_spatial.size()) +
                         " does not match input spatial rank " + std::to_string(g.in.rank));
  }
  if (stride == 0) throw ParameterError(std::string(what) + ": stride must be >= 1");
  g.out = g.in;
  for (std::size_t i = 0; i < g.in.rank; ++i) {
    const std::size_t a = 3 - g.in.rank + i;
    g.k[a] = kernel_spatial[i];
    g.pad[a] = padding;
    g.stride[a] = stride;
    const std::size_t padded = g.in.ext[a] + 2 * padding;
    if (g.k[a] == 0 || g.k[a] > padded) {
      throw DimensionError(std::string(what) + ": kernel " + shape_str(kernel_spatial) +
                           " larger than padded input " + shape_str(x));
    }
    g.out.ext[a] = (padded - g.k[a]) / stride + 1;
  }
  return g;
}

}  // namespace

// ---------------------------------------------------------------- linear

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b) {
  if (w.rank() != 2 || x.rank() == 0 || x.shape().back() != w.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const std::size_t cin = w.dim(1), cout = w.dim(0), rows = x.numel() / cin;
  if (b && (b->rank() != 1 || b->dim(0) != cout)) {
    throw DimensionError("linear: bias " + shape_str(b->shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Tensor<T> y(out_shape);
  MutMap<T> ym(y.ptr(), rows, cout);
  ym.noalias() = ConstMap<T>(x.ptr(), rows, cin) * ConstMap<T>(w.ptr(), cout, cin).transpose();
  if (b) ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->ptr(), cout);
  flops::add_macs(rows * cin * cout);
  if (b) flops::add_other(rows * cout);
  return y;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, Tensor<T>* gx,
                     Tensor<T>* gw, Tensor<T>* gb) {
  const std::size_t cin = w.dim(1), cout = w.dim(0), rows = x.numel() / cin;
  ConstMap<T> gym(gy.ptr(), rows, cout);
  if (gx) MutMap<T>(gx->ptr(), rows, cin).noalias() += gym * ConstMap<T>(w.ptr(), cout, cin);
  if (gw) MutMap<T>(gw->ptr(), cout, cin).noalias() += gym.transpose() * ConstMap<T>(x.ptr(), rows, cin);
  if (gb) {
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->ptr(), cout) += gym.colwise().sum();
  }
}

// ---------------------------------------------------------------- depthwise

template <typename T>
Tensor<T> dwconv(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>* b, std::size_t stride,
                 std::size_t padding) {
  const auto g = conv_geometry(x.shape(), Shape(k.shape().begin() + 1, k.shape().end()), stride, padding,
                               "dwconv");
  if (k.dim(0) != g.in.channels) {
    throw DimensionError("dwconv: kernel " + shape_str(k.shape()) + " needs one filter per channel of " +
                         shape_str(x.shape()));
  }
  if (b && b->numel() != g.in.channels) throw DimensionError("dwconv: bias size mismatch");
  Tensor<T> y(shape_of(g.in.channels, g.out));
  const std::size_t kvol = g.k[0] * g.k[1] * g.k[2];
  const auto& ie = g.in.ext;
  const auto& oe = g.out.ext;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t cc = 0; cc < static_cast<std::ptrdiff_t>(g.in.channels); ++cc) {
    const auto c = static_cast<std::size_t>(cc);
    const T* xc = x.ptr() + c * g.in.sites();
    const T* kc = k.ptr() + c * kvol;
    T* yc = y.ptr() + c * g.out.sites();
    const T bias = b ? (*b)[c] : T(0);
    for (std::size_t o0 = 0; o0 < oe[0]; ++o0)
      for (std::size_t o1 = 0; o1 < oe[1]; ++o1)
        for (std::size_t o2 = 0; o2 < oe[2]; ++o2) {
          T acc = bias;
          for (std::size_t k0 = 0; k0 < g.k[0]; ++k0) {
            const auto i0 = static_cast<std::ptrdiff_t>(o0 * g.stride[0] + k0) - static_cast<std::ptrdiff_t>(g.pad[0]);
            if (i0 < 0 || i0 >= static_cast<std::ptrdiff_t>(ie[0])) continue;
            for (std::size_t k1 = 0; k1 < g.k[1]; ++k1) {
              const auto i1 = static_cast<std::ptrdiff_t>(o1 * g.stride[1] + k1) - static_cast<std::ptrdiff_t>(g.pad[1]);
              if (i1 < 0 || i1 >= static_cast<std::ptrdiff_t>(ie[1])) continue;
              for (std::size_t k2 = 0; k2 < g.k[2]; ++k2) {
                const auto i2 = static_cast<std::ptrdiff_t>(o2 * g.stride[2] + k2) - static_cast<std::ptrdiff_t>(g.pad[2]);
                if (i2 < 0 || i2 >= static_cast<std::ptrdiff_t>(ie[2])) continue;
                acc += kc[(k0 * g.k[1] + k1) * g.k[2] + k2] * xc[(i0 * ie[1] + i1) * ie[2] + i2];
              }
            }
          }
          yc[(o0 * oe[1] + o1) * oe[2] + o2] = acc;
        }
  }
  flops::add_macs(y.numel() * kvol);
  if (b) flops::add_other(y.numel());
  return y;
}

template <typename T>
void dwconv_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& gy, std::size_t stride,
                     std::size_t padding, Tensor<T>* gx, Tensor<T>* gk, Tensor<T>* gb) {
  const auto g = conv_geometry(x.shape(), Shape(k.shape().begin() + 1, k.shape().end()), stride, padding,
                               "dwconv");
  const std::size_t kvol = g.k[0] * g.k[1] * g.k[2];
  const auto& ie = g.in.ext;
  const auto& oe = g.out.ext;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t cc = 0; cc < static_cast<std::ptrdiff_t>(g.in.channels); ++cc) {
    const auto c = static_cast<std::size_t>(cc);
    const T* xc = x.ptr() + c * g.in.sites();
    const T* kc = k.ptr() + c * kvol;
    const T* gyc = gy.ptr() + c * g.out.sites();
    T* gxc = gx ? gx->ptr() + c * g.in.sites() : nullptr;
    T* gkc = gk ? gk->ptr() + c * kvol : nullptr;
    T bias_acc = 0;
    for (std::size_t o0 = 0; o0 < oe[0]; ++o0)
      for (std::size_t o1 = 0; o1 < oe[1]; ++o1)
        for (std::size_t o2 = 0; o2 < oe[2]; ++o2) {
          const T go = gyc[(o0 * oe[1] + o1) * oe[2] + o2];
          bias_acc += go;
          for (std::size_t k0 = 0; k0 < g.k[0]; ++k0) {
            const auto i0 = static_cast<std::ptrdiff_t>(o0 * g.stride[0] + k0) - static_cast<std::ptrdiff_t>(g.pad[0]);
            if (i0 < 0 || i0 >= static_cast<std::ptrdiff_t>(ie[0])) continue;
            for (std::size_t k1 = 0; k1 < g.k[1]; ++k1) {
              const auto i1 = static_cast<std::ptrdiff_t>(o1 * g.stride[1] + k1) - static_cast<std::ptrdiff_t>(g.pad[1]);
              if (i1 < 0 || i1 >= static_cast<std::ptrdiff_t>(ie[1])) continue;
              for (std::size_t k2 = 0; k2 < g.k[2]; ++k2) {
                const auto i2 = static_cast<std::ptrdiff_t>(o2 * g.stride[2] + k2) - static_cast<std::ptrdiff_t>(g.pad[2]);
                if (i2 < 0 || i2 >= static_cast<std::ptrdiff_t>(ie[2])) continue;
                const std::size_t ki = (k0 * g.k[1] + k1) * g.k[2] + k2;
                const std::size_t xi = (i0 * ie[1] + i1) * ie[2] + i2;
                if (gxc) gxc[xi] += go * kc[ki];
                if (gkc) gkc[ki] += go * xc[xi];
              }
            }
          }
        }
    if (gb) (*gb)[c] += bias_acc;
  }
}

// ---------------------------------------------------------------- dense conv

template <typename T>
Tensor<T> conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, std::size_t padding) {
  if (w.rank() != x.rank() + 1 || w.dim(1) != x.dim(0)) {
    throw DimensionError("conv: weight " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
  }
  const auto g = conv_geometry(x.shape(), Shape(w.shape().begin() + 2, w.shape().end()), 1, padding, "conv");
  const std::size_t cout = w.dim(0), cin = w.dim(1);
  if (b && b->numel() != cout) throw DimensionError("conv: bias size mismatch");
  Tensor<T> y(shape_of(cout, g.out));
  const std::size_t kvol = g.k[0] * g.k[1] * g.k[2];
  const auto& ie = g.in.ext;
  const auto& oe = g.out.ext;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t oo = 0; oo < static_cast<std::ptrdiff_t>(cout); ++oo) {
    const auto co = static_cast<std::size_t>(oo);
    T* yc = y.ptr() + co * g.out.sites();
    std::fill(yc, yc + g.out.sites(), b ? (*b)[co] : T(0));
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* xc = x.ptr() + ci * g.in.sites();
      const T* wk = w.ptr() + (co * cin + ci) * kvol;
      for (std::size_t k0 = 0; k0 < g.k[0]; ++k0)
        for (std::size_t k1 = 0; k1 < g.k[1]; ++k1)
          for (std::size_t k2 = 0; k2 < g.k[2]; ++k2) {
            const T wv = wk[(k0 * g.k[1] + k1) * g.k[2] + k2];
            for (std::size_t o0 = 0; o0 < oe[0]; ++o0) {
              const auto i0 = static_cast<std::ptrdiff_t>(o0 + k0) - static_cast<std::ptrdiff_t>(g.pad[0]);
              if (i0 < 0 || i0 >= static_cast<std::ptrdiff_t>(ie[0])) continue;
              for (std::size_t o1 = 0; o1 < oe[1]; ++o1) {
                const auto i1 = static_cast<std::ptrdiff_t>(o1 + k1) - static_cast<std::ptrdiff_t>(g.pad[1]);
                if (i1 < 0 || i1 >= static_cast<std::ptrdiff_t>(ie[1])) continue;
                T* yrow = yc + (o0 * oe[1] + o1) * oe[2];
                const T* xrow = xc + (i0 * ie[1] + i1) * ie[2];
                for (std::size_t o2 = 0; o2 < oe[2]; ++o2) {
                  const auto i2 = static_cast<std::ptrdiff_t>(o2 + k2) - static_cast<std::ptrdiff_t>(g.pad[2]);
                  if (i2 < 0 || i2 >= static_cast<std::ptrdiff_t>(ie[2])) continue;
                  yrow[o2] += wv * xrow[i2];
                }
              }
            }
          }
    }
  }
  flops::add_macs(y.numel() * cin * kvol);
  if (b) flops::add_other(y.numel());
  return y;
}

template <typename T>
void conv_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, std::size_t padding,
                   Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const auto g = conv_geometry(x.shape(), Shape(w.shape().begin() + 2, w.shape().end()), 1, padding, "conv");
  const std::size_t cout = w.dim(0), cin = w.dim(1);
  const std::size_t kvol = g.k[0] * g.k[1] * g.k[2];
  const auto& ie = g.in.ext;
  const auto& oe = g.out.ext;
  for (std::size_t co = 0; co < cout; ++co) {
    const T* gyc = gy.ptr() + co * g.out.sites();
    if (gb) {
      T s = 0;
      for (std::size_t i = 0; i < g.out.sites(); ++i) s += gyc[i];
      (*gb)[co] += s;
    }
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* xc = x.ptr() + ci * g.in.sites();
      T* gxc = gx ? gx->ptr() + ci * g.in.sites() : nullptr;
      const T* wk = w.ptr() + (co * cin + ci) * kvol;
      T* gwk = gw ? gw->ptr() + (co * cin + ci) * kvol : nullptr;
      for (std::size_t k0 = 0; k0 < g.k[0]; ++k0)
        for (std::size_t k1 = 0; k1 < g.k[1]; ++k1)
          for (std::size_t k2 = 0; k2 < g.k[2]; ++k2) {
            const std::size_t ki = (k0 * g.k[1] + k1) * g.k[2] + k2;
            const T wv = wk[ki];
            T gw_acc = 0;
            for (std::size_t o0 = 0; o0 < oe[0]; ++o0) {
              const auto i0 = static_cast<std::ptrdiff_t>(o0 + k0) - static_cast<std::ptrdiff_t>(g.pad[0]);
              if (i0 < 0 || i0 >= static_cast<std::ptrdiff_t>(ie[0])) continue;
              for (std::size_t o1 = 0; o1 < oe[1]; ++o1) {
                const auto i1 = static_cast<std::ptrdiff_t>(o1 + k1) - static_cast<std::ptrdiff_t>(g.pad[1]);
                if (i1 < 0 || i1 >= static_cast<std::ptrdiff_t>(ie[1])) continue;
                const T* gyrow = gyc + (o0 * oe[1] + o1) * oe[2];
                const std::size_t xoff = (i0 * ie[1] + i1) * ie[2];
                for (std::size_t o2 = 0; o2 < oe[2]; ++o2) {
                  const auto i2 = static_cast<std::ptrdiff_t>(o2 + k2) - static_cast<std::ptrdiff_t>(g.pad[2]);
                  if (i2 < 0 || i2 >= static_cast<std::ptrdiff_t>(ie[2])) continue;
                  gw_acc += gyrow[o2] * xc[xoff + i2];
                  if (gxc) gxc[xoff + i2] += gyrow[o2] * wv;
                }
              }
            }
            if (gwk) gwk[ki] += gw_acc;
          }
    }
  }
}

// ---------------------------------------------------------------- pointwise

template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b) {
  if (w.rank() != 2 || x.rank() < 2 || w.dim(1) != x.dim(0)) {
    throw DimensionError("pointwise_conv: channel mismatch between input " + shape_str(x.shape()) +
                         " and weight " + shape_str(w.shape()));
  }
  const std::size_t cin = w.dim(1), cout = w.dim(0), sites = x.numel() / cin;
  if (b && b->numel() != cout) throw DimensionError("pointwise_conv: bias size mismatch");
  Shape out_shape = x.shape();
  out_shape[0] = cout;
  Tensor<T> y(out_shape);
  MutMap<T> ym(y.ptr(), cout, sites);
  ym.noalias() = ConstMap<T>(w.ptr(), cout, cin) * ConstMap<T>(x.ptr(), cin, sites);
  if (b) ym.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b->ptr(), cout);
  flops::add_macs(sites * cin * cout);
  if (b) flops::add_other(sites * cout);
  return y;
}

template <typename T>
void pointwise_conv_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, Tensor<T>* gx,
                             Tensor<T>* gw, Tensor<T>* gb) {
  const std::size_t cin = w.dim(1), cout = w.dim(0), sites = x.numel() / cin;
  ConstMap<T> gym(gy.ptr(), cout, sites);
  if (gx) MutMap<T>(gx->ptr(), cin, sites).noalias() += ConstMap<T>(w.ptr(), cout, cin).transpose() * gym;
  if (gw) MutMap<T>(gw->ptr(), cout, cin).noalias() += gym * ConstMap<T>(x.ptr(), cin, sites).transpose();
  if (gb) Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb->ptr(), cout) += gym.rowwise().sum();
}

// ---------------------------------------------------------------- causal conv

template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>* b) {
  if (x.rank() != 2 || k.rank() != 2 || k.dim(0) != x.dim(1)) {
    throw DimensionError("causal_conv1d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                         shape_str(k.shape()));
  }
  if (b && b->numel() != x.dim(1)) throw DimensionError("causal_conv1d: bias size mismatch");
  const std::size_t L = x.dim(0), C = x.dim(1), W = k.dim(1);
  Tensor<T> y(x.shape());
  for (std::size_t t = 0; t < L; ++t) {
    T* yr = y.ptr() + t * C;
    for (std::size_t c = 0; c < C; ++c) yr[c] = b ? (*b)[c] : T(0);
    for (std::size_t j = 0; j < W; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(W - 1);
      if (src < 0) continue;
      const T* xr = x.ptr() + static_cast<std::size_t>(src) * C;
      for (std::size_t c = 0; c < C; ++c) yr[c] += k[c * W + j] * xr[c];
    }
  }
  flops::add_macs(L * C * W);
  if (b) flops::add_other(L * C);
  return y;
}

template <typename T>
void causal_conv1d_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& gy, Tensor<T>* gx,
                            Tensor<T>* gk, Tensor<T>* gb) {
  const std::size_t L = x.dim(0), C = x.dim(1), W = k.dim(1);
  for (std::size_t t = 0; t < L; ++t) {
    const T* gr = gy.ptr() + t * C;
    if (gb)
      for (std::size_t c = 0; c < C; ++c) (*gb)[c] += gr[c];
    for (std::size_t j = 0; j < W; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(W - 1);
      if (src < 0) continue;
      const std::size_t s = static_cast<std::size_t>(src);
      for (std::size_t c = 0; c < C; ++c) {
        if (gx) (*gx)[s * C + c] += gr[c] * k[c * W + j];
        if (gk) (*gk)[c * W + j] += gr[c] * x[s * C + c];
      }
    }
  }
}

// ---------------------------------------------------------------- layernorm

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  if (!(eps > 0)) throw ParameterError("layernorm: epsilon must be positive, got " + std::to_string(eps));
  const std::size_t C = x.rank() ? x.shape().back() : 0;
  if (C == 0 || gamma.numel() != C || beta.numel() != C) {
    throw DimensionError("layernorm: affine parameters " + shape_str(gamma.shape()) +
                         " do not match trailing axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / C;
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * C;
    T* yr = y.ptr() + r * C;
    T mean = 0;
    for (std::size_t c = 0; c < C; ++c) mean += xr[c];
    mean /= static_cast<T>(C);
    T var = 0;
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(C);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t c = 0; c < C; ++c) yr[c] = gamma[c] * (xr[c] - mean) * rstd + beta[c];
  }
  flops::add_other(flops::kNormFlopsPerElement * x.numel());
  return y;
}

template <typename T>
void layernorm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& gy, double eps,
                        Tensor<T>* gx, Tensor<T>* ggamma, Tensor<T>* gbeta) {
  const std::size_t C = x.shape().back(), rows = x.numel() / C;
  std::vector<T> xhat(C);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * C;
    const T* gr = gy.ptr() + r * C;
    T mean = 0;
    for (std::size_t c = 0; c < C; ++c) mean += xr[c];
    mean /= static_cast<T>(C);
    T var = 0;
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(C);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
    T mean_g = 0, mean_gx = 0;
    for (std::size_t c = 0; c < C; ++c) {
      xhat[c] = (xr[c] - mean) * rstd;
      const T gh = gr[c] * gamma[c];
      mean_g += gh;
      mean_gx += gh * xhat[c];
      if (ggamma) (*ggamma)[c] += gr[c] * xhat[c];
      if (gbeta) (*gbeta)[c] += gr[c];
    }
    if (!gx) continue;
    mean_g /= static_cast<T>(C);
    mean_gx /= static_cast<T>(C);
    T* gxr = gx->ptr() + r * C;
    for (std::size_t c = 0; c < C; ++c) gxr[c] += rstd * (gr[c] * gamma[c] - mean_g - xhat[c] * mean_gx);
  }
}

// ---------------------------------------------------------------- activations

template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const std::size_t n = x.numel();
  switch (kind) {
    case Activation::SiLU:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * sigmoid(x[i]);
      break;
    case Activation::ReLU:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0 ? x[i] : T(0);
      break;
    case Activation::Softplus:
      for (std::size_t i = 0; i < n; ++i) y[i] = softplus(x[i]);
      break;
    case Activation::SoftmaxChannel: {
      if (x.rank() < 1) throw DimensionError("softmax: scalar input");
      const std::size_t C = x.dim(0), S = n / C;
      for (std::size_t s = 0; s < S; ++s) {
        T mx = x[s];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[c * S + s]);
        T z = 0;
        for (std::size_t c = 0; c < C; ++c) z += (y[c * S + s] = std::exp(x[c * S + s] - mx));
        for (std::size_t c = 0; c < C; ++c) y[c * S + s] /= z;
      }
      break;
    }
  }
  flops::add_other(flops::kActivationFlopsPerElement * n);
  return y;
}

template <typename T>
void activation_backward(Activation kind, const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& gy,
                         Tensor<T>& gx) {
  const std::size_t n = x.numel();
  switch (kind) {
    case Activation::SiLU:
      for (std::size_t i = 0; i < n; ++i) {
        const T s = sigmoid(x[i]);
        gx[i] += gy[i] * s * (T(1) + x[i] * (T(1) - s));
      }
      break;
    case Activation::ReLU:
      for (std::size_t i = 0; i < n; ++i) gx[i] += x[i] > 0 ? gy[i] : T(0);
      break;
    case Activation::Softplus:
      for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * sigmoid(x[i]);
      break;
    case Activation::SoftmaxChannel: {
      const std::size_t C = x.dim(0), S = n / C;
      for (std::size_t s = 0; s < S; ++s) {
        T dot = 0;
        for (std::size_t c = 0; c < C; ++c) dot += gy[c * S + s] * y[c * S + s];
        for (std::size_t c = 0; c < C; ++c) gx[c * S + s] += y[c * S + s] * (gy[c * S + s] - dot);
      }
      break;
    }
  }
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t C = x.shape().back(), rows = x.numel() / C;
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * C;
    T* yr = y.ptr() + r * C;
    const T mx = *std::max_element(xr, xr + C);
    T z = 0;
    for (std::size_t c = 0; c < C; ++c) z += (yr[c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < C; ++c) yr[c] /= z;
  }
  flops::add_other(flops::kActivationFlopsPerElement * x.numel());
  return y;
}

// ---------------------------------------------------------------- pooling

namespace {

template <typename T>
Grid pool_grid(const Tensor<T>& x) {
  const auto g = grid_of(x.shape(), "maxpool2");
  for (std::size_t a = 3 - g.rank; a < 3; ++a) {
    if (g.ext[a] % 2 != 0) {
      throw DimensionError("maxpool2: odd spatial extent in " + shape_str(x.shape()));
    }
  }
  return g;
}

}  // namespace

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  const auto g = pool_grid(x);
  Grid o = g;
  std::array<std::size_t, 3> win{1, 1, 1};
  for (std::size_t a = 3 - g.rank; a < 3; ++a) {
    o.ext[a] /= 2;
    win[a] = 2;
  }
  Tensor<T> y(shape_of(g.channels, o));
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* xc = x.ptr() + c * g.sites();
    T* yc = y.ptr() + c * o.sites();
    for (std::size_t o0 = 0; o0 < o.ext[0]; ++o0)
      for (std::size_t o1 = 0; o1 < o.ext[1]; ++o1)
        for (std::size_t o2 = 0; o2 < o.ext[2]; ++o2) {
          T best = xc[((o0 * win[0]) * g.ext[1] + o1 * win[1]) * g.ext[2] + o2 * win[2]];
          for (std::size_t a = 0; a < win[0]; ++a)
            for (std::size_t b = 0; b < win[1]; ++b)
              for (std::size_t d = 0; d < win[2]; ++d)
                best = std::max(best,
                                xc[((o0 * win[0] + a) * g.ext[1] + o1 * win[1] + b) * g.ext[2] + o2 * win[2] + d]);
          yc[(o0 * o.ext[1] + o1) * o.ext[2] + o2] = best;
        }
  }
  flops::add_other(x.numel());
  return y;
}

template <typename T>
void maxpool2_backward(const Tensor<T>& x, const Tensor<T>& gy, Tensor<T>& gx) {
  const auto g = pool_grid(x);
  Grid o = g;
  std::array<std::size_t, 3> win{1, 1, 1};
  for (std::size_t a = 3 - g.rank; a < 3; ++a) {
    o.ext[a] /= 2;
    win[a] = 2;
  }
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* xc = x.ptr() + c * g.sites();
    T* gxc = gx.ptr() + c * g.sites();
    const T* gyc = gy.ptr() + c * o.sites();
    for (std::size_t o0 = 0; o0 < o.ext[0]; ++o0)
      for (std::size_t o1 = 0; o1 < o.ext[1]; ++o1)
        for (std::size_t o2 = 0; o2 < o.ext[2]; ++o2) {
          std::size_t arg = ((o0 * win[0]) * g.ext[1] + o1 * win[1]) * g.ext[2] + o2 * win[2];
          for (std::size_t a = 0; a < win[0]; ++a)
            for (std::size_t b = 0; b < win[1]; ++b)
              for (std::size_t d = 0; d < win[2]; ++d) {
                const std::size_t i = ((o0 * win[0] + a) * g.ext[1] + o1 * win[1] + b) * g.ext[2] + o2 * win[2] + d;
                if (xc[i] > xc[arg]) arg = i;
              }
          gxc[arg] += gyc[(o0 * o.ext[1] + o1) * o.ext[2] + o2];
        }
  }
}

// ---------------------------------------------------------------- upsampling

namespace {

struct Taps {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w1;  // weight of i1; i0 receives 1 - w1
};

Taps linear_taps(std::size_t in, std::size_t out) {
  Taps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w1.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    t.i0[o] = lo;
    t.i1[o] = hi;
    t.w1[o] = hi == lo ? 0.0 : src - static_cast<double>(lo);
  }
  return t;
}

Grid upsample_grid(const Shape& shape) {
  const auto g = grid_of(shape, "upsample2x");
  if (g.rank != 2 && g.rank != 3) {
    throw DimensionError("upsample2x: unsupported spatial rank " + std::to_string(g.rank) +
                         " (only 2 and 3 are interpolated)");
  }
  return g;
}

}  // namespace

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  const auto g = upsample_grid(x.shape());
  Grid o = g;
  for (std::size_t a = 3 - g.rank; a < 3; ++a) o.ext[a] *= 2;
  std::array<Taps, 3> taps;
  for (std::size_t a = 0; a < 3; ++a) taps[a] = linear_taps(g.ext[a], o.ext[a]);
  Tensor<T> y(shape_of(g.channels, o));
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* xc = x.ptr() + c * g.sites();
    T* yc = y.ptr() + c * o.sites();
    for (std::size_t o0 = 0; o0 < o.ext[0]; ++o0)
      for (std::size_t o1 = 0; o1 < o.ext[1]; ++o1)
        for (std::size_t o2 = 0; o2 < o.ext[2]; ++o2) {
          const std::size_t a0[2] = {taps[0].i0[o0], taps[0].i1[o0]};
          const std::size_t a1[2] = {taps[1].i0[o1], taps[1].i1[o1]};
          const std::size_t a2[2] = {taps[2].i0[o2], taps[2].i1[o2]};
          const T w0[2] = {T(1 - taps[0].w1[o0]), T(taps[0].w1[o0])};
          const T w1[2] = {T(1 - taps[1].w1[o1]), T(taps[1].w1[o1])};
          const T w2[2] = {T(1 - taps[2].w1[o2]), T(taps[2].w1[o2])};
          T acc = 0;
          for (int p = 0; p < 2; ++p)
            for (int q = 0; q < 2; ++q)
              for (int r = 0; r < 2; ++r)
                acc += w0[p] * w1[q] * w2[r] * xc[(a0[p] * g.ext[1] + a1[q]) * g.ext[2] + a2[r]];
          yc[(o0 * o.ext[1] + o1) * o.ext[2] + o2] = acc;
        }
  }
  flops::add_macs(y.numel() * (std::size_t{1} << g.rank));
  return y;
}

template <typename T>
void upsample2x_backward(const Shape& x_shape, const Tensor<T>& gy, Tensor<T>& gx) {
  const auto g = upsample_grid(x_shape);
  Grid o = g;
  for (std::size_t a = 3 - g.rank; a < 3; ++a) o.ext[a] *= 2;
  std::array<Taps, 3> taps;
  for (std::size_t a = 0; a < 3; ++a) taps[a] = linear_taps(g.ext[a], o.ext[a]);
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* gxc = gx.ptr() + c * g.sites();
    const T* gyc = gy.ptr() + c * o.sites();
    for (std::size_t o0 = 0; o0 < o.ext[0]; ++o0)
      for (std::size_t o1 = 0; o1 < o.ext[1]; ++o1)
        for (std::size_t o2 = 0; o2 < o.ext[2]; ++o2) {
          const T go = gyc[(o0 * o.ext[1] + o1) * o.ext[2] + o2];
          const std::size_t a0[2] = {taps[0].i0[o0], taps[0].i1[o0]};
          const std::size_t a1[2] = {taps[1].i0[o1], taps[1].i1[o1]};
          const std::size_t a2[2] = {taps[2].i0[o2], taps[2].i1[o2]};
          const T w0[2] = {T(1 - taps[0].w1[o0]), T(taps[0].w1[o0])};
          const T w1[2] = {T(1 - taps[1].w1[o1]), T(taps[1].w1[o1])};
          const T w2[2] = {T(1 - taps[2].w1[o2]), T(taps[2].w1[o2])};
          for (int p = 0; p < 2; ++p)
            for (int q = 0; q < 2; ++q)
              for (int r = 0; r < 2; ++r)
                gxc[(a0[p] * g.ext[1] + a1[q]) * g.ext[2] + a2[r]] += w0[p] * w1[q] * w2[r] * go;
        }
  }
}

// ---------------------------------------------------------------- elementwise

namespace {

template <typename T>
void check_channel_vector(const Tensor<T>& x, const Tensor<T>& s, ChannelAxis axis) {
  const std::size_t C = axis == ChannelAxis::Trailing ? x.shape().back() : x.dim(0);
  if (s.rank() != 1 || s.dim(0) != C) {
    throw DimensionError("scale_by_channel_vector: vector " + shape_str(s.shape()) +
                         " does not match channel axis of " + shape_str(x.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> elementwise(Elementwise kind, const Tensor<T>& a, const Tensor<T>& b, ChannelAxis axis) {
  Tensor<T> y(a.shape());
  const std::size_t n = a.numel();
  switch (kind) {
    case Elementwise::Add:
      require_same(a.shape(), b.shape(), "add");
      for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
      break;
    case Elementwise::Hadamard:
      require_same(a.shape(), b.shape(), "hadamard");
      for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
      break;
    case Elementwise::ScaleByChannelVector: {
      check_channel_vector(a, b, axis);
      const std::size_t C = b.numel();
      if (axis == ChannelAxis::Trailing) {
        for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i % C];
      } else {
        const std::size_t S = n / C;
        for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i / S];
      }
      break;
    }
  }
  flops::add_other(flops::kElementwiseFlops * n);
  return y;
}

template <typename T>
void elementwise_backward(Elementwise kind, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& gy,
                          ChannelAxis axis, Tensor<T>* ga, Tensor<T>* gb) {
  const std::size_t n = a.numel();
  switch (kind) {
    case Elementwise::Add:
      for (std::size_t i = 0; i < n; ++i) {
        if (ga) (*ga)[i] += gy[i];
        if (gb) (*gb)[i] += gy[i];
      }
      break;
    case Elementwise::Hadamard:
      for (std::size_t i = 0; i < n; ++i) {
        if (ga) (*ga)[i] += gy[i] * b[i];
        if (gb) (*gb)[i] += gy[i] * a[i];
      }
      break;
    case Elementwise::ScaleByChannelVector: {
      const std::size_t C = b.numel(), S = n / C;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = axis == ChannelAxis::Trailing ? i % C : i / S;
        if (ga) (*ga)[i] += gy[i] * b[c];
        if (gb) (*gb)[c] += gy[i] * a[i];
      }
      break;
    }
  }
}

// ---------------------------------------------------------------- layout

template <typename T>
Tensor<T> flatten_spatial(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("flatten_spatial: expected (C, spatial...), got " + shape_str(x.shape()));
  const std::size_t C = x.dim(0), L = x.numel() / C;
  Tensor<T> y(Shape{L, C});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t l = 0; l < L; ++l) y[l * C + c] = x[c * L + l];
  return y;
}

template <typename T>
Tensor<T> unflatten_spatial(const Tensor<T>& x, const Shape& spatial) {
  if (x.rank() != 2 || shape_numel(spatial) != x.dim(0)) {
    throw DimensionError("unflatten_spatial: sequence " + shape_str(x.shape()) +
                         " does not cover spatial extents " + shape_str(spatial));
  }
  const std::size_t L = x.dim(0), C = x.dim(1);
  Shape out{C};
  out.insert(out.end(), spatial.begin(), spatial.end());
  Tensor<T> y(out);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t c = 0; c < C; ++c) y[c * L + l] = x[l * C + c];
  return y;
}

template <typename T>
Tensor<T> transpose_lc(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("transpose_lc: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t R = x.dim(0), C = x.dim(1);
  Tensor<T> y(Shape{C, R});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) y[c * R + r] = x[r * C + c];
  return y;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return Tensor<T>::scalar(s);
}

#define LMUNET_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                          \
  template void linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*,          \
                                Tensor<T>*, Tensor<T>*);                                                    \
  template Tensor<T> dwconv(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, std::size_t, std::size_t); \
  template void dwconv_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,         \
                                std::size_t, Tensor<T>*, Tensor<T>*, Tensor<T>*);                           \
  template Tensor<T> conv(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, std::size_t);               \
  template void conv_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,           \
                              Tensor<T>*, Tensor<T>*, Tensor<T>*);                                          \
  template Tensor<T> pointwise_conv(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                  \
  template void pointwise_conv_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*,  \
                                        Tensor<T>*, Tensor<T>*);                                            \
  template Tensor<T> causal_conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                   \
  template void causal_conv1d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*,   \
                                       Tensor<T>*, Tensor<T>*);                                             \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);               \
  template void layernorm_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double,           \
                                   Tensor<T>*, Tensor<T>*, Tensor<T>*);                                     \
  template Tensor<T> activation(Activation, const Tensor<T>&);                                              \
  template void activation_backward(Activation, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                    Tensor<T>&);                                                            \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                                        \
  template Tensor<T> maxpool2(const Tensor<T>&);                                                            \
  template void maxpool2_backward(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                          \
  template Tensor<T> upsample2x(const Tensor<T>&);                                                          \
  template void upsample2x_backward(const Shape&, const Tensor<T>&, Tensor<T>&);                            \
  template Tensor<T> elementwise(Elementwise, const Tensor<T>&, const Tensor<T>&, ChannelAxis);             \
  template void elementwise_backward(Elementwise, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                     ChannelAxis, Tensor<T>*, Tensor<T>*);                                  \
  template Tensor<T> flatten_spatial(const Tensor<T>&);                                                     \
  template Tensor<T> unflatten_spatial(const Tensor<T>&, const Shape&);                                     \
  template Tensor<T> transpose_lc(const Tensor<T>&);                                                        \
  template Tensor<T> sum(const Tensor<T>&);

LMUNET_INSTANTIATE_OPS(float)
LMUNET_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace lmunet
