#include "nodulenet/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <utility>

#include "nodulenet/error.hpp"
#include "nodulenet/parallel.hpp"

namespace nodulenet::nn {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using StridedMap = Eigen::Map<Mat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const Mat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

void require_rank5(const Shape& s, const char* what) {
  if (s.size() != 5) throw ValidationError(std::string(what) + ": expected [N, C, D, H, W], got " + shape_to_string(s));
}

// Reductions accumulate in double over 8 fixed lanes: vectorizable, and the
// summation order depends only on n.
constexpr std::size_t kLanes = 8;

inline double lane_total(const double (&acc)[kLanes], double tail) {
  double s = 0.0;
  for (double a : acc) s += a;
  return s + tail;
}

template <typename T>
double sum_of(const T* p, std::size_t n) {
  double acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) acc[j] += static_cast<double>(p[i + j]);
  double tail = 0.0;
  for (; i < n; ++i) tail += static_cast<double>(p[i]);
  return lane_total(acc, tail);
}

template <typename T>
double squared_deviation(const T* p, std::size_t n, double mean) {
  double acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) {
      const double d = static_cast<double>(p[i + j]) - mean;
      acc[j] += d * d;
    }
  double tail = 0.0;
  for (; i < n; ++i) {
    const double d = static_cast<double>(p[i]) - mean;
    tail += d * d;
  }
  return lane_total(acc, tail);
}

template <typename T>
double dot_of(const T* a, const T* b, std::size_t n) {
  double acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) acc[j] += static_cast<double>(a[i + j]) * static_cast<double>(b[i + j]);
  double tail = 0.0;
  for (; i < n; ++i) tail += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return lane_total(acc, tail);
}

/// Geometry of one conv call. The im2col matrix for a chunk of output rows
/// is [len x K] column-major; column j = ((ci * k + kz) * k + ky) * k + kx.
struct ConvGeom {
  int c = 0, d = 0, h = 0, w = 0;
  int co = 0, dout = 0, hout = 0, wout = 0;
  int k = 0, s = 0, p = 0;
  std::size_t kdim = 0;
  std::size_t in_spatial = 0;
  std::size_t out_spatial = 0;
  int rows = 0;            // dout * hout output rows of length wout
  int rows_per_chunk = 0;
  // Valid output x-range per kx: ix = ox * s - p + kx lies in [0, w).
  std::vector<int> ox_lo, ox_hi;
};

ConvGeom make_geom(const Shape& in, const ConvSpec& spec) {
  require_rank5(in, "conv3d input");
  if (static_cast<int>(in[1]) != spec.in_channels) {
    throw ValidationError("conv3d: channel mismatch, input " + shape_to_string(in) + " vs in_channels " +
                          std::to_string(spec.in_channels));
  }
  ConvGeom g;
  g.c = static_cast<int>(in[1]);
  g.d = static_cast<int>(in[2]);
  g.h = static_cast<int>(in[3]);
  g.w = static_cast<int>(in[4]);
  g.co = spec.out_channels;
  g.k = spec.kernel;
  g.s = spec.stride;
  g.p = spec.padding;
  g.dout = conv_output_extent(g.d, spec);
  g.hout = conv_output_extent(g.h, spec);
  g.wout = conv_output_extent(g.w, spec);
  g.kdim = spec.fan_in();
  g.in_spatial = static_cast<std::size_t>(g.d) * g.h * g.w;
  g.out_spatial = static_cast<std::size_t>(g.dout) * g.hout * g.wout;
  g.rows = g.dout * g.hout;
  // Keep one chunk's im2col block around 1 MiB of floats.
  const std::size_t budget = std::size_t{1} << 18;
  const std::size_t per_row = static_cast<std::size_t>(g.wout) * g.kdim;
  g.rows_per_chunk = static_cast<int>(std::clamp<std::size_t>(budget / std::max<std::size_t>(per_row, 1), 1,
                                                              static_cast<std::size_t>(g.rows)));
  g.ox_lo.resize(static_cast<std::size_t>(g.k));
  g.ox_hi.resize(static_cast<std::size_t>(g.k));
  for (int kx = 0; kx < g.k; ++kx) {
    int lo = 0;
    while (lo < g.wout && lo * g.s - g.p + kx < 0) ++lo;
    int hi = g.wout;
    while (hi > lo && (hi - 1) * g.s - g.p + kx >= g.w) --hi;
    g.ox_lo[static_cast<std::size_t>(kx)] = lo;
    g.ox_hi[static_cast<std::size_t>(kx)] = hi;
  }
  return g;
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, int row0, int nrows, T* col) {
  const std::size_t len = static_cast<std::size_t>(nrows) * g.wout;
  std::size_t j = 0;
  for (int ci = 0; ci < g.c; ++ci) {
    const T* xc = x + static_cast<std::size_t>(ci) * g.in_spatial;
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx, ++j) {
          T* colj = col + j * len;
          const int lo = g.ox_lo[static_cast<std::size_t>(kx)];
          const int hi = g.ox_hi[static_cast<std::size_t>(kx)];
          for (int r = 0; r < nrows; ++r) {
            const int oz = (row0 + r) / g.hout;
            const int oy = (row0 + r) % g.hout;
            const int iz = oz * g.s - g.p + kz;
            const int iy = oy * g.s - g.p + ky;
            T* dst = colj + static_cast<std::size_t>(r) * g.wout;
            if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h || lo >= hi) {
              std::fill(dst, dst + g.wout, T{0});
              continue;
            }
            const T* src = xc + (static_cast<std::size_t>(iz) * g.h + iy) * g.w;
            std::fill(dst, dst + lo, T{0});
            if (g.s == 1) {
              std::copy(src + (lo - g.p + kx), src + (hi - g.p + kx), dst + lo);
            } else {
              for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.s - g.p + kx];
            }
            std::fill(dst + hi, dst + g.wout, T{0});
          }
        }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, int row0, int nrows, T* dx) {
  const std::size_t len = static_cast<std::size_t>(nrows) * g.wout;
  std::size_t j = 0;
  for (int ci = 0; ci < g.c; ++ci) {
    T* dxc = dx + static_cast<std::size_t>(ci) * g.in_spatial;
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx, ++j) {
          const T* colj = col + j * len;
          const int lo = g.ox_lo[static_cast<std::size_t>(kx)];
          const int hi = g.ox_hi[static_cast<std::size_t>(kx)];
          for (int r = 0; r < nrows; ++r) {
            const int oz = (row0 + r) / g.hout;
            const int oy = (row0 + r) % g.hout;
            const int iz = oz * g.s - g.p + kz;
            const int iy = oy * g.s - g.p + ky;
            if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h) continue;
            const T* src = colj + static_cast<std::size_t>(r) * g.wout;
            T* dst = dxc + (static_cast<std::size_t>(iz) * g.h + iy) * g.w;
            for (int ox = lo; ox < hi; ++ox) dst[ox * g.s - g.p + kx] += src[ox];
          }
        }
  }
}

// Stride-1, 3x3x3, padding-1 convolutions run directly on a zero-padded copy
// of each sample instead of through an im2col buffer. Used for rows of at
// least one register tile.

struct PaddedDims {
  std::size_t row, plane, chan;
  PaddedDims(int d, int h, int w)
      : row(static_cast<std::size_t>(w) + 2),
        plane(row * (static_cast<std::size_t>(h) + 2)),
        chan(plane * (static_cast<std::size_t>(d) + 2)) {}
};

template <typename T>
void pad_sample(const T* x, int c, int d, int h, int w, std::vector<T>& out) {
  const PaddedDims pd(d, h, w);
  out.assign(static_cast<std::size_t>(c) * pd.chan, T{0});
  for (int ci = 0; ci < c; ++ci)
    for (int z = 0; z < d; ++z)
      for (int y = 0; y < h; ++y) {
        const T* src = x + ((static_cast<std::size_t>(ci) * d + z) * h + y) * w;
        std::copy(src, src + w, out.data() + ci * pd.chan + (z + 1) * pd.plane + (y + 1) * pd.row + 1);
      }
}

// One register tile: kTile consecutive x positions.
constexpr int kTile = 16;
template <typename T>
struct LaneType;
template <>
struct LaneType<float> {
  typedef float type __attribute__((vector_size(kTile * sizeof(float))));
};
template <>
struct LaneType<double> {
  typedef double type __attribute__((vector_size(kTile * sizeof(double))));
};
template <typename T>
using Lanes = typename LaneType<T>::type;

bool use_direct(const ConvGeom& g) { return g.k == 3 && g.s == 1 && g.p == 1 && g.w >= kTile; }

template <typename T>
inline Lanes<T> load_lanes(const T* p) {
  Lanes<T> v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

// Tile starts covering [0, w) for w >= kTile; the last tile is shifted left
// to end at w and may overlap its neighbour.
inline int tile_start(int t, int tiles, int w) { return t + 1 == tiles ? w - kTile : t * kTile; }
inline int tile_count(int w) { return (w + kTile - 1) / kTile; }

// y[co][z][y][x] = sum over ci and taps of w[co][ci][tap] * xp[ci][z+kz][y+ky][x+kx].
// Blocks of 4 output channels by kTile voxels accumulate in registers.
template <typename T>
void direct_conv3(const T* xp, int cin, int d, int h, int w, const T* weight, int cout, T* y) {
  using V = Lanes<T>;
  constexpr int kBlock = 4;
  const PaddedDims pd(d, h, w);
  const std::size_t out_plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_chan = static_cast<std::size_t>(d) * out_plane;
  const std::size_t taps = static_cast<std::size_t>(cin) * 27;
  const int tiles = tile_count(w);
  // Weights of one channel block, interleaved by tap: wb[tap][c].
  std::vector<T> wb(taps * kBlock);
  for (int co0 = 0; co0 < cout; co0 += kBlock) {
    const int cb = std::min(kBlock, cout - co0);
    for (std::size_t t = 0; t < taps; ++t)
      for (int c = 0; c < kBlock; ++c)
        wb[t * kBlock + c] = c < cb ? weight[static_cast<std::size_t>(co0 + c) * taps + t] : T{0};
    for (int z = 0; z < d; ++z)
      for (int yy = 0; yy < h; ++yy)
        for (int ti = 0; ti < tiles; ++ti) {
          const int x0 = tile_start(ti, tiles, w);
          V acc0{}, acc1{}, acc2{}, acc3{};
          const T* wt = wb.data();
          for (int ci = 0; ci < cin; ++ci)
            for (int kz = 0; kz < 3; ++kz)
              for (int ky = 0; ky < 3; ++ky) {
                const T* row = xp + ci * pd.chan + (z + kz) * pd.plane + (yy + ky) * pd.row + x0;
                for (int kx = 0; kx < 3; ++kx, wt += kBlock) {
                  const V v = load_lanes(row + kx);
                  acc0 += wt[0] * v;
                  acc1 += wt[1] * v;
                  acc2 += wt[2] * v;
                  acc3 += wt[3] * v;
                }
              }
          const V accs[kBlock] = {acc0, acc1, acc2, acc3};
          for (int c = 0; c < cb; ++c)
            std::memcpy(y + static_cast<std::size_t>(co0 + c) * out_chan + z * out_plane +
                            static_cast<std::size_t>(yy) * w + x0,
                        &accs[c], sizeof(V));
        }
  }
}

// dw[co][ci][tap] += sum over positions of dy[co][p] * xp[ci][p + tap].
// For each plane, 4 output channels by 3 kx taps accumulate in registers.
template <typename T>
void direct_conv3_weight_grad(const T* xp, int cin, int d, int h, int w, const T* dy, int cout, double* dw) {
  using V = Lanes<T>;
  constexpr int kBlock = 4;
  const PaddedDims pd(d, h, w);
  const std::size_t out_plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_chan = static_cast<std::size_t>(d) * out_plane;
  const int tiles = tile_count(w);
  // The shifted last tile counts only the lanes its neighbour did not.
  V tail_mask;
  const int overlap = tiles * kTile - w;
  for (int j = 0; j < kTile; ++j) tail_mask[j] = j < overlap ? T{0} : T{1};
  const std::vector<T> zeros(out_plane, T{0});

  auto hsum = [](const V& v) {
    double s = 0;
    for (int j = 0; j < kTile; ++j) s += static_cast<double>(v[j]);
    return s;
  };

  for (int co0 = 0; co0 < cout; co0 += kBlock) {
    const int cb = std::min(kBlock, cout - co0);
    for (int z = 0; z < d; ++z) {
      const T* g[kBlock];
      for (int c = 0; c < kBlock; ++c)
        g[c] = c < cb ? dy + static_cast<std::size_t>(co0 + c) * out_chan + z * out_plane : zeros.data();
      for (int ci = 0; ci < cin; ++ci)
        for (int kz = 0; kz < 3; ++kz)
          for (int ky = 0; ky < 3; ++ky) {
            V a[kBlock][3] = {};
            const T* xrow0 = xp + ci * pd.chan + (z + kz) * pd.plane + ky * pd.row;
            for (int yy = 0; yy < h; ++yy) {
              const T* xrow = xrow0 + yy * pd.row;
              const std::size_t off = static_cast<std::size_t>(yy) * w;
              for (int ti = 0; ti < tiles; ++ti) {
                const int x0 = tile_start(ti, tiles, w);
                const bool last = ti + 1 == tiles && overlap > 0;
                V gv[kBlock];
                for (int c = 0; c < kBlock; ++c) {
                  gv[c] = load_lanes(g[c] + off + x0);
                  if (last) gv[c] *= tail_mask;
                }
                for (int kx = 0; kx < 3; ++kx) {
                  const V v = load_lanes(xrow + x0 + kx);
                  for (int c = 0; c < kBlock; ++c) a[c][kx] += gv[c] * v;
                }
              }
            }
            for (int c = 0; c < cb; ++c)
              for (int kx = 0; kx < 3; ++kx)
                dw[(static_cast<std::size_t>(co0 + c) * cin + ci) * 27 + kz * 9 + ky * 3 + kx] += hsum(a[c][kx]);
          }
    }
  }
}

template <typename T>
void check_weight(const Tensor<T>& weight, const ConvSpec& spec) {
  if (weight.shape != spec.weight_shape()) {
    throw ValidationError("conv3d: weight shape " + shape_to_string(weight.shape) + " does not match " +
                          shape_to_string(spec.weight_shape()));
  }
}

}  // namespace

int conv_output_extent(int n, const ConvSpec& spec) {
  const int out = (n + 2 * spec.padding - spec.kernel) / spec.stride + 1;
  if (out < 1) throw ValidationError("conv3d: input extent too small");
  return out;
}

Shape conv_output_shape(const Shape& input, const ConvSpec& spec) {
  require_rank5(input, "conv3d input");
  return {input[0], static_cast<std::size_t>(spec.out_channels),
          static_cast<std::size_t>(conv_output_extent(static_cast<int>(input[2]), spec)),
          static_cast<std::size_t>(conv_output_extent(static_cast<int>(input[3]), spec)),
          static_cast<std::size_t>(conv_output_extent(static_cast<int>(input[4]), spec))};
}

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& weight, const ConvSpec& spec) {
  check_weight(weight, spec);
  const ConvGeom g = make_geom(x.shape, spec);
  Tensor<T> y(conv_output_shape(x.shape, spec));
  if (use_direct(g)) {
    parallel_for(x.dim(0), [&](std::size_t n) {
      std::vector<T> xp;
      pad_sample(x.sample(n).data(), g.c, g.d, g.h, g.w, xp);
      direct_conv3(xp.data(), g.c, g.d, g.h, g.w, weight.data.data(), g.co, y.sample(n).data());
    });
    return y;
  }
  const Eigen::Map<const Mat<T>> wmat(weight.data.data(), static_cast<Eigen::Index>(g.kdim), g.co);

  parallel_for(x.dim(0), [&](std::size_t n) {
    std::vector<T> col(static_cast<std::size_t>(g.rows_per_chunk) * g.wout * g.kdim);
    const T* xn = x.sample(n).data();
    T* yn = y.sample(n).data();
    for (int r0 = 0; r0 < g.rows; r0 += g.rows_per_chunk) {
      const int nr = std::min(g.rows_per_chunk, g.rows - r0);
      const auto len = static_cast<Eigen::Index>(nr) * g.wout;
      im2col(xn, g, r0, nr, col.data());
      const Eigen::Map<const Mat<T>> cmat(col.data(), len, static_cast<Eigen::Index>(g.kdim));
      StridedMap<T> ychunk(yn + static_cast<std::size_t>(r0) * g.wout, len, g.co,
                           Eigen::OuterStride<>(static_cast<Eigen::Index>(g.out_spatial)));
      ychunk.noalias() = cmat * wmat;
    }
  });
  return y;
}

template <typename T>
void conv3d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy, const ConvSpec& spec,
                     Tensor<T>* dx, Tensor<T>& dweight) {
  check_weight(weight, spec);
  const ConvGeom g = make_geom(x.shape, spec);
  if (dy.shape != conv_output_shape(x.shape, spec)) throw ValidationError("conv3d backward: gradient shape mismatch");
  const std::size_t batch = x.dim(0);
  const Eigen::Map<const Mat<T>> wmat(weight.data.data(), static_cast<Eigen::Index>(g.kdim), g.co);
  if (dx) *dx = Tensor<T>(x.shape);

  if (use_direct(g)) {
    // dx is the same convolution of dy with the kernel flipped and its
    // channel axes swapped.
    std::vector<T> flipped;
    if (dx) {
      flipped.resize(weight.numel());
      for (int co = 0; co < g.co; ++co)
        for (int ci = 0; ci < g.c; ++ci)
          for (int t = 0; t < 27; ++t)
            flipped[(static_cast<std::size_t>(ci) * g.co + co) * 27 + (26 - t)] =
                weight.data[(static_cast<std::size_t>(co) * g.c + ci) * 27 + t];
    }
    std::vector<std::vector<double>> partial_w(batch);
    parallel_for(batch, [&](std::size_t n) {
      std::vector<T> xp;
      pad_sample(x.sample(n).data(), g.c, g.d, g.h, g.w, xp);
      partial_w[n].assign(weight.numel(), 0.0);
      direct_conv3_weight_grad(xp.data(), g.c, g.d, g.h, g.w, dy.sample(n).data(), g.co, partial_w[n].data());
      if (dx) {
        std::vector<T> dyp;
        pad_sample(dy.sample(n).data(), g.co, g.d, g.h, g.w, dyp);
        direct_conv3(dyp.data(), g.co, g.d, g.h, g.w, flipped.data(), g.c, dx->sample(n).data());
      }
    });
    dweight = Tensor<T>(spec.weight_shape());
    for (std::size_t i = 0; i < dweight.numel(); ++i) {
      double s = 0.0;
      for (const auto& pw : partial_w) s += pw[i];
      dweight.data[i] = static_cast<T>(s);
    }
    return;
  }

  // Per-sample weight gradients, reduced in sample order so the result does
  // not depend on the worker count.
  std::vector<Mat<T>> partial(batch);
  parallel_for(batch, [&](std::size_t n) {
    std::vector<T> col(static_cast<std::size_t>(g.rows_per_chunk) * g.wout * g.kdim);
    std::vector<T> dcol(dx ? col.size() : 0);
    Mat<T>& dw = partial[n];
    dw.setZero(static_cast<Eigen::Index>(g.kdim), g.co);
    const T* xn = x.sample(n).data();
    const T* dyn = dy.sample(n).data();
    T* dxn = dx ? dx->sample(n).data() : nullptr;
    for (int r0 = 0; r0 < g.rows; r0 += g.rows_per_chunk) {
      const int nr = std::min(g.rows_per_chunk, g.rows - r0);
      const auto len = static_cast<Eigen::Index>(nr) * g.wout;
      im2col(xn, g, r0, nr, col.data());
      const Eigen::Map<const Mat<T>> cmat(col.data(), len, static_cast<Eigen::Index>(g.kdim));
      ConstStridedMap<T> dychunk(dyn + static_cast<std::size_t>(r0) * g.wout, len, g.co,
                                 Eigen::OuterStride<>(static_cast<Eigen::Index>(g.out_spatial)));
      dw.noalias() += cmat.transpose() * dychunk;
      if (dxn) {
        Eigen::Map<Mat<T>> dmat(dcol.data(), len, static_cast<Eigen::Index>(g.kdim));
        dmat.noalias() = dychunk * wmat.transpose();
        col2im_add(dcol.data(), g, r0, nr, dxn);
      }
    }
  });

  dweight = Tensor<T>(spec.weight_shape());
  Eigen::Map<Mat<T>> total(dweight.data.data(), static_cast<Eigen::Index>(g.kdim), g.co);
  for (const auto& dw : partial) total += dw;
}

int default_groups(int channels) {
  int g = std::min(8, channels);
  while (channels % g != 0) --g;
  return g;
}

template <typename T>
Tensor<T> norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       const Tensor<T>& running_mean, const Tensor<T>& running_var, const NormSpec& spec,
                       bool training, NormCache<T>* cache) {
  require_rank5(x.shape, "norm input");
  const std::size_t batch = x.dim(0);
  const auto channels = static_cast<std::size_t>(spec.channels);
  if (x.dim(1) != channels) throw ValidationError("norm: channel mismatch");
  const std::size_t spatial = x.numel() / (batch * channels);

  Tensor<T> xhat(x.shape);
  std::vector<T> inv_std;
  std::vector<T> group_mean;
  NormCache<T> local;
  NormCache<T>& c = cache ? *cache : local;
  c.batch_mean.clear();
  c.batch_var.clear();
  c.used_batch_stats = false;

  if (spec.kind == NormKind::batch) {
    inv_std.resize(channels);
    const bool batch_stats = training;
    if (batch_stats) {
      c.used_batch_stats = true;
      c.batch_mean.resize(channels);
      c.batch_var.resize(channels);
    }
    const double m = static_cast<double>(batch * spatial);
    for (std::size_t ch = 0; ch < channels; ++ch) {
      double mean = 0.0;
      double var = 0.0;
      if (batch_stats) {
        for (std::size_t n = 0; n < batch; ++n) mean += sum_of(x.data.data() + (n * channels + ch) * spatial, spatial);
        mean /= m;
        for (std::size_t n = 0; n < batch; ++n) {
          var += squared_deviation(x.data.data() + (n * channels + ch) * spatial, spatial, mean);
        }
        c.batch_mean[ch] = static_cast<T>(mean);
        c.batch_var[ch] = static_cast<T>(m > 1 ? var / (m - 1) : 0.0);
        var /= m;
      } else {
        mean = running_mean.data[ch];
        var = running_var.data[ch];
      }
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + spec.eps));
    }
  } else {
    const auto groups = static_cast<std::size_t>(spec.groups);
    if (groups == 0 || channels % groups != 0) throw ValidationError("group norm: groups must divide channels");
    const std::size_t group_size = channels / groups * spatial;
    inv_std.resize(batch * groups);
    group_mean.resize(batch * groups);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t off = (n * groups + gi) * group_size;  // groups are contiguous channel runs
        const T* p = x.data.data() + off;
        const double mean = sum_of(p, group_size) / static_cast<double>(group_size);
        const double var = squared_deviation(p, group_size, mean) / static_cast<double>(group_size);
        inv_std[n * groups + gi] = static_cast<T>(1.0 / std::sqrt(var + spec.eps));
        group_mean[n * groups + gi] = static_cast<T>(mean);
      }
  }

  // xhat and the affine output in one sweep.
  Tensor<T> y(x.shape);
  const std::size_t groups = spec.kind == NormKind::group ? static_cast<std::size_t>(spec.groups) : 0;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const std::size_t off = (n * channels + ch) * spatial;
      T mu, is;
      if (spec.kind == NormKind::batch) {
        mu = c.used_batch_stats ? c.batch_mean[ch] : static_cast<T>(running_mean.data[ch]);
        is = inv_std[ch];
      } else {
        const std::size_t gi = n * groups + ch / (channels / groups);
        mu = group_mean[gi];
        is = inv_std[gi];
      }
      const T gmul = gamma.data[ch];
      const T badd = beta.data[ch];
      const T* xp = x.data.data() + off;
      T* hp = xhat.data.data() + off;
      T* yp = y.data.data() + off;
      for (std::size_t i = 0; i < spatial; ++i) {
        const T h = (xp[i] - mu) * is;
        hp[i] = h;
        yp[i] = gmul * h + badd;
      }
    }
  c.xhat = std::move(xhat);
  c.inv_std = std::move(inv_std);
  return y;
}

template <typename T>
Tensor<T> norm_backward(const Tensor<T>& dy, const Tensor<T>& gamma, const NormCache<T>& cache, const NormSpec& spec,
                        Tensor<T>& dgamma, Tensor<T>& dbeta) {
  const Tensor<T>& xhat = cache.xhat;
  if (dy.shape != xhat.shape) throw ValidationError("norm backward: gradient shape mismatch");
  const std::size_t batch = dy.dim(0);
  const auto channels = static_cast<std::size_t>(spec.channels);
  const std::size_t spatial = dy.numel() / (batch * channels);

  dgamma = Tensor<T>({channels});
  dbeta = Tensor<T>({channels});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const std::size_t off = (n * channels + ch) * spatial;
      dgamma.data[ch] += static_cast<T>(dot_of(dy.data.data() + off, xhat.data.data() + off, spatial));
      dbeta.data[ch] += static_cast<T>(sum_of(dy.data.data() + off, spatial));
    }

  Tensor<T> dx(dy.shape);
  if (spec.kind == NormKind::batch) {
    const double m = static_cast<double>(batch * spatial);
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const T g = gamma.data[ch];
      const T is = cache.inv_std[ch];
      if (!cache.used_batch_stats) {
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t off = (n * channels + ch) * spatial;
          for (std::size_t i = 0; i < spatial; ++i) dx.data[off + i] = dy.data[off + i] * g * is;
        }
        continue;
      }
      // dxhat = dy * gamma; dx = is / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
      const double sum_dxhat = static_cast<double>(dbeta.data[ch]) * g;
      const double sum_dxhat_xhat = static_cast<double>(dgamma.data[ch]) * g;
      const T a = static_cast<T>(g * is);
      const T b = static_cast<T>(is * sum_dxhat / m);
      const T c = static_cast<T>(is * sum_dxhat_xhat / m);
      for (std::size_t n = 0; n < batch; ++n) {
        const std::size_t off = (n * channels + ch) * spatial;
        for (std::size_t i = 0; i < spatial; ++i)
          dx.data[off + i] = a * dy.data[off + i] - b - c * xhat.data[off + i];
      }
    }
  } else {
    const auto groups = static_cast<std::size_t>(spec.groups);
    const std::size_t per_group = channels / groups;
    const double m = static_cast<double>(per_group * spatial);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t gi = 0; gi < groups; ++gi) {
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t cl = 0; cl < per_group; ++cl) {
          const std::size_t ch = gi * per_group + cl;
          const std::size_t off = (n * channels + ch) * spatial;
          const double g = gamma.data[ch];
          sum_dxhat += g * sum_of(dy.data.data() + off, spatial);
          sum_dxhat_xhat += g * dot_of(dy.data.data() + off, xhat.data.data() + off, spatial);
        }
        const double is = cache.inv_std[n * groups + gi];
        for (std::size_t cl = 0; cl < per_group; ++cl) {
          const std::size_t ch = gi * per_group + cl;
          const std::size_t off = (n * channels + ch) * spatial;
          const T a = static_cast<T>(gamma.data[ch] * is);
          const T b = static_cast<T>(is * sum_dxhat / m);
          const T c = static_cast<T>(is * sum_dxhat_xhat / m);
          for (std::size_t i = 0; i < spatial; ++i)
            dx.data[off + i] = a * dy.data[off + i] - b - c * xhat.data[off + i];
        }
      }
  }
  return dx;
}

template <typename T>
void update_running_stats(Tensor<T>& running_mean, Tensor<T>& running_var, const NormCache<T>& cache,
                          double momentum) {
  if (!cache.used_batch_stats) return;
  for (std::size_t ch = 0; ch < running_mean.numel(); ++ch) {
    running_mean.data[ch] = static_cast<T>((1 - momentum) * running_mean.data[ch] + momentum * cache.batch_mean[ch]);
    running_var.data[ch] = static_cast<T>((1 - momentum) * running_var.data[ch] + momentum * cache.batch_var[ch]);
  }
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (T& v : x.data) v = v > T{0} ? v : T{0};
}

template <typename T>
void relu_backward_inplace(Tensor<T>& dy, const Tensor<T>& y) {
  if (dy.shape != y.shape) throw ValidationError("relu backward: shape mismatch");
  for (std::size_t i = 0; i < dy.numel(); ++i) dy.data[i] = y.data[i] > T{0} ? dy.data[i] : T{0};
}

template <typename T>
Tensor<T> maxpool3d_forward(const Tensor<T>& x, std::vector<std::uint32_t>* argmax) {
  require_rank5(x.shape, "maxpool input");
  const ConvSpec pool{static_cast<int>(x.dim(1)), static_cast<int>(x.dim(1)), 3, 2, 1};
  const Shape out_shape = conv_output_shape(x.shape, pool);
  Tensor<T> y(out_shape);
  if (argmax) argmax->assign(y.numel(), 0);
  const int d = static_cast<int>(x.dim(2)), h = static_cast<int>(x.dim(3)), w = static_cast<int>(x.dim(4));
  const int od = static_cast<int>(out_shape[2]), oh = static_cast<int>(out_shape[3]), ow = static_cast<int>(out_shape[4]);
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t in_sp = static_cast<std::size_t>(d) * h * w;
  const std::size_t out_sp = static_cast<std::size_t>(od) * oh * ow;

  // Separable max over z, then y, then x: the first two passes run along
  // contiguous rows and shrink the data before the strided x pass. Each pass
  // keeps the first maximum of its window, so ties go to the lowest x, then
  // y, then z. argmax records the winner for the backward pass.
  auto window = [](int o, int n) { return std::pair{std::max(0, 2 * o - 1), std::min(n - 1, 2 * o + 1)}; };
  const std::size_t row = static_cast<std::size_t>(w);
  parallel_for(planes, [&](std::size_t pl) {
    const T* xp = x.data.data() + pl * in_sp;
    // z pass: [od][h][w], index = iz * h * w
    const std::size_t zslab = static_cast<std::size_t>(h) * w;
    std::vector<T> vz(static_cast<std::size_t>(od) * zslab);
    std::vector<std::uint32_t> iz(vz.size());
    for (int o = 0; o < od; ++o) {
      const auto [lo, hi] = window(o, d);
      T* dv = vz.data() + static_cast<std::size_t>(o) * zslab;
      std::uint32_t* di = iz.data() + static_cast<std::size_t>(o) * zslab;
      std::copy(xp + lo * zslab, xp + (lo + 1) * zslab, dv);
      std::fill(di, di + zslab, static_cast<std::uint32_t>(lo * zslab));
      for (int i = lo + 1; i <= hi; ++i) {
        const T* sv = xp + static_cast<std::size_t>(i) * zslab;
        const auto off = static_cast<std::uint32_t>(i * zslab);
        for (std::size_t j = 0; j < zslab; ++j) {
          const bool gt = sv[j] > dv[j];
          dv[j] = gt ? sv[j] : dv[j];
          di[j] = gt ? off : di[j];
        }
      }
    }
    // y pass: [od][oh][w], index += iy * w
    std::vector<T> vy(static_cast<std::size_t>(od) * oh * row);
    std::vector<std::uint32_t> iy(vy.size());
    for (int z = 0; z < od; ++z)
      for (int o = 0; o < oh; ++o) {
        const auto [lo, hi] = window(o, h);
        T* dv = vy.data() + (static_cast<std::size_t>(z) * oh + o) * row;
        std::uint32_t* di = iy.data() + (static_cast<std::size_t>(z) * oh + o) * row;
        const std::size_t first = (static_cast<std::size_t>(z) * h + lo) * row;
        const auto lo_off = static_cast<std::uint32_t>(lo * w);
        for (std::size_t xx = 0; xx < row; ++xx) {
          dv[xx] = vz[first + xx];
          di[xx] = iz[first + xx] + lo_off;
        }
        for (int i = lo + 1; i <= hi; ++i) {
          const std::size_t src = (static_cast<std::size_t>(z) * h + i) * row;
          const auto off = static_cast<std::uint32_t>(i * w);
          for (std::size_t xx = 0; xx < row; ++xx) {
            const bool gt = vz[src + xx] > dv[xx];
            dv[xx] = gt ? vz[src + xx] : dv[xx];
            di[xx] = gt ? iz[src + xx] + off : di[xx];
          }
        }
      }
    // x pass straight into the output, index += ix
    T* yp = y.data.data() + pl * out_sp;
    std::uint32_t* ap = argmax ? argmax->data() + pl * out_sp : nullptr;
    for (std::size_t r = 0; r < static_cast<std::size_t>(od) * oh; ++r) {
      const T* sv = vy.data() + r * row;
      const std::uint32_t* si = iy.data() + r * row;
      for (int o = 0; o < ow; ++o) {
        const auto [lo, hi] = window(o, w);
        T best = sv[lo];
        std::uint32_t best_i = si[lo] + static_cast<std::uint32_t>(lo);
        for (int i = lo + 1; i <= hi; ++i) {
          const bool gt = sv[i] > best;
          best = gt ? sv[i] : best;
          best_i = gt ? si[i] + static_cast<std::uint32_t>(i) : best_i;
        }
        yp[r * ow + o] = best;
        if (ap) ap[r * ow + o] = best_i;
      }
    }
  });
  return y;
}

template <typename T>
Tensor<T> maxpool3d_backward(const Tensor<T>& dy, const std::vector<std::uint32_t>& argmax, const Shape& input_shape) {
  Tensor<T> dx(input_shape);
  const std::size_t planes = input_shape[0] * input_shape[1];
  const std::size_t in_sp = dx.numel() / planes;
  const std::size_t out_sp = dy.numel() / planes;
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t o = 0; o < out_sp; ++o) dx.data[pl * in_sp + argmax[pl * out_sp + o]] += dy.data[pl * out_sp + o];
  return dx;
}

template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x) {
  require_rank5(x.shape, "global pool input");
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t sp = x.numel() / planes;
  Tensor<T> y({x.dim(0), x.dim(1)});
  for (std::size_t pl = 0; pl < planes; ++pl) {
    double acc = 0.0;
    const T* p = x.data.data() + pl * sp;
    for (std::size_t i = 0; i < sp; ++i) acc += p[i];
    y.data[pl] = static_cast<T>(acc / static_cast<double>(sp));
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, const Shape& input_shape) {
  Tensor<T> dx(input_shape);
  const std::size_t planes = input_shape[0] * input_shape[1];
  const std::size_t sp = dx.numel() / planes;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T g = static_cast<T>(dy.data[pl] / static_cast<T>(sp));
    std::fill(dx.data.begin() + static_cast<std::ptrdiff_t>(pl * sp),
              dx.data.begin() + static_cast<std::ptrdiff_t>((pl + 1) * sp), g);
  }
  return dx;
}

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || weight.dim(1) != x.dim(1) || bias.numel() != weight.dim(0)) {
    throw ValidationError("linear: shape mismatch " + shape_to_string(x.shape) + " x " + shape_to_string(weight.shape));
  }
  const std::size_t batch = x.dim(0), in = x.dim(1), out = weight.dim(0);
  Tensor<T> y({batch, out});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = bias.data[o];
      for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(x.data[n * in + i]) * weight.data[o * in + i];
      y.data[n * out + o] = static_cast<T>(acc);
    }
  return y;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy, Tensor<T>* dx,
                     Tensor<T>& dweight, Tensor<T>& dbias) {
  const std::size_t batch = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (dy.shape != Shape{batch, out}) throw ValidationError("linear backward: gradient shape mismatch");
  dweight = Tensor<T>(weight.shape);
  dbias = Tensor<T>({out});
  if (dx) *dx = Tensor<T>(x.shape);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < out; ++o) {
      const T g = dy.data[n * out + o];
      dbias.data[o] += g;
      for (std::size_t i = 0; i < in; ++i) {
        dweight.data[o * in + i] += g * x.data[n * in + i];
        if (dx) dx->data[n * in + i] += g * weight.data[o * in + i];
      }
    }
}

#define NODULENET_INSTANTIATE_LAYERS(T)                                                                               \
  template Tensor<T> conv3d_forward(const Tensor<T>&, const Tensor<T>&, const ConvSpec&);                              \
  template void conv3d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvSpec&, Tensor<T>*,    \
                                Tensor<T>&);                                                                           \
  template Tensor<T> norm_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                  const Tensor<T>&, const NormSpec&, bool, NormCache<T>*);                            \
  template Tensor<T> norm_backward(const Tensor<T>&, const Tensor<T>&, const NormCache<T>&, const NormSpec&,          \
                                   Tensor<T>&, Tensor<T>&);                                                            \
  template void update_running_stats(Tensor<T>&, Tensor<T>&, const NormCache<T>&, double);                            \
  template void relu_inplace(Tensor<T>&);                                                                              \
  template void relu_backward_inplace(Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> maxpool3d_forward(const Tensor<T>&, std::vector<std::uint32_t>*);                                 \
  template Tensor<T> maxpool3d_backward(const Tensor<T>&, const std::vector<std::uint32_t>&, const Shape&);            \
  template Tensor<T> global_avg_pool_forward(const Tensor<T>&);                                                        \
  template Tensor<T> global_avg_pool_backward(const Tensor<T>&, const Shape&);                                         \
  template Tensor<T> linear_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template void linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*, Tensor<T>&,          \
                                Tensor<T>&);

NODULENET_INSTANTIATE_LAYERS(float)
NODULENET_INSTANTIATE_LAYERS(double)

#undef NODULENET_INSTANTIATE_LAYERS

}  // namespace nodulenet::nn
