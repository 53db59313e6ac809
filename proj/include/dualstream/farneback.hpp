#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dualstream/image.hpp"

namespace dualstream {

struct FarnebackParams {
  double pyr_scale = 0.5;
  int levels = 5;
  int winsize = 11;
  int iterations = 5;
  int poly_n = 5;  ///< half-width of the polynomial-expansion window
  double poly_sigma = 1.1;

  void validate() const {
    if (!(pyr_scale > 0.0 && pyr_scale < 1.0) || levels < 1 || winsize < 1 || winsize % 2 == 0 || iterations < 1 ||
        poly_n < 1 || poly_n % 2 == 0 || poly_sigma < 0.0)
      fail(ErrorCode::InvalidArgument, "invalid Farneback parameters");
  }
};

/// Dense displacement field: frame_a(x, y) ~ frame_b(x + u, y + v).
struct FlowField {
  std::size_t width = 0, height = 0;
  std::vector<float> u, v;

  FlowField() = default;
  FlowField(std::size_t w, std::size_t h) : width(w), height(h), u(w * h, 0.f), v(w * h, 0.f) {}
};

namespace farneback {

inline std::vector<double> gaussian_kernel(int ksize, double sigma) {
  if (sigma <= 0.0 && ksize == 3) return {0.25, 0.5, 0.25};
  if (sigma <= 0.0) sigma = 0.3 * ((ksize - 1) * 0.5 - 1) + 0.8;
  std::vector<double> k(static_cast<std::size_t>(ksize));
  double s = 0;
  for (int i = 0; i < ksize; ++i) {
    const double x = i - (ksize - 1) * 0.5;
    s += (k[static_cast<std::size_t>(i)] = std::exp(-x * x / (2 * sigma * sigma)));
  }
  for (auto& v : k) v /= s;
  return k;
}

// Reflect-101 index: ... 2 1 | 0 1 2 ... n-1 | n-2 ...
inline std::ptrdiff_t reflect101(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
  return i;
}

inline GrayImage gaussian_blur(const GrayImage& src, int ksize, double sigma) {
  const auto k = gaussian_kernel(ksize, sigma);
  const std::ptrdiff_t r = ksize / 2, W = static_cast<std::ptrdiff_t>(src.width), H = static_cast<std::ptrdiff_t>(src.height);
  GrayImage tmp(src.width, src.height), out(src.width, src.height);
  for (std::ptrdiff_t y = 0; y < H; ++y)
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      double acc = 0;
      for (std::ptrdiff_t j = -r; j <= r; ++j)
        acc += k[static_cast<std::size_t>(j + r)] * src.data[static_cast<std::size_t>(y * W + reflect101(x + j, W))];
      tmp.data[static_cast<std::size_t>(y * W + x)] = static_cast<float>(acc);
    }
  for (std::ptrdiff_t y = 0; y < H; ++y)
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      double acc = 0;
      for (std::ptrdiff_t j = -r; j <= r; ++j)
        acc += k[static_cast<std::size_t>(j + r)] * tmp.data[static_cast<std::size_t>(reflect101(y + j, H) * W + x)];
      out.data[static_cast<std::size_t>(y * W + x)] = static_cast<float>(acc);
    }
  return out;
}

/// Inverse of a small symmetric positive-definite matrix by Gauss-Jordan elimination.
template <std::size_t N>
std::array<std::array<double, N>, N> invert(std::array<std::array<double, N>, N> a) {
  std::array<std::array<double, N>, N> inv{};
  for (std::size_t i = 0; i < N; ++i) inv[i][i] = 1.0;
  for (std::size_t c = 0; c < N; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < N; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    std::swap(inv[c], inv[piv]);
    const double d = a[c][c];
    for (std::size_t j = 0; j < N; ++j) {
      a[c][j] /= d;
      inv[c][j] /= d;
    }
    for (std::size_t r = 0; r < N; ++r) {
      if (r == c) continue;
      const double f = a[r][c];
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < N; ++j) {
        a[r][j] -= f * a[c][j];
        inv[r][j] -= f * inv[c][j];
      }
    }
  }
  return inv;
}

/// Gaussian applicability weights and the entries of the inverted moment matrix
/// needed to turn weighted correlations into quadratic-fit coefficients.
struct ExpansionBasis {
  int n;
  std::vector<float> g, xg, xxg;  ///< indexed by offset + n
  double ig11, ig03, ig33, ig55;
};

inline ExpansionBasis prepare_basis(int n, double sigma) {
  if (sigma < 1.1920929e-07) sigma = n * 0.3;
  ExpansionBasis b{n, std::vector<float>(2 * n + 1), std::vector<float>(2 * n + 1), std::vector<float>(2 * n + 1), 0, 0, 0, 0};
  double s = 0;
  for (int x = -n; x <= n; ++x) {
    b.g[x + n] = static_cast<float>(std::exp(-x * x / (2 * sigma * sigma)));
    s += b.g[x + n];
  }
  s = 1.0 / s;
  for (int x = -n; x <= n; ++x) {
    b.g[x + n] = static_cast<float>(b.g[x + n] * s);
    b.xg[x + n] = static_cast<float>(x * b.g[x + n]);
    b.xxg[x + n] = static_cast<float>(x * x * b.g[x + n]);
  }
  std::array<std::array<double, 6>, 6> G{};
  for (int y = -n; y <= n; ++y)
    for (int x = -n; x <= n; ++x) {
      const double w = static_cast<double>(b.g[y + n]) * b.g[x + n];
      G[0][0] += w;
      G[1][1] += w * x * x;
      G[3][3] += w * x * x * x * x;
      G[5][5] += w * x * x * y * y;
    }
  G[2][2] = G[0][3] = G[0][4] = G[3][0] = G[4][0] = G[1][1];
  G[4][4] = G[3][3];
  G[3][4] = G[4][3] = G[5][5];
  const auto inv = invert(G);
  b.ig11 = inv[1][1];
  b.ig03 = inv[0][3];
  b.ig33 = inv[3][3];
  b.ig55 = inv[5][5];
  return b;
}

/// Per-pixel quadratic coefficients [ry, rx, ryy, rxx, rxy] of a local
/// Gaussian-weighted polynomial fit, with replicated borders.
inline std::vector<float> poly_expand(const GrayImage& src, int n, double sigma) {
  const ExpansionBasis b = prepare_basis(n, sigma);
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(src.width), H = static_cast<std::ptrdiff_t>(src.height);
  std::vector<float> dst(static_cast<std::size_t>(W * H * 5));
  std::vector<float> rowbuf(static_cast<std::size_t>((W + 2 * n) * 3));
  float* row = rowbuf.data() + n * 3;
  const float* g = b.g.data() + n;
  const float* xg = b.xg.data() + n;
  const float* xxg = b.xxg.data() + n;
  for (std::ptrdiff_t y = 0; y < H; ++y) {
    const float* s0 = src.data.data() + y * W;
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      row[x * 3] = s0[x] * g[0];
      row[x * 3 + 1] = row[x * 3 + 2] = 0.f;
    }
    for (int k = 1; k <= n; ++k) {
      const float* up = src.data.data() + std::max<std::ptrdiff_t>(y - k, 0) * W;
      const float* dn = src.data.data() + std::min<std::ptrdiff_t>(y + k, H - 1) * W;
      for (std::ptrdiff_t x = 0; x < W; ++x) {
        const float p = up[x] + dn[x];
        row[x * 3] += g[k] * p;
        row[x * 3 + 1] += xg[k] * (dn[x] - up[x]);
        row[x * 3 + 2] += xxg[k] * p;
      }
    }
    for (std::ptrdiff_t x = 0; x < n * 3; ++x) {
      row[-1 - x] = row[2 - x];
      row[W * 3 + x] = row[W * 3 + x - 3];
    }
    float* d = dst.data() + y * W * 5;
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      double b1 = row[x * 3] * g[0], b2 = 0, b3 = row[x * 3 + 1] * g[0], b4 = 0, b5 = row[x * 3 + 2] * g[0], b6 = 0;
      for (int k = 1; k <= n; ++k) {
        const float* r = row + (x + k) * 3;
        const float* l = row + (x - k) * 3;
        const double tg = r[0] + l[0];
        b1 += tg * g[k];
        b4 += tg * xxg[k];
        b2 += (r[0] - l[0]) * xg[k];
        b3 += (r[1] + l[1]) * g[k];
        b6 += (r[1] - l[1]) * xg[k];
        b5 += (r[2] + l[2]) * g[k];
      }
      d[x * 5] = static_cast<float>(b3 * b.ig11);
      d[x * 5 + 1] = static_cast<float>(b2 * b.ig11);
      d[x * 5 + 2] = static_cast<float>(b1 * b.ig03 + b5 * b.ig33);
      d[x * 5 + 3] = static_cast<float>(b1 * b.ig03 + b4 * b.ig33);
      d[x * 5 + 4] = static_cast<float>(b6 * b.ig55);
    }
  }
  return dst;
}

/// Builds the per-pixel normal equations [G11, G12, G22, h1, h2] from the two
/// expansions and the current flow estimate.
inline void update_matrices(const std::vector<float>& R0, const std::vector<float>& R1, const FlowField& flow,
                            std::vector<float>& M) {
  static constexpr int kBorder = 5;
  static constexpr float border[kBorder] = {0.14f, 0.14f, 0.4472f, 0.8943f, 0.9830f};
  const int W = static_cast<int>(flow.width), H = static_cast<int>(flow.height);
  M.assign(static_cast<std::size_t>(W * H * 5), 0.f);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * W + x);
      const float dx = flow.u[i], dy = flow.v[i];
      float fx = x + dx, fy = y + dy;
      const int x1 = static_cast<int>(std::floor(fx)), y1 = static_cast<int>(std::floor(fy));
      fx -= static_cast<float>(x1);
      fy -= static_cast<float>(y1);
      const float* r0 = R0.data() + i * 5;
      float r2, r3, r4, r5, r6;
      if (x1 >= 0 && y1 >= 0 && x1 < W - 1 && y1 < H - 1) {
        const float* p = R1.data() + (static_cast<std::size_t>(y1) * W + x1) * 5;
        const float* q = p + static_cast<std::size_t>(W) * 5;
        const float a00 = (1.f - fx) * (1.f - fy), a01 = fx * (1.f - fy), a10 = (1.f - fx) * fy, a11 = fx * fy;
        r2 = a00 * p[0] + a01 * p[5] + a10 * q[0] + a11 * q[5];
        r3 = a00 * p[1] + a01 * p[6] + a10 * q[1] + a11 * q[6];
        r4 = a00 * p[2] + a01 * p[7] + a10 * q[2] + a11 * q[7];
        r5 = a00 * p[3] + a01 * p[8] + a10 * q[3] + a11 * q[8];
        r6 = a00 * p[4] + a01 * p[9] + a10 * q[4] + a11 * q[9];
        r4 = (r0[2] + r4) * 0.5f;
        r5 = (r0[3] + r5) * 0.5f;
        r6 = (r0[4] + r6) * 0.25f;
      } else {
        r2 = r3 = 0.f;
        r4 = r0[2];
        r5 = r0[3];
        r6 = r0[4] * 0.5f;
      }
      r2 = (r0[0] - r2) * 0.5f;
      r3 = (r0[1] - r3) * 0.5f;
      r2 += r4 * dy + r6 * dx;
      r3 += r6 * dy + r5 * dx;
      if (x < kBorder || y < kBorder || x >= W - kBorder || y >= H - kBorder) {
        const float s = (x < kBorder ? border[x] : 1.f) * (x >= W - kBorder ? border[W - x - 1] : 1.f) *
                        (y < kBorder ? border[y] : 1.f) * (y >= H - kBorder ? border[H - y - 1] : 1.f);
        r2 *= s;
        r3 *= s;
        r4 *= s;
        r5 *= s;
        r6 *= s;
      }
      float* m = M.data() + i * 5;
      m[0] = r4 * r4 + r6 * r6;
      m[1] = (r4 + r5) * r6;
      m[2] = r5 * r5 + r6 * r6;
      m[3] = r4 * r2 + r6 * r3;
      m[4] = r6 * r2 + r5 * r3;
    }
}

/// Box-averages the normal equations over a winsize x winsize window
/// (replicated borders) and solves the 2x2 system per pixel.
inline void solve_flow(const std::vector<float>& M, int winsize, FlowField& flow) {
  const int W = static_cast<int>(flow.width), H = static_cast<int>(flow.height), m = winsize / 2;
  std::vector<double> vsum(static_cast<std::size_t>(W * H * 5), 0.0);
  for (int y = 0; y < H; ++y)
    for (int k = -m; k <= m; ++k) {
      const float* src = M.data() + static_cast<std::size_t>(std::clamp(y + k, 0, H - 1)) * W * 5;
      double* dst = vsum.data() + static_cast<std::size_t>(y) * W * 5;
      for (int x = 0; x < W * 5; ++x) dst[x] += src[x];
    }
  const double scale = 1.0 / (static_cast<double>(winsize) * winsize);
  for (int y = 0; y < H; ++y) {
    const double* row = vsum.data() + static_cast<std::size_t>(y) * W * 5;
    for (int x = 0; x < W; ++x) {
      double s[5] = {0, 0, 0, 0, 0};
      for (int k = -m; k <= m; ++k) {
        const double* p = row + std::clamp(x + k, 0, W - 1) * 5;
        for (int c = 0; c < 5; ++c) s[c] += p[c];
      }
      const double g11 = s[0] * scale, g12 = s[1] * scale, g22 = s[2] * scale, h1 = s[3] * scale, h2 = s[4] * scale;
      const double idet = 1.0 / (g11 * g22 - g12 * g12 + 1e-3);
      const std::size_t i = static_cast<std::size_t>(y * W + x);
      flow.u[i] = static_cast<float>((g11 * h2 - g12 * h1) * idet);
      flow.v[i] = static_cast<float>((g22 * h1 - g12 * h2) * idet);
    }
  }
}

inline FlowField resize_flow(const FlowField& f, std::size_t w, std::size_t h, float gain) {
  GrayImage u{f.width, f.height}, v{f.width, f.height};
  u.data = f.u;
  v.data = f.v;
  FlowField out(w, h);
  out.u = resize_bilinear(u, w, h).data;
  out.v = resize_bilinear(v, w, h).data;
  for (auto& x : out.u) x *= gain;
  for (auto& x : out.v) x *= gain;
  return out;
}

}  // namespace farneback

/// Number of pyramid layers used for a w x h frame: layer k has scale
/// pyr_scale^k and is kept while its smaller side is at least
/// max(winsize, 32). Coarser layers than that give a poor initial estimate.
inline int farneback_layers(std::size_t width, std::size_t height, const FarnebackParams& p) {
  int layers = 1;
  double scale = 1.0;
  while (layers < p.levels) {
    scale *= p.pyr_scale;
    if (static_cast<double>(std::min(width, height)) * scale < std::max(p.winsize, 32)) break;
    ++layers;
  }
  return layers;
}

/// Dense two-frame flow by polynomial expansion, refined coarse to fine.
inline FlowField estimate_flow(const GrayImage& a, const GrayImage& b, const FarnebackParams& p = {}) {
  p.validate();
  if (a.width != b.width || a.height != b.height)
    fail(ErrorCode::DimensionMismatch, "flow frames differ in size: " + std::to_string(a.width) + "x" +
                                           std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                                           std::to_string(b.height));
  if (a.width < static_cast<std::size_t>(p.winsize) || a.height < static_cast<std::size_t>(p.winsize))
    fail(ErrorCode::ImageTooSmall, "frame " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                                       " is smaller than the " + std::to_string(p.winsize) + " px window");
  const int layers = farneback_layers(a.width, a.height, p);
  FlowField flow;
  for (int k = layers - 1; k >= 0; --k) {
    const double scale = std::pow(p.pyr_scale, k);
    const double sigma = (1.0 / scale - 1.0) * 0.5;
    const int ksize = std::max(static_cast<int>(std::lround(sigma * 5)) | 1, 3);
    const auto w = static_cast<std::size_t>(std::lround(static_cast<double>(a.width) * scale));
    const auto h = static_cast<std::size_t>(std::lround(static_cast<double>(a.height) * scale));
    flow = flow.u.empty() ? FlowField(w, h) : farneback::resize_flow(flow, w, h, static_cast<float>(1.0 / p.pyr_scale));
    std::vector<float> R[2];
    const GrayImage* src[2] = {&a, &b};
    for (int i = 0; i < 2; ++i) {
      GrayImage level = resize_bilinear(farneback::gaussian_blur(*src[i], ksize, sigma), w, h);
      R[i] = farneback::poly_expand(level, p.poly_n, p.poly_sigma);
    }
    std::vector<float> M;
    farneback::update_matrices(R[0], R[1], flow, M);
    for (int it = 0; it < p.iterations; ++it) {
      farneback::solve_flow(M, p.winsize, flow);
      if (it < p.iterations - 1) farneback::update_matrices(R[0], R[1], flow, M);
    }
  }
  return flow;
}

}  // namespace dualstream
