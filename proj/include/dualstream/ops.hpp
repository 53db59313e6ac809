#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "dualstream/error.hpp"
#include "dualstream/rng.hpp"
#include "dualstream/tensor.hpp"

namespace dualstream {

namespace detail {

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  fail(ErrorCode::ShapeMismatch, op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const std::string& why) {
  fail(ErrorCode::ShapeMismatch, op + ": shape " + shape_str(a) + " " + why);
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      if (av == T(0)) continue;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const T* a = A + k * M;
    const T* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T av = a[i];
      if (av == T(0)) continue;
      T* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

template <typename T>
std::vector<T> transpose2d(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

inline Shape strip_leading_ones(Shape s) {
  while (!s.empty() && s.front() == 1) s.erase(s.begin());
  return s;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  std::vector<T> y(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return record<T>(x.shape(), std::move(y), {x}, [df](Node<T>& out) {
    Node<T>& a = *out.inputs[0];
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      a.grad[i] += out.grad[i] * df(a.value[i], out.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// a + b. `b` may broadcast when its shape (ignoring leading ones) is a suffix of a's.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) {
    std::vector<T> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
    return record<T>(a.shape(), std::move(y), {a, b}, [](Node<T>& out) {
      for (int k = 0; k < 2; ++k) {
        Node<T>& in = *out.inputs[k];
        if (!in.requires_grad) continue;
        for (std::size_t i = 0; i < out.grad.size(); ++i) in.grad[i] += out.grad[i];
      }
    });
  }
  if (b.numel() > a.numel()) return add(b, a);
  const Shape bs = detail::strip_leading_ones(b.shape());
  if (!detail::is_suffix(bs, a.shape())) detail::shape_error("add", a.shape(), b.shape());
  const std::size_t inner = b.numel();
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i % inner];
  return record<T>(a.shape(), std::move(y), {a, b}, [inner](Node<T>& out) {
    Node<T>& in_a = *out.inputs[0];
    Node<T>& in_b = *out.inputs[1];
    if (in_a.requires_grad)
      for (std::size_t i = 0; i < out.grad.size(); ++i) in_a.grad[i] += out.grad[i];
    if (in_b.requires_grad)
      for (std::size_t i = 0; i < out.grad.size(); ++i) in_b.grad[i % inner] += out.grad[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_error("sub", a.shape(), b.shape());
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  return record<T>(a.shape(), std::move(y), {a, b}, [](Node<T>& out) {
    Node<T>& x = *out.inputs[0];
    Node<T>& z = *out.inputs[1];
    if (x.requires_grad)
      for (std::size_t i = 0; i < out.grad.size(); ++i) x.grad[i] += out.grad[i];
    if (z.requires_grad)
      for (std::size_t i = 0; i < out.grad.size(); ++i) z.grad[i] -= out.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_error("mul", a.shape(), b.shape());
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  return record<T>(a.shape(), std::move(y), {a, b}, [](Node<T>& out) {
    Node<T>& x = *out.inputs[0];
    Node<T>& z = *out.inputs[1];
    if (x.requires_grad)
      for (std::size_t i = 0; i < out.grad.size(); ++i) x.grad[i] += out.grad[i] * z.value[i];
    if (z.requires_grad)
      for (std::size_t i = 0; i < out.grad.size(); ++i) z.grad[i] += out.grad[i] * x.value[i];
  });
}

/// x * s for a one-element tensor s.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) detail::shape_error("scale", s.shape(), "is not a single element");
  const T sv = s[0];
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * sv;
  return record<T>(x.shape(), std::move(y), {x, s}, [](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    Node<T>& sc = *out.inputs[1];
    if (in.requires_grad)
      for (std::size_t i = 0; i < out.grad.size(); ++i) in.grad[i] += out.grad[i] * sc.value[0];
    if (sc.requires_grad) {
      T acc = 0;
      for (std::size_t i = 0; i < out.grad.size(); ++i) acc += out.grad[i] * in.value[i];
      sc.grad[0] += acc;
    }
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> relu6(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::clamp(v, T(0), T(6)); },
      [](T v, T) { return (v > T(0) && v < T(6)) ? T(1) : T(0); });
}

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * v * v) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
        return cdf + v * pdf;
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return record<T>({}, {acc}, {x}, [](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    for (auto& g : in.grad) g += out.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) detail::shape_error("reshape", x.shape(), shape);
  std::vector<T> y(x.data().begin(), x.data().end());
  return record<T>(std::move(shape), std::move(y), {x}, [](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    for (std::size_t i = 0; i < out.grad.size(); ++i) in.grad[i] += out.grad[i];
  });
}

/// [a, b, c, d] -> [a, c, b, d]; splits and merges attention heads.
template <typename T>
Tensor<T> permute_0213(const Tensor<T>& x) {
  if (x.rank() != 4) detail::shape_error("permute_0213", x.shape(), "is not rank 4");
  const std::size_t A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
  std::vector<T> y(x.numel());
  auto src = x.data();
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        std::copy_n(&src[((a * B + b) * C + c) * D], D, &y[((a * C + c) * B + b) * D]);
  return record<T>({A, C, B, D}, std::move(y), {x}, [A, B, C, D](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const T* g = &out.grad[((a * C + c) * B + b) * D];
          T* dst = &in.grad[((a * B + b) * C + c) * D];
          for (std::size_t d = 0; d < D; ++d) dst[d] += g[d];
        }
  });
}

/// Drops `axis` by taking slice `index` along it.
template <typename T>
Tensor<T> select(const Tensor<T>& x, std::size_t axis, std::size_t index) {
  if (axis >= x.rank() || index >= x.dim(axis)) detail::shape_error("select", x.shape(), "has no such index");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> y(outer * inner);
  auto src = x.data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(&src[(o * n + index) * inner], inner, &y[o * inner]);
  return record<T>(std::move(shape), std::move(y), {x}, [outer, inner, n, index](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) in.grad[(o * n + index) * inner + i] += out.grad[o * inner + i];
  });
}

/// Tiles a tensor whose leading dim is 1 to a leading dim of `n`.
template <typename T>
Tensor<T> repeat_leading(const Tensor<T>& x, std::size_t n) {
  if (x.rank() == 0 || x.dim(0) != 1) detail::shape_error("repeat_leading", x.shape(), "must lead with 1");
  Shape shape = x.shape();
  shape[0] = n;
  const std::size_t block = x.numel();
  std::vector<T> y(n * block);
  for (std::size_t i = 0; i < n; ++i) std::copy(x.data().begin(), x.data().end(), y.begin() + i * block);
  return record<T>(std::move(shape), std::move(y), {x}, [n, block](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < block; ++j) in.grad[j] += out.grad[i * block + j];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorCode::ShapeMismatch, "concat of zero tensors");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) detail::shape_error("concat", ref, "has no axis " + std::to_string(axis));
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = ref;
    if (a.size() != b.size()) detail::shape_error("concat", a, b);
    a[axis] = b[axis] = 0;
    if (a != b) detail::shape_error("concat", p.shape(), ref);
    widths.push_back(p.dim(axis) * inner);
    total += p.dim(axis);
  }
  Shape shape = ref;
  shape[axis] = total;
  const std::size_t row = total * inner;
  std::vector<T> y(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(&src[o * widths[k]], widths[k], &y[o * row + offset]);
    offset += widths[k];
  }
  return record<T>(std::move(shape), std::move(y), parts, [widths, outer, row](Node<T>& out) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Node<T>& in = *out.inputs[k];
      if (in.requires_grad)
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < widths[k]; ++j) in.grad[o * widths[k] + j] += out.grad[o * row + off + j];
      off += widths[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched product over all leading dims: [..., m, k] x [..., k, n], or
/// [..., m, k] x [..., n, k]^T when `transpose_b`.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.rank() < 2 || a.rank() != b.rank()) detail::shape_error("bmm", a.shape(), b.shape());
  const std::size_t r = a.rank();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < r; ++i) {
    if (a.dim(i) != b.dim(i)) detail::shape_error("bmm", a.shape(), b.shape());
    batch *= a.dim(i);
  }
  const std::size_t M = a.dim(r - 2), K = a.dim(r - 1);
  const std::size_t N = transpose_b ? b.dim(r - 2) : b.dim(r - 1);
  if ((transpose_b ? b.dim(r - 1) : b.dim(r - 2)) != K) detail::shape_error("bmm", a.shape(), b.shape());
  Shape shape = a.shape();
  shape[r - 1] = N;
  std::vector<T> y(batch * M * N, T(0));
  for (std::size_t i = 0; i < batch; ++i) {
    const T* pa = a.data().data() + i * M * K;
    const T* pb = b.data().data() + i * K * N;
    if (transpose_b) {
      auto bt = detail::transpose2d(pb, N, K);
      detail::gemm_nn(M, N, K, pa, bt.data(), y.data() + i * M * N);
    } else {
      detail::gemm_nn(M, N, K, pa, pb, y.data() + i * M * N);
    }
  }
  return record<T>(std::move(shape), std::move(y), {a, b}, [batch, M, N, K, transpose_b](Node<T>& out) {
    Node<T>& na = *out.inputs[0];
    Node<T>& nb = *out.inputs[1];
    for (std::size_t i = 0; i < batch; ++i) {
      const T* g = out.grad.data() + i * M * N;
      const T* pa = na.value.data() + i * M * K;
      const T* pb = nb.value.data() + i * K * N;
      if (na.requires_grad) {
        // dA[M,K] = G[M,N] * B^T  (B^T is [N,K] when B is [K,N])
        if (transpose_b) {
          detail::gemm_nn(M, K, N, g, pb, na.grad.data() + i * M * K);
        } else {
          auto bt = detail::transpose2d(pb, K, N);
          detail::gemm_nn(M, K, N, g, bt.data(), na.grad.data() + i * M * K);
        }
      }
      if (nb.requires_grad) {
        if (transpose_b) {
          // dB[N,K] = G^T[N,M] * A[M,K]
          detail::gemm_tn(N, K, M, g, pa, nb.grad.data() + i * K * N);
        } else {
          // dB[K,N] = A^T[K,M] * G[M,N]
          detail::gemm_tn(K, N, M, pa, g, nb.grad.data() + i * K * N);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) detail::shape_error("matmul", a.shape(), b.shape());
  return bmm(a, b, false);
}

/// y = x W^T + b over the last dim of x. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || x.shape().back() != weight.dim(1))
    detail::shape_error("linear", x.shape(), weight.shape());
  const std::size_t in = weight.dim(1), outf = weight.dim(0), rows = x.numel() / in;
  if (bias.defined() && bias.numel() != outf) detail::shape_error("linear", weight.shape(), bias.shape());
  Shape shape = x.shape();
  shape.back() = outf;
  std::vector<T> y(rows * outf, T(0));
  if (bias.defined())
    for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), y.begin() + r * outf);
  auto wt = detail::transpose2d(weight.data().data(), outf, in);
  detail::gemm_nn(rows, outf, in, x.data().data(), wt.data(), y.data());
  auto backward = [rows, in, outf](Node<T>& out) {
    Node<T>& nx = *out.inputs[0];
    Node<T>& nw = *out.inputs[1];
    if (nx.requires_grad) detail::gemm_nn(rows, in, outf, out.grad.data(), nw.value.data(), nx.grad.data());
    if (nw.requires_grad) detail::gemm_tn(outf, in, rows, out.grad.data(), nx.value.data(), nw.grad.data());
    if (out.inputs.size() > 2 && out.inputs[2]->requires_grad) {
      Node<T>& nb = *out.inputs[2];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < outf; ++o) nb.grad[o] += out.grad[r * outf + o];
    }
  };
  if (bias.defined()) return record<T>(std::move(shape), std::move(y), {x, weight, bias}, backward);
  return record<T>(std::move(shape), std::move(y), {x, weight}, backward);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight) {
  return linear(x, weight, Tensor<T>());
}

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

namespace detail {

struct ConvGeom {
  std::size_t C, H, W, KH, KW, S, P, OH, OW;
  std::size_t rows() const { return C * KH * KW; }
  std::size_t cols() const { return OH * OW; }
  bool trivial() const { return KH == 1 && KW == 1 && S == 1 && P == 0; }
};

// col[(c, ky, kx), (oy, ox)] = x[c, oy*S + ky - P, ox*S + kx - P], zero outside.
template <typename T>
void im2col(const ConvGeom& g, const T* x, T* col) {
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ky = 0; ky < g.KH; ++ky)
      for (std::size_t kx = 0; kx < g.KW; ++kx) {
        T* dst = col + ((c * g.KH + ky) * g.KW + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.OH; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.S + ky) - static_cast<std::ptrdiff_t>(g.P);
          T* d = dst + oy * g.OW;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.H)) {
            std::fill(d, d + g.OW, T(0));
            continue;
          }
          const T* src = x + (c * g.H + static_cast<std::size_t>(iy)) * g.W;
          for (std::size_t ox = 0; ox < g.OW; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.S + kx) - static_cast<std::ptrdiff_t>(g.P);
            d[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.W)) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void col2im_add(const ConvGeom& g, const T* col, T* x) {
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ky = 0; ky < g.KH; ++ky)
      for (std::size_t kx = 0; kx < g.KW; ++kx) {
        const T* src = col + ((c * g.KH + ky) * g.KW + kx) * g.cols();
        for (std::size_t oy = 0; oy < g.OH; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.S + ky) - static_cast<std::ptrdiff_t>(g.P);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.H)) continue;
          T* dst = x + (c * g.H + static_cast<std::size_t>(iy)) * g.W;
          const T* s = src + oy * g.OW;
          for (std::size_t ox = 0; ox < g.OW; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.S + kx) - static_cast<std::ptrdiff_t>(g.P);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.W)) dst[ix] += s[ox];
          }
        }
      }
}

// Dense (groups == 1) convolution lowered to matrix products per sample.
template <typename T>
Tensor<T> conv2d_dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const ConvGeom& g) {
  const std::size_t N = x.dim(0), O = weight.dim(0);
  const std::size_t R = g.rows(), L = g.cols();
  std::vector<T> y(N * O * L, T(0));
  std::vector<T> col(g.trivial() ? 0 : R * L);
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.data().data() + n * g.C * g.H * g.W;
    T* yn = y.data() + n * O * L;
    if (bias.defined())
      for (std::size_t o = 0; o < O; ++o) std::fill(yn + o * L, yn + (o + 1) * L, bias[o]);
    const T* cn = xn;
    if (!g.trivial()) {
      im2col(g, xn, col.data());
      cn = col.data();
    }
    gemm_nn(O, L, R, weight.data().data(), cn, yn);
  }

  auto backward = [=](Node<T>& out) {
    Node<T>& nx = *out.inputs[0];
    Node<T>& nw = *out.inputs[1];
    Node<T>* nb = out.inputs.size() > 2 ? out.inputs[2].get() : nullptr;
    std::vector<T> cbuf(g.trivial() ? 0 : R * L), gcol(g.trivial() ? 0 : R * L);
    for (std::size_t n = 0; n < N; ++n) {
      const T* go = out.grad.data() + n * O * L;
      if (nb && nb->requires_grad)
        for (std::size_t o = 0; o < O; ++o) {
          T acc = 0;
          for (std::size_t i = 0; i < L; ++i) acc += go[o * L + i];
          nb->grad[o] += acc;
        }
      const T* xn = nx.value.data() + n * g.C * g.H * g.W;
      if (nw.requires_grad) {
        const T* cn = xn;
        if (!g.trivial()) {
          im2col(g, xn, cbuf.data());
          cn = cbuf.data();
        }
        std::vector<T> colT = transpose2d(cn, R, L);
        gemm_nn(O, R, L, go, colT.data(), nw.grad.data());
      }
      if (nx.requires_grad) {
        T* gx = nx.grad.data() + n * g.C * g.H * g.W;
        if (g.trivial()) {
          gemm_tn(R, L, O, nw.value.data(), go, gx);
        } else {
          std::fill(gcol.begin(), gcol.end(), T(0));
          gemm_tn(R, L, O, nw.value.data(), go, gcol.data());
          col2im_add(g, gcol.data(), gx);
        }
      }
    }
  };
  Shape shape{N, O, g.OH, g.OW};
  if (bias.defined()) return record<T>(std::move(shape), std::move(y), {x, weight, bias}, backward);
  return record<T>(std::move(shape), std::move(y), {x, weight}, backward);
}

}  // namespace detail

/// NCHW convolution with weight [out, in/groups, kh, kw]. `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt = {}) {
  if (x.rank() != 4 || weight.rank() != 4) detail::shape_error("conv2d", x.shape(), weight.shape());
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = weight.dim(0), Cg = weight.dim(1), KH = weight.dim(2), KW = weight.dim(3);
  const std::size_t G = opt.groups, S = opt.stride, P = opt.padding;
  if (G == 0 || S == 0 || C % G != 0 || O % G != 0 || Cg != C / G) detail::shape_error("conv2d", x.shape(), weight.shape());
  if (H + 2 * P < KH || W + 2 * P < KW) detail::shape_error("conv2d", x.shape(), "is smaller than the kernel");
  if (bias.defined() && bias.numel() != O) detail::shape_error("conv2d", weight.shape(), bias.shape());
  const std::size_t OH = (H + 2 * P - KH) / S + 1, OW = (W + 2 * P - KW) / S + 1;
  if (G == 1) return detail::conv2d_dense(x, weight, bias, detail::ConvGeom{C, H, W, KH, KW, S, P, OH, OW});
  const std::size_t Og = O / G;

  // Valid output column range [lo, hi) for kernel column kx.
  std::vector<std::size_t> ox_lo(KW), ox_hi(KW);
  for (std::size_t kx = 0; kx < KW; ++kx) {
    std::size_t lo = 0;
    while (lo < OW && lo * S + kx < P) ++lo;
    std::size_t hi = lo;
    while (hi < OW && hi * S + kx - P < W) ++hi;
    ox_lo[kx] = lo;
    ox_hi[kx] = hi;
  }

  std::vector<T> y(N * O * OH * OW, T(0));
  const T* xin = x.data().data();
  const T* w = weight.data().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      T* yo = y.data() + (n * O + o) * OH * OW;
      if (bias.defined()) std::fill(yo, yo + OH * OW, bias[o]);
      const std::size_t g = o / Og;
      for (std::size_t ci = 0; ci < Cg; ++ci) {
        const T* xc = xin + (n * C + g * Cg + ci) * H * W;
        const T* wk = w + (o * Cg + ci) * KH * KW;
        for (std::size_t ky = 0; ky < KH; ++ky)
          for (std::size_t oy = 0; oy < OH; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * S + ky) - static_cast<std::ptrdiff_t>(P);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            const T* xrow = xc + static_cast<std::size_t>(iy) * W;
            T* yrow = yo + oy * OW;
            for (std::size_t kx = 0; kx < KW; ++kx) {
              const T wv = wk[ky * KW + kx];
              const std::size_t lo = ox_lo[kx], hi = ox_hi[kx];
              if (S == 1) {
                for (std::size_t ox = lo; ox < hi; ++ox) yrow[ox] += wv * xrow[ox + kx - P];
              } else {
                for (std::size_t ox = lo; ox < hi; ++ox) yrow[ox] += wv * xrow[ox * S + kx - P];
              }
            }
          }
      }
    }

  auto backward = [=](Node<T>& out) {
    Node<T>& nx = *out.inputs[0];
    Node<T>& nw = *out.inputs[1];
    const T* xv = nx.value.data();
    const T* wv_all = nw.value.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o) {
        const T* go = out.grad.data() + (n * O + o) * OH * OW;
        const std::size_t g = o / Og;
        if (out.inputs.size() > 2 && out.inputs[2]->requires_grad) {
          T acc = 0;
          for (std::size_t i = 0; i < OH * OW; ++i) acc += go[i];
          out.inputs[2]->grad[o] += acc;
        }
        for (std::size_t ci = 0; ci < Cg; ++ci) {
          const std::size_t cidx = (n * C + g * Cg + ci) * H * W;
          const T* xc = xv + cidx;
          const std::size_t widx = (o * Cg + ci) * KH * KW;
          for (std::size_t ky = 0; ky < KH; ++ky)
            for (std::size_t oy = 0; oy < OH; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * S + ky) - static_cast<std::ptrdiff_t>(P);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              const T* grow = go + oy * OW;
              const std::size_t roff = static_cast<std::size_t>(iy) * W;
              for (std::size_t kx = 0; kx < KW; ++kx) {
                const std::size_t lo = ox_lo[kx], hi = ox_hi[kx];
                if (nx.requires_grad) {
                  const T wv = wv_all[widx + ky * KW + kx];
                  T* gx = nx.grad.data() + cidx + roff;
                  if (S == 1) {
                    for (std::size_t ox = lo; ox < hi; ++ox) gx[ox + kx - P] += wv * grow[ox];
                  } else {
                    for (std::size_t ox = lo; ox < hi; ++ox) gx[ox * S + kx - P] += wv * grow[ox];
                  }
                }
                if (nw.requires_grad) {
                  const T* xrow = xc + roff;
                  T acc = 0;
                  for (std::size_t ox = lo; ox < hi; ++ox) acc += grow[ox] * xrow[ox * S + kx - P];
                  nw.grad[widx + ky * KW + kx] += acc;
                }
              }
            }
        }
      }
  };
  Shape shape{N, O, OH, OW};
  if (bias.defined()) return record<T>(std::move(shape), std::move(y), {x, weight, bias}, backward);
  return record<T>(std::move(shape), std::move(y), {x, weight}, backward);
}

/// [N, C, H, W] -> [N, (H/p)(W/p), C*p*p], patches in row-major order and each
/// patch flattened as (c, py, px), matching a stride-p convolution's weight layout.
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t p) {
  if (x.rank() != 4 || p == 0 || x.dim(2) % p != 0 || x.dim(3) % p != 0)
    detail::shape_error("patchify", x.shape(), "is not divisible into patches of " + std::to_string(p));
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t gh = H / p, gw = W / p, plen = C * p * p;
  std::vector<std::size_t> index(x.numel());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t by = 0; by < gh; ++by)
      for (std::size_t bx = 0; bx < gw; ++bx)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t py = 0; py < p; ++py)
            for (std::size_t px = 0; px < p; ++px) {
              const std::size_t dst = ((n * gh + by) * gw + bx) * plen + (c * p + py) * p + px;
              index[dst] = ((n * C + c) * H + by * p + py) * W + bx * p + px;
            }
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[index[i]];
  return record<T>({N, gh * gw, plen}, std::move(y), {x}, [index = std::move(index)](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    for (std::size_t i = 0; i < index.size(); ++i) in.grad[index[i]] += out.grad[i];
  });
}

/// [N, C, H, W] -> [N, C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) detail::shape_error("global_avg_pool", x.shape(), "is not NCHW");
  const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<T> y(NC);
  for (std::size_t i = 0; i < NC; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < HW; ++j) acc += x[i * HW + j];
    y[i] = acc / static_cast<T>(HW);
  }
  return record<T>({x.dim(0), x.dim(1)}, std::move(y), {x}, [NC, HW](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    const T inv = T(1) / static_cast<T>(HW);
    for (std::size_t i = 0; i < NC; ++i)
      for (std::size_t j = 0; j < HW; ++j) in.grad[i * HW + j] += out.grad[i] * inv;
  });
}

// ---------------------------------------------------------------------------
// Normalisation and probabilities

/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) detail::shape_error("softmax", x.shape(), "has no axis");
  const std::size_t C = x.shape().back(), rows = x.numel() / C;
  std::vector<T> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * C;
    T* out = y.data() + r * C;
    const T mx = *std::max_element(in, in + C);
    T total = 0;
    for (std::size_t c = 0; c < C; ++c) total += (out[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < C; ++c) out[c] /= total;
  }
  return record<T>(x.shape(), std::move(y), {x}, [rows, C](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yv = out.value.data() + r * C;
      const T* g = out.grad.data() + r * C;
      T dot = 0;
      for (std::size_t c = 0; c < C; ++c) dot += g[c] * yv[c];
      for (std::size_t c = 0; c < C; ++c) in.grad[r * C + c] += yv[c] * (g[c] - dot);
    }
  });
}

/// Mean categorical cross-entropy of logits [B, C] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    detail::shape_error("cross_entropy", logits.shape(), "does not match " + std::to_string(labels.size()) + " labels");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  std::vector<T> prob(B * C);
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.data().data() + b * C;
    const T mx = *std::max_element(z, z + C);
    T total = 0;
    for (std::size_t c = 0; c < C; ++c) total += (prob[b * C + c] = std::exp(z[c] - mx));
    for (std::size_t c = 0; c < C; ++c) prob[b * C + c] /= total;
    const auto y = static_cast<std::size_t>(labels[b]);
    if (y >= C) fail(ErrorCode::ShapeMismatch, "label " + std::to_string(y) + " out of range for " + std::to_string(C) + " classes");
    loss += std::log(total) + mx - z[y];
  }
  loss /= static_cast<T>(B);
  std::vector<int> lab(labels.begin(), labels.end());
  return record<T>({}, {loss}, {logits}, [prob = std::move(prob), lab = std::move(lab), B, C](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    const T s = out.grad[0] / static_cast<T>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T onehot = static_cast<std::size_t>(lab[b]) == c ? T(1) : T(0);
        in.grad[b * C + c] += s * (prob[b * C + c] - onehot);
      }
  });
}

/// Mean negative log-likelihood of probability rows [B, C].
template <typename T>
Tensor<T> nll_from_probs(const Tensor<T>& probs, std::span<const int> labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size())
    detail::shape_error("nll_from_probs", probs.shape(), "does not match " + std::to_string(labels.size()) + " labels");
  const std::size_t B = probs.dim(0), C = probs.dim(1);
  static constexpr T floor = std::numeric_limits<T>::min();
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto y = static_cast<std::size_t>(labels[b]);
    if (y >= C) fail(ErrorCode::ShapeMismatch, "label out of range");
    loss -= std::log(std::max(probs[b * C + y], floor));
  }
  loss /= static_cast<T>(B);
  std::vector<int> lab(labels.begin(), labels.end());
  return record<T>({}, {loss}, {probs}, [lab = std::move(lab), B, C](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t i = b * C + static_cast<std::size_t>(lab[b]);
      in.grad[i] -= out.grad[0] / (static_cast<T>(B) * std::max(in.value[i], floor));
    }
  });
}

/// Layer normalisation over the last axis; `gamma`/`beta` may be undefined.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() == 0) detail::shape_error("layer_norm", x.shape(), "has no axis");
  const std::size_t D = x.shape().back(), rows = x.numel() / D;
  if ((gamma.defined() && gamma.numel() != D) || (beta.defined() && beta.numel() != D))
    detail::shape_error("layer_norm", x.shape(), "does not match the affine parameters");
  std::vector<T> xhat(x.numel()), inv_std(rows), y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * D;
    T mu = 0;
    for (std::size_t d = 0; d < D; ++d) mu += in[d];
    mu /= static_cast<T>(D);
    T var = 0;
    for (std::size_t d = 0; d < D; ++d) var += (in[d] - mu) * (in[d] - mu);
    var /= static_cast<T>(D);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t d = 0; d < D; ++d) {
      const T h = (in[d] - mu) * inv_std[r];
      xhat[r * D + d] = h;
      y[r * D + d] = (gamma.defined() ? gamma[d] : T(1)) * h + (beta.defined() ? beta[d] : T(0));
    }
  }
  const bool has_gamma = gamma.defined(), has_beta = beta.defined();
  auto backward = [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, D, has_gamma, has_beta](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    Node<T>* ng = has_gamma ? out.inputs[1].get() : nullptr;
    Node<T>* nb = has_beta ? out.inputs[has_gamma ? 2 : 1].get() : nullptr;
    std::vector<T> dxhat(D);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = out.grad.data() + r * D;
      const T* h = xhat.data() + r * D;
      T sum_d = 0, sum_dh = 0;
      for (std::size_t d = 0; d < D; ++d) {
        dxhat[d] = g[d] * (ng ? ng->value[d] : T(1));
        sum_d += dxhat[d];
        sum_dh += dxhat[d] * h[d];
        if (ng && ng->requires_grad) ng->grad[d] += g[d] * h[d];
        if (nb && nb->requires_grad) nb->grad[d] += g[d];
      }
      if (in.requires_grad) {
        const T invD = T(1) / static_cast<T>(D);
        for (std::size_t d = 0; d < D; ++d)
          in.grad[r * D + d] += inv_std[r] * (dxhat[d] - invD * sum_d - h[d] * invD * sum_dh);
      }
    }
  };
  std::vector<Tensor<T>> inputs{x};
  if (has_gamma) inputs.push_back(gamma);
  if (has_beta) inputs.push_back(beta);
  return record<T>(x.shape(), std::move(y), inputs, std::move(backward));
}

/// Batch normalisation over NCHW. In training mode batch statistics are used and
/// the running buffers are updated in place; otherwise the running buffers are used.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T> running_mean,
                       Tensor<T> running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() != 4) detail::shape_error("batch_norm2d", x.shape(), "is not NCHW");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C)
    detail::shape_error("batch_norm2d", x.shape(), "does not match the channel parameters");
  const std::size_t count = N * HW;
  std::vector<T> xhat(x.numel()), inv_std(C), y(x.numel());
  for (std::size_t c = 0; c < C; ++c) {
    T mu, var;
    if (training) {
      mu = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) mu += x[(n * C + c) * HW + i];
      mu /= static_cast<T>(count);
      var = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          const T d = x[(n * C + c) * HW + i] - mu;
          var += d * d;
        }
      var /= static_cast<T>(count);
      const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
      running_mean.data()[c] = (T(1) - momentum) * running_mean[c] + momentum * mu;
      running_var.data()[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
    } else {
      mu = running_mean[c];
      var = running_var[c];
    }
    inv_std[c] = T(1) / std::sqrt(var + eps);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t k = (n * C + c) * HW + i;
        xhat[k] = (x[k] - mu) * inv_std[c];
        y[k] = gamma[c] * xhat[k] + beta[c];
      }
  }
  auto backward = [xhat = std::move(xhat), inv_std = std::move(inv_std), N, C, HW, count, training](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    Node<T>& ng = *out.inputs[1];
    Node<T>& nb = *out.inputs[2];
    for (std::size_t c = 0; c < C; ++c) {
      T sum_g = 0, sum_gh = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t k = (n * C + c) * HW + i;
          sum_g += out.grad[k];
          sum_gh += out.grad[k] * xhat[k];
        }
      if (ng.requires_grad) ng.grad[c] += sum_gh;
      if (nb.requires_grad) nb.grad[c] += sum_g;
      if (!in.requires_grad) continue;
      const T gamma_c = ng.value[c];
      const T scale_c = gamma_c * inv_std[c];
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t k = (n * C + c) * HW + i;
          if (training) {
            const T m = static_cast<T>(count);
            in.grad[k] += scale_c * (out.grad[k] - sum_g / m - xhat[k] * sum_gh / m);
          } else {
            in.grad[k] += scale_c * out.grad[k];
          }
        }
    }
  };
  return record<T>(x.shape(), std::move(y), {x, gamma, beta}, std::move(backward));
}

/// Inverted dropout. The keep mask for element i is drawn from (key, i), so a
/// caller that advances `key` per call gets reproducible, independent masks.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::uint64_t key) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) return mul_scalar(x, T(0));
  const T keep_scale = T(1) / static_cast<T>(1.0 - p);
  std::vector<T> mask(x.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = CounterRng::uniform_at(key, i) >= p ? keep_scale : T(0);
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * mask[i];
  return record<T>(x.shape(), std::move(y), {x}, [mask = std::move(mask)](Node<T>& out) {
    Node<T>& in = *out.inputs[0];
    for (std::size_t i = 0; i < mask.size(); ++i) in.grad[i] += out.grad[i] * mask[i];
  });
}

}  // namespace dualstream
