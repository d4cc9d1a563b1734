#pragma once

// Forward kernels and their reverse-mode gradients. Everything is templated
// on the scalar type: models run float32, gradient checking runs float64.
//
// Layout conventions: sequence tensors are channels-last (B, L, C); attention
// tensors are (B, H, L, Dh). All loops write each output element exactly once
// so results do not depend on scheduling.

#include <cmath>
#include <limits>

#include "msm/tensor.hpp"

namespace msm {

/// Integer id array carried alongside float tensors (token indices, targets).
struct IntArray {
  Shape shape;
  std::vector<int32_t> v;

  IntArray() = default;
  IntArray(Shape s, std::vector<int32_t> vals) : shape(std::move(s)), v(std::move(vals)) {
    require(shape_numel(shape) == static_cast<int64_t>(v.size()), "IntArray shape mismatch");
  }
  int64_t numel() const { return static_cast<int64_t>(v.size()); }
};

namespace kern {

/// C = A(M,K) * B(K,N), row-major, no transposes. The i-k-j order keeps the
/// inner loop a contiguous axpy, which vectorizes without fast-math.
template <typename T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<size_t>(i) * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    const T* arow = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void transpose(int rows, int cols, const T* src, T* dst) {
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) dst[static_cast<size_t>(j) * rows + i] = src[static_cast<size_t>(i) * cols + j];
}

}  // namespace kern

// ---------------------------------------------------------------------------
// elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = TensorT<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  attach_backward(out, {a, b}, [a, b](detail::Node<T>& o) mutable {
    if (a.requires_grad()) {
      auto& g = a.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.g[i];
    }
    if (b.requires_grad()) {
      auto& g = b.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.g[i];
    }
  });
  return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = TensorT<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  attach_backward(out, {a, b}, [a, b](detail::Node<T>& o) mutable {
    if (a.requires_grad()) {
      auto& g = a.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.g[i];
    }
    if (b.requires_grad()) {
      auto& g = b.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= o.g[i];
    }
  });
  return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = TensorT<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  attach_backward(out, {a, b}, [a, b](detail::Node<T>& o) mutable {
    if (a.requires_grad()) {
      auto& g = a.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.g[i] * b.data()[static_cast<int64_t>(i)];
    }
    if (b.requires_grad()) {
      auto& g = b.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.g[i] * a.data()[static_cast<int64_t>(i)];
    }
  });
  return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
  auto out = TensorT<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
  attach_backward(out, {a}, [a, s](detail::Node<T>& o) mutable {
    auto& g = a.grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o.g[i] * s;
  });
  return out;
}

/// x (..., C) + bias (C), broadcast over leading dims.
template <typename T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& bias) {
  const int c = x.dim(x.ndim() - 1);
  require(bias.ndim() == 1 && bias.dim(0) == c, "add_bias: bias shape mismatch");
  auto out = TensorT<T>::zeros(x.shape());
  const int64_t rows = x.numel() / c;
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < c; ++j) out.data()[r * c + j] = x.data()[r * c + j] + bias.data()[j];
  attach_backward(out, {x, bias}, [x, bias, rows, c](detail::Node<T>& o) mutable {
    if (x.requires_grad()) {
      auto& g = x.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.g[i];
    }
    if (bias.requires_grad()) {
      auto& g = bias.grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) g[static_cast<size_t>(j)] += o.g[static_cast<size_t>(r * c + j)];
    }
  });
  return out;
}

/// Broadcast add for 4-D tensors; every dim of `m` is either 1 or matches `x`.
/// Used to apply additive attention masks.
template <typename T>
TensorT<T> add_broadcast4(const TensorT<T>& x, const TensorT<T>& m) {
  require(x.ndim() == 4 && m.ndim() == 4, "add_broadcast4: expects 4-D tensors");
  for (int i = 0; i < 4; ++i)
    require(m.dim(i) == 1 || m.dim(i) == x.dim(i), "add_broadcast4: dim " + std::to_string(i) + " not broadcastable");
  auto out = TensorT<T>::zeros(x.shape());
  const int d0 = x.dim(0), d1 = x.dim(1), d2 = x.dim(2), d3 = x.dim(3);
  const int m0 = m.dim(0), m1 = m.dim(1), m2 = m.dim(2), m3 = m.dim(3);
  auto midx = [&](int i0, int i1, int i2, int i3) -> size_t {
    return ((static_cast<size_t>(i0 % m0) * m1 + (i1 % m1)) * m2 + (i2 % m2)) * m3 + (i3 % m3);
  };
  size_t p = 0;
  for (int i0 = 0; i0 < d0; ++i0)
    for (int i1 = 0; i1 < d1; ++i1)
      for (int i2 = 0; i2 < d2; ++i2)
        for (int i3 = 0; i3 < d3; ++i3, ++p)
          out.data()[p] = x.data()[p] + m.data()[midx(i0, i1, i2, i3)];
  attach_backward(out, {x, m}, [x, m, d0, d1, d2, d3, midx](detail::Node<T>& o) mutable {
    if (x.requires_grad()) {
      auto& g = x.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.g[i];
    }
    if (m.requires_grad()) {
      auto& g = m.grad();
      size_t p = 0;
      for (int i0 = 0; i0 < d0; ++i0)
        for (int i1 = 0; i1 < d1; ++i1)
          for (int i2 = 0; i2 < d2; ++i2)
            for (int i3 = 0; i3 < d3; ++i3, ++p) g[midx(i0, i1, i2, i3)] += o.g[p];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto out = TensorT<T>::from(std::move(shape), x.values());
  attach_backward(out, {x}, [x](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o.g[i];
  });
  return out;
}

/// Swap the last two dims of a 2-D..4-D tensor.
template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& x) {
  require(x.ndim() >= 2, "transpose_last2: needs >= 2 dims");
  Shape s = x.shape();
  const int rows = s[s.size() - 2], cols = s[s.size() - 1];
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  auto out = TensorT<T>::zeros(s);
  const int64_t batch = x.numel() / (static_cast<int64_t>(rows) * cols);
  for (int64_t b = 0; b < batch; ++b)
    kern::transpose(rows, cols, x.data() + b * rows * cols, out.data() + b * rows * cols);
  attach_backward(out, {x}, [x, rows, cols, batch](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    for (int64_t b = 0; b < batch; ++b) {
      const T* og = o.g.data() + b * rows * cols;
      T* xg = g.data() + b * rows * cols;
      for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) xg[static_cast<size_t>(i) * cols + j] += og[static_cast<size_t>(j) * rows + i];
    }
  });
  return out;
}

/// (A, B, C, D) -> (A, C, B, D); packs (B, L, H, Dh) into (B, H, L, Dh) and
/// back (it is an involution).
template <typename T>
TensorT<T> swap_dims12(const TensorT<T>& x) {
  require(x.ndim() == 4, "swap_dims12: expects a 4-D tensor");
  const int d0 = x.dim(0), d1 = x.dim(1), d2 = x.dim(2), d3 = x.dim(3);
  auto out = TensorT<T>::zeros({d0, d2, d1, d3});
  for (int a = 0; a < d0; ++a)
    for (int i = 0; i < d1; ++i)
      for (int j = 0; j < d2; ++j) {
        const T* src = x.data() + ((static_cast<size_t>(a) * d1 + i) * d2 + j) * d3;
        T* dst = out.data() + ((static_cast<size_t>(a) * d2 + j) * d1 + i) * d3;
        std::copy(src, src + d3, dst);
      }
  attach_backward(out, {x}, [x, d0, d1, d2, d3](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    for (int a = 0; a < d0; ++a)
      for (int i = 0; i < d1; ++i)
        for (int j = 0; j < d2; ++j) {
          const T* src = o.g.data() + ((static_cast<size_t>(a) * d2 + j) * d1 + i) * d3;
          T* dst = g.data() + ((static_cast<size_t>(a) * d1 + i) * d2 + j) * d3;
          for (int t = 0; t < d3; ++t) dst[t] += src[t];
        }
  });
  return out;
}

/// Concatenate (B, L_i, C) tensors along dim 1.
template <typename T>
TensorT<T> concat_dim1(const std::vector<TensorT<T>>& parts) {
  require(!parts.empty(), "concat_dim1: empty input");
  const int b = parts[0].dim(0), c = parts[0].dim(2);
  int total = 0;
  for (const auto& p : parts) {
    require(p.ndim() == 3 && p.dim(0) == b && p.dim(2) == c, "concat_dim1: incompatible part shape");
    total += p.dim(1);
  }
  auto out = TensorT<T>::zeros({b, total, c});
  int off = 0;
  for (const auto& p : parts) {
    const int l = p.dim(1);
    for (int bi = 0; bi < b; ++bi)
      std::copy(p.data() + static_cast<size_t>(bi) * l * c, p.data() + (static_cast<size_t>(bi) + 1) * l * c,
                out.data() + (static_cast<size_t>(bi) * total + off) * c);
    off += l;
  }
  std::vector<TensorT<T>> parents = parts;
  attach_backward(out, parents, [parts, b, c, total](detail::Node<T>& o) mutable {
    int off = 0;
    for (auto& p : parts) {
      const int l = p.dim(1);
      if (p.requires_grad()) {
        auto& g = p.grad();
        for (int bi = 0; bi < b; ++bi) {
          const T* src = o.g.data() + (static_cast<size_t>(bi) * total + off) * c;
          T* dst = g.data() + static_cast<size_t>(bi) * l * c;
          for (int64_t i = 0; i < static_cast<int64_t>(l) * c; ++i) dst[i] += src[i];
        }
      }
      off += l;
    }
  });
  return out;
}

/// x (B, L, C) -> rows [l0, l1) along dim 1.
template <typename T>
TensorT<T> slice_dim1(const TensorT<T>& x, int l0, int l1) {
  require(x.ndim() == 3 && 0 <= l0 && l0 < l1 && l1 <= x.dim(1), "slice_dim1: bad range");
  const int b = x.dim(0), l = x.dim(1), c = x.dim(2), m = l1 - l0;
  auto out = TensorT<T>::zeros({b, m, c});
  for (int bi = 0; bi < b; ++bi)
    std::copy(x.data() + (static_cast<size_t>(bi) * l + l0) * c, x.data() + (static_cast<size_t>(bi) * l + l1) * c,
              out.data() + static_cast<size_t>(bi) * m * c);
  attach_backward(out, {x}, [x, b, l, c, l0, m](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    for (int bi = 0; bi < b; ++bi) {
      const T* src = o.g.data() + static_cast<size_t>(bi) * m * c;
      T* dst = g.data() + (static_cast<size_t>(bi) * l + l0) * c;
      for (int64_t i = 0; i < static_cast<int64_t>(m) * c; ++i) dst[i] += src[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
          "matmul: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + " do not conform");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = TensorT<T>::zeros({m, n});
  kern::gemm_nn(m, n, k, a.data(), b.data(), out.data(), false);
  attach_backward(out, {a, b}, [a, b, m, k, n](detail::Node<T>& o) mutable {
    if (a.requires_grad()) {
      // dA = dC * B^T
      std::vector<T> bt(static_cast<size_t>(n) * k);
      kern::transpose(k, n, b.data(), bt.data());
      kern::gemm_nn(m, k, n, o.g.data(), bt.data(), a.grad().data(), true);
    }
    if (b.requires_grad()) {
      // dB = A^T * dC
      std::vector<T> at(static_cast<size_t>(k) * m);
      kern::transpose(m, k, a.data(), at.data());
      kern::gemm_nn(k, n, m, at.data(), o.g.data(), b.grad().data(), true);
    }
  });
  return out;
}

/// Batched matmul over the leading dim: (G, M, K) x (G, K, N) -> (G, M, N).
template <typename T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
          "bmm: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + " do not conform");
  const int g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  auto out = TensorT<T>::zeros({g, m, n});
  for (int i = 0; i < g; ++i)
    kern::gemm_nn(m, n, k, a.data() + static_cast<size_t>(i) * m * k, b.data() + static_cast<size_t>(i) * k * n,
                  out.data() + static_cast<size_t>(i) * m * n, false);
  attach_backward(out, {a, b}, [a, b, g, m, k, n](detail::Node<T>& o) mutable {
    std::vector<T> scratch;
    if (a.requires_grad()) {
      scratch.resize(static_cast<size_t>(n) * k);
      for (int i = 0; i < g; ++i) {
        kern::transpose(k, n, b.data() + static_cast<size_t>(i) * k * n, scratch.data());
        kern::gemm_nn(m, k, n, o.g.data() + static_cast<size_t>(i) * m * n, scratch.data(),
                      a.grad().data() + static_cast<size_t>(i) * m * k, true);
      }
    }
    if (b.requires_grad()) {
      scratch.resize(static_cast<size_t>(k) * m);
      for (int i = 0; i < g; ++i) {
        kern::transpose(m, k, a.data() + static_cast<size_t>(i) * m * k, scratch.data());
        kern::gemm_nn(k, n, m, scratch.data(), o.g.data() + static_cast<size_t>(i) * m * n,
                      b.grad().data() + static_cast<size_t>(i) * k * n, true);
      }
    }
  });
  return out;
}

/// x (..., D) * w (D, O) — leading dims folded into rows.
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w) {
  require(w.ndim() == 2 && x.dim(x.ndim() - 1) == w.dim(0),
          "linear: input dim " + std::to_string(x.dim(x.ndim() - 1)) + " vs weight " + shape_str(w.shape()));
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  const int rows = static_cast<int>(x.numel() / w.dim(0));
  auto x2 = reshape(x, {rows, w.dim(0)});
  auto y2 = matmul(x2, w);
  return reshape(y2, std::move(out_shape));
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
  return add_bias(linear(x, w), bias);
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> silu(const TensorT<T>& x) {
  auto out = TensorT<T>::zeros(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    const T v = x.data()[i];
    out.data()[i] = v / (T(1) + std::exp(-v));
  }
  attach_backward(out, {x}, [x](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    for (size_t i = 0; i < g.size(); ++i) {
      const T v = x.data()[static_cast<int64_t>(i)];
      const T s = T(1) / (T(1) + std::exp(-v));
      g[i] += o.g[i] * s * (T(1) + v * (T(1) - s));
    }
  });
  return out;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  auto out = TensorT<T>::zeros(x.shape());
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  attach_backward(out, {x}, [x](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    for (size_t i = 0; i < g.size(); ++i)
      if (x.data()[static_cast<int64_t>(i)] > T(0)) g[i] += o.g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// softmax / losses
// ---------------------------------------------------------------------------

/// Softmax over the last dim. Rows whose max is -inf (fully masked) produce
/// all-zero outputs instead of NaN.
template <typename T>
TensorT<T> softmax_last(const TensorT<T>& x) {
  const int c = x.dim(x.ndim() - 1);
  const int64_t rows = x.numel() / c;
  auto out = TensorT<T>::zeros(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * c;
    T* yr = out.data() + r * c;
    T mx = xr[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    if (!(mx > -std::numeric_limits<T>::infinity())) continue;  // fully masked row
    T sum = T(0);
    for (int j = 0; j < c; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < c; ++j) yr[j] *= inv;
  }
  attach_backward(out, {x}, [x, rows, c](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = o.v.data() + r * c;
      const T* dy = o.g.data() + r * c;
      T dot = T(0);
      for (int j = 0; j < c; ++j) dot += y[j] * dy[j];
      T* gr = g.data() + r * c;
      for (int j = 0; j < c; ++j) gr[j] += y[j] * (dy[j] - dot);
    }
  });
  return out;
}

/// Mean cross-entropy over rows of (N, V) logits against integer targets.
template <typename T>
TensorT<T> cross_entropy_mean(const TensorT<T>& logits, const IntArray& targets) {
  require(logits.ndim() == 2, "cross_entropy: logits must be (N, V)");
  const int n = logits.dim(0), v = logits.dim(1);
  require(targets.numel() == n, "cross_entropy: target count " + std::to_string(targets.numel()) +
                                    " vs rows " + std::to_string(n));
  for (int i = 0; i < n; ++i)
    require(targets.v[static_cast<size_t>(i)] >= 0 && targets.v[static_cast<size_t>(i)] < v,
            "cross_entropy: target out of range at row " + std::to_string(i));
  auto out = TensorT<T>::zeros({1});
  // cache softmax for the backward pass
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(n) * v);
  T total = T(0);
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data() + static_cast<size_t>(i) * v;
    T mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    T* pr = probs->data() + static_cast<size_t>(i) * v;
    for (int j = 0; j < v; ++j) {
      pr[j] = std::exp(row[j] - mx);
      sum += pr[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < v; ++j) pr[j] *= inv;
    total += std::log(sum) + mx - row[targets.v[static_cast<size_t>(i)]];
  }
  out.data()[0] = total / static_cast<T>(n);
  IntArray tg = targets;
  attach_backward(out, {logits}, [logits, probs, tg, n, v](detail::Node<T>& o) mutable {
    auto& g = logits.grad();
    const T go = o.g[0] / static_cast<T>(n);
    for (int i = 0; i < n; ++i) {
      const T* pr = probs->data() + static_cast<size_t>(i) * v;
      T* gr = g.data() + static_cast<size_t>(i) * v;
      for (int j = 0; j < v; ++j) gr[j] += go * pr[j];
      gr[tg.v[static_cast<size_t>(i)]] -= go;
    }
  });
  return out;
}

/// Mean absolute error over all elements.
template <typename T>
TensorT<T> l1_loss(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.shape() == b.shape(), "l1_loss: shape mismatch");
  const int64_t n = a.numel();
  auto out = TensorT<T>::zeros({1});
  T total = T(0);
  for (int64_t i = 0; i < n; ++i) total += std::abs(a.data()[i] - b.data()[i]);
  out.data()[0] = total / static_cast<T>(n);
  attach_backward(out, {a, b}, [a, b, n](detail::Node<T>& o) mutable {
    const T go = o.g[0] / static_cast<T>(n);
    for (int64_t i = 0; i < n; ++i) {
      const T d = a.data()[i] - b.data()[i];
      const T s = d > T(0) ? go : (d < T(0) ? -go : T(0));
      if (a.requires_grad()) a.grad()[static_cast<size_t>(i)] += s;
      if (b.requires_grad()) b.grad()[static_cast<size_t>(i)] -= s;
    }
  });
  return out;
}

/// Mean squared error over all elements.
template <typename T>
TensorT<T> mse_loss(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.shape() == b.shape(), "mse_loss: shape mismatch");
  const int64_t n = a.numel();
  auto out = TensorT<T>::zeros({1});
  T total = T(0);
  for (int64_t i = 0; i < n; ++i) {
    const T d = a.data()[i] - b.data()[i];
    total += d * d;
  }
  out.data()[0] = total / static_cast<T>(n);
  attach_backward(out, {a, b}, [a, b, n](detail::Node<T>& o) mutable {
    const T go = T(2) * o.g[0] / static_cast<T>(n);
    for (int64_t i = 0; i < n; ++i) {
      const T d = a.data()[i] - b.data()[i];
      if (a.requires_grad()) a.grad()[static_cast<size_t>(i)] += go * d;
      if (b.requires_grad()) b.grad()[static_cast<size_t>(i)] -= go * d;
    }
  });
  return out;
}

/// Sum of squares over all elements (no normalization).
template <typename T>
TensorT<T> sum_squares(const TensorT<T>& x) {
  const int64_t n = x.numel();
  auto out = TensorT<T>::zeros({1});
  T total = T(0);
  for (int64_t i = 0; i < n; ++i) total += x.data()[i] * x.data()[i];
  out.data()[0] = total;
  attach_backward(out, {x}, [x, n](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    const T go = T(2) * o.g[0];
    for (int64_t i = 0; i < n; ++i) g[static_cast<size_t>(i)] += go * x.data()[i];
  });
  return out;
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
  const int64_t n = x.numel();
  auto out = TensorT<T>::zeros({1});
  T total = T(0);
  for (int64_t i = 0; i < n; ++i) total += x.data()[i];
  out.data()[0] = total / static_cast<T>(n);
  attach_backward(out, {x}, [x, n](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    const T go = o.g[0] / static_cast<T>(n);
    for (size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
  return out;
}

/// Mean over dim 1 of (B, L, C) -> (B, C). Used to pool condition words.
template <typename T>
TensorT<T> mean_dim1(const TensorT<T>& x) {
  require(x.ndim() == 3, "mean_dim1: expects (B, L, C)");
  const int b = x.dim(0), l = x.dim(1), c = x.dim(2);
  auto out = TensorT<T>::zeros({b, c});
  for (int bi = 0; bi < b; ++bi)
    for (int li = 0; li < l; ++li)
      for (int ci = 0; ci < c; ++ci) out.at(bi, ci) += x.at(bi, li, ci) / static_cast<T>(l);
  attach_backward(out, {x}, [x, b, l, c](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    for (int bi = 0; bi < b; ++bi)
      for (int li = 0; li < l; ++li)
        for (int ci = 0; ci < c; ++ci)
          g[(static_cast<size_t>(bi) * l + li) * c + ci] += o.g[static_cast<size_t>(bi) * c + ci] / static_cast<T>(l);
  });
  return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// GroupNorm over (B, L, C): statistics per (sample, group) across L and the
/// group's channels, then per-channel affine.
template <typename T>
TensorT<T> group_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, int groups,
                      T eps = T(1e-5)) {
  require(x.ndim() == 3, "group_norm: expects (B, L, C)");
  const int b = x.dim(0), l = x.dim(1), c = x.dim(2);
  require(c % groups == 0, "group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                               std::to_string(groups));
  require(gamma.numel() == c && beta.numel() == c, "group_norm: affine params must have C entries");
  const int cg = c / groups;
  const int64_t gsize = static_cast<int64_t>(l) * cg;
  auto out = TensorT<T>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.values().size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(b) * groups);
  for (int bi = 0; bi < b; ++bi) {
    for (int gi = 0; gi < groups; ++gi) {
      T mean = T(0);
      for (int li = 0; li < l; ++li)
        for (int j = 0; j < cg; ++j) mean += x.at(bi, li, gi * cg + j);
      mean /= static_cast<T>(gsize);
      T var = T(0);
      for (int li = 0; li < l; ++li)
        for (int j = 0; j < cg; ++j) {
          const T d = x.at(bi, li, gi * cg + j) - mean;
          var += d * d;
        }
      var /= static_cast<T>(gsize);
      const T istd = T(1) / std::sqrt(var + eps);
      (*inv_std)[static_cast<size_t>(bi) * groups + gi] = istd;
      for (int li = 0; li < l; ++li)
        for (int j = 0; j < cg; ++j) {
          const int ci = gi * cg + j;
          const size_t idx = (static_cast<size_t>(bi) * l + li) * c + ci;
          const T h = (x.data()[idx] - mean) * istd;
          (*xhat)[idx] = h;
          out.data()[idx] = h * gamma.data()[ci] + beta.data()[ci];
        }
    }
  }
  attach_backward(out, {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, b, l, c, groups, cg,
                                          gsize](detail::Node<T>& o) mutable {
    for (int bi = 0; bi < b; ++bi) {
      for (int gi = 0; gi < groups; ++gi) {
        const T istd = (*inv_std)[static_cast<size_t>(bi) * groups + gi];
        T sum_dh = T(0), sum_dh_h = T(0);
        for (int li = 0; li < l; ++li)
          for (int j = 0; j < cg; ++j) {
            const int ci = gi * cg + j;
            const size_t idx = (static_cast<size_t>(bi) * l + li) * c + ci;
            const T dh = o.g[idx] * gamma.data()[ci];
            sum_dh += dh;
            sum_dh_h += dh * (*xhat)[idx];
          }
        if (x.requires_grad()) {
          auto& g = x.grad();
          for (int li = 0; li < l; ++li)
            for (int j = 0; j < cg; ++j) {
              const int ci = gi * cg + j;
              const size_t idx = (static_cast<size_t>(bi) * l + li) * c + ci;
              const T dh = o.g[idx] * gamma.data()[ci];
              g[idx] += istd * (dh - sum_dh / static_cast<T>(gsize) -
                                (*xhat)[idx] * sum_dh_h / static_cast<T>(gsize));
            }
        }
      }
    }
    if (gamma.requires_grad() || beta.requires_grad()) {
      for (int bi = 0; bi < b; ++bi)
        for (int li = 0; li < l; ++li)
          for (int ci = 0; ci < c; ++ci) {
            const size_t idx = (static_cast<size_t>(bi) * l + li) * c + ci;
            if (gamma.requires_grad()) gamma.grad()[static_cast<size_t>(ci)] += o.g[idx] * (*xhat)[idx];
            if (beta.requires_grad()) beta.grad()[static_cast<size_t>(ci)] += o.g[idx];
          }
    }
  });
  return out;
}

/// RMSNorm over the last dim with learned gain.
template <typename T>
TensorT<T> rms_norm(const TensorT<T>& x, const TensorT<T>& gain, T eps = T(1e-6)) {
  const int c = x.dim(x.ndim() - 1);
  require(gain.numel() == c, "rms_norm: gain must have last-dim entries");
  const int64_t rows = x.numel() / c;
  auto out = TensorT<T>::zeros(x.shape());
  auto inv_rms = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * c;
    T ss = T(0);
    for (int j = 0; j < c; ++j) ss += xr[j] * xr[j];
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(c) + eps);
    (*inv_rms)[static_cast<size_t>(r)] = inv;
    T* yr = out.data() + r * c;
    for (int j = 0; j < c; ++j) yr[j] = xr[j] * inv * gain.data()[j];
  }
  attach_backward(out, {x, gain}, [x, gain, inv_rms, rows, c](detail::Node<T>& o) mutable {
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = x.data() + r * c;
      const T* dy = o.g.data() + r * c;
      const T inv = (*inv_rms)[static_cast<size_t>(r)];
      if (x.requires_grad()) {
        T dot = T(0);
        for (int j = 0; j < c; ++j) dot += dy[j] * gain.data()[j] * xr[j];
        dot *= inv * inv * inv / static_cast<T>(c);
        T* gx = x.grad().data() + r * c;
        for (int j = 0; j < c; ++j) gx[j] += dy[j] * gain.data()[j] * inv - xr[j] * dot;
      }
      if (gain.requires_grad()) {
        auto& gg = gain.grad();
        for (int j = 0; j < c; ++j) gg[static_cast<size_t>(j)] += dy[j] * xr[j] * inv;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// 1-D convolution (channels-last) and resizing
// ---------------------------------------------------------------------------

/// conv1d over (B, L, Cin) with weight (Cout, K, Cin/groups) and optional
/// bias (Cout). Cross-correlation with zero padding. groups must be 1
/// (dense, im2col+gemm) or Cin (depthwise, direct).
template <typename T>
TensorT<T> conv1d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, int stride, int pad,
                  int groups = 1) {
  require(x.ndim() == 3 && w.ndim() == 3,
          "conv1d: x must be (B, L, Cin) and w (Cout, K, Cin/groups), got " + shape_str(x.shape()) + " and " +
              shape_str(w.shape()));
  const int b = x.dim(0), l = x.dim(1), cin = x.dim(2);
  const int cout = w.dim(0), k = w.dim(1), wc = w.dim(2);
  require(stride == 1 || stride == 2, "conv1d: stride must be 1 or 2");
  require(groups == 1 || groups == cin, "conv1d: groups must be 1 or Cin");
  require(wc == cin / groups, "conv1d: weight channel dim " + std::to_string(wc) + " vs Cin/groups " +
                                  std::to_string(cin / groups));
  if (groups == cin) require(cout == cin, "conv1d depthwise: Cout must equal Cin");
  const int lout = (l + 2 * pad - k) / stride + 1;
  require(lout >= 1, "conv1d: output length < 1 for L=" + std::to_string(l) + " K=" + std::to_string(k));
  if (bias.defined()) require(bias.numel() == cout, "conv1d: bias must have Cout entries");

  auto out = TensorT<T>::zeros({b, lout, cout});

  if (groups == 1) {
    // im2col: (B*Lout, K*Cin), weight as (K*Cin, Cout)
    const int64_t col_rows = static_cast<int64_t>(b) * lout;
    const int col_cols = k * cin;
    auto col = std::make_shared<std::vector<T>>(static_cast<size_t>(col_rows) * col_cols, T(0));
    for (int bi = 0; bi < b; ++bi)
      for (int oi = 0; oi < lout; ++oi) {
        T* crow = col->data() + (static_cast<size_t>(bi) * lout + oi) * col_cols;
        for (int ki = 0; ki < k; ++ki) {
          const int li = oi * stride + ki - pad;
          if (li < 0 || li >= l) continue;
          const T* src = x.data() + (static_cast<size_t>(bi) * l + li) * cin;
          std::copy(src, src + cin, crow + static_cast<size_t>(ki) * cin);
        }
      }
    std::vector<T> wt(static_cast<size_t>(col_cols) * cout);  // (K*Cin, Cout)
    for (int co = 0; co < cout; ++co)
      for (int ki = 0; ki < k; ++ki)
        for (int ci = 0; ci < cin; ++ci)
          wt[(static_cast<size_t>(ki) * cin + ci) * cout + co] = w.data()[(static_cast<size_t>(co) * k + ki) * cin + ci];
    kern::gemm_nn(static_cast<int>(col_rows), cout, col_cols, col->data(), wt.data(), out.data(), false);
    if (bias.defined())
      for (int64_t r = 0; r < col_rows; ++r)
        for (int co = 0; co < cout; ++co) out.data()[r * cout + co] += bias.data()[co];

    attach_backward(out, {x, w, bias.defined() ? bias : TensorT<T>()}, [x, w, bias, col, b, l, cin, cout, k, pad,
                                                                        stride, lout, col_cols](detail::Node<T>& o) mutable {
      const int64_t col_rows = static_cast<int64_t>(b) * lout;
      if (w.requires_grad()) {
        // dW(K*Cin, Cout) = col^T * dY, then permute into (Cout, K, Cin)
        std::vector<T> colt(static_cast<size_t>(col_cols) * col_rows);
        kern::transpose(static_cast<int>(col_rows), col_cols, col->data(), colt.data());
        std::vector<T> dwt(static_cast<size_t>(col_cols) * cout, T(0));
        kern::gemm_nn(col_cols, cout, static_cast<int>(col_rows), colt.data(), o.g.data(), dwt.data(), false);
        auto& gw = w.grad();
        for (int co = 0; co < cout; ++co)
          for (int ki = 0; ki < k; ++ki)
            for (int ci = 0; ci < cin; ++ci)
              gw[(static_cast<size_t>(co) * k + ki) * cin + ci] += dwt[(static_cast<size_t>(ki) * cin + ci) * cout + co];
      }
      if (x.requires_grad()) {
        // dcol = dY * W^T(Cout, K*Cin), then col2im accumulate
        std::vector<T> wt(static_cast<size_t>(cout) * col_cols);
        for (int co = 0; co < cout; ++co)
          for (int ki = 0; ki < k; ++ki)
            for (int ci = 0; ci < cin; ++ci)
              wt[static_cast<size_t>(co) * col_cols + static_cast<size_t>(ki) * cin + ci] =
                  w.data()[(static_cast<size_t>(co) * k + ki) * cin + ci];
        std::vector<T> dcol(static_cast<size_t>(col_rows) * col_cols, T(0));
        kern::gemm_nn(static_cast<int>(col_rows), col_cols, cout, o.g.data(), wt.data(), dcol.data(), false);
        auto& gx = x.grad();
        for (int bi = 0; bi < b; ++bi)
          for (int oi = 0; oi < lout; ++oi) {
            const T* crow = dcol.data() + (static_cast<size_t>(bi) * lout + oi) * col_cols;
            for (int ki = 0; ki < k; ++ki) {
              const int li = oi * stride + ki - pad;
              if (li < 0 || li >= l) continue;
              T* dst = gx.data() + (static_cast<size_t>(bi) * l + li) * cin;
              const T* src = crow + static_cast<size_t>(ki) * cin;
              for (int ci = 0; ci < cin; ++ci) dst[ci] += src[ci];
            }
          }
      }
      if (bias.defined() && bias.requires_grad()) {
        auto& gb = bias.grad();
        for (int64_t r = 0; r < col_rows; ++r)
          for (int co = 0; co < cout; ++co) gb[static_cast<size_t>(co)] += o.g[r * cout + co];
      }
    });
    return out;
  }

  // depthwise: w (C, K, 1)
  for (int bi = 0; bi < b; ++bi)
    for (int oi = 0; oi < lout; ++oi) {
      T* yrow = out.data() + (static_cast<size_t>(bi) * lout + oi) * cout;
      for (int ki = 0; ki < k; ++ki) {
        const int li = oi * stride + ki - pad;
        if (li < 0 || li >= l) continue;
        const T* xrow = x.data() + (static_cast<size_t>(bi) * l + li) * cin;
        for (int ci = 0; ci < cin; ++ci) yrow[ci] += xrow[ci] * w.data()[static_cast<size_t>(ci) * k + ki];
      }
      if (bias.defined())
        for (int ci = 0; ci < cin; ++ci) yrow[ci] += bias.data()[ci];
    }
  attach_backward(out, {x, w, bias.defined() ? bias : TensorT<T>()},
                  [x, w, bias, b, l, cin, k, pad, stride, lout](detail::Node<T>& o) mutable {
                    for (int bi = 0; bi < b; ++bi)
                      for (int oi = 0; oi < lout; ++oi) {
                        const T* dyrow = o.g.data() + (static_cast<size_t>(bi) * lout + oi) * cin;
                        for (int ki = 0; ki < k; ++ki) {
                          const int li = oi * stride + ki - pad;
                          if (li < 0 || li >= l) continue;
                          const T* xrow = x.data() + (static_cast<size_t>(bi) * l + li) * cin;
                          if (x.requires_grad()) {
                            T* gxrow = x.grad().data() + (static_cast<size_t>(bi) * l + li) * cin;
                            for (int ci = 0; ci < cin; ++ci)
                              gxrow[ci] += dyrow[ci] * w.data()[static_cast<size_t>(ci) * k + ki];
                          }
                          if (w.requires_grad()) {
                            auto& gw = w.grad();
                            for (int ci = 0; ci < cin; ++ci)
                              gw[static_cast<size_t>(ci) * k + ki] += dyrow[ci] * xrow[ci];
                          }
                        }
                        if (bias.defined() && bias.requires_grad()) {
                          auto& gb = bias.grad();
                          for (int ci = 0; ci < cin; ++ci) gb[static_cast<size_t>(ci)] += dyrow[ci];
                        }
                      }
                  });
  return out;
}

/// Sampling position for output index i when resizing L -> Lout. One rule
/// project-wide: p = (i + 0.5) * L / Lout - 0.5, clamped to [0, L-1].
inline double resize_position(int i, int l, int lout) {
  double p = (static_cast<double>(i) + 0.5) * static_cast<double>(l) / static_cast<double>(lout) - 0.5;
  if (p < 0.0) p = 0.0;
  if (p > static_cast<double>(l - 1)) p = static_cast<double>(l - 1);
  return p;
}

/// Per-channel linear 1-D resize of (B, L, C) to (B, Lout, C).
template <typename T>
TensorT<T> resize_linear(const TensorT<T>& x, int lout) {
  require(x.ndim() == 3 && lout >= 1, "resize_linear: expects (B, L, C) and Lout >= 1");
  const int b = x.dim(0), l = x.dim(1), c = x.dim(2);
  auto out = TensorT<T>::zeros({b, lout, c});
  std::vector<int> i0(static_cast<size_t>(lout)), i1(static_cast<size_t>(lout));
  std::vector<T> tfrac(static_cast<size_t>(lout));
  for (int i = 0; i < lout; ++i) {
    const double p = resize_position(i, l, lout);
    i0[static_cast<size_t>(i)] = static_cast<int>(std::floor(p));
    i1[static_cast<size_t>(i)] = std::min(i0[static_cast<size_t>(i)] + 1, l - 1);
    tfrac[static_cast<size_t>(i)] = static_cast<T>(p - std::floor(p));
  }
  for (int bi = 0; bi < b; ++bi)
    for (int i = 0; i < lout; ++i) {
      const T t = tfrac[static_cast<size_t>(i)];
      const T* r0 = x.data() + (static_cast<size_t>(bi) * l + i0[static_cast<size_t>(i)]) * c;
      const T* r1 = x.data() + (static_cast<size_t>(bi) * l + i1[static_cast<size_t>(i)]) * c;
      T* y = out.data() + (static_cast<size_t>(bi) * lout + i) * c;
      for (int ci = 0; ci < c; ++ci) y[ci] = (T(1) - t) * r0[ci] + t * r1[ci];
    }
  attach_backward(out, {x}, [x, b, l, c, lout, i0, i1, tfrac](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    for (int bi = 0; bi < b; ++bi)
      for (int i = 0; i < lout; ++i) {
        const T t = tfrac[static_cast<size_t>(i)];
        const T* dy = o.g.data() + (static_cast<size_t>(bi) * lout + i) * c;
        T* g0 = g.data() + (static_cast<size_t>(bi) * l + i0[static_cast<size_t>(i)]) * c;
        T* g1 = g.data() + (static_cast<size_t>(bi) * l + i1[static_cast<size_t>(i)]) * c;
        for (int ci = 0; ci < c; ++ci) {
          g0[ci] += (T(1) - t) * dy[ci];
          g1[ci] += t * dy[ci];
        }
      }
  });
  return out;
}

/// Per-channel nearest 1-D resize under the same sampling rule.
template <typename T>
TensorT<T> resize_nearest(const TensorT<T>& x, int lout) {
  require(x.ndim() == 3 && lout >= 1, "resize_nearest: expects (B, L, C) and Lout >= 1");
  const int b = x.dim(0), l = x.dim(1), c = x.dim(2);
  auto out = TensorT<T>::zeros({b, lout, c});
  std::vector<int> src(static_cast<size_t>(lout));
  for (int i = 0; i < lout; ++i)
    src[static_cast<size_t>(i)] = static_cast<int>(std::floor(resize_position(i, l, lout) + 0.5));
  for (int bi = 0; bi < b; ++bi)
    for (int i = 0; i < lout; ++i) {
      const T* r = x.data() + (static_cast<size_t>(bi) * l + src[static_cast<size_t>(i)]) * c;
      std::copy(r, r + c, out.data() + (static_cast<size_t>(bi) * lout + i) * c);
    }
  attach_backward(out, {x}, [x, b, l, c, lout, src](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    for (int bi = 0; bi < b; ++bi)
      for (int i = 0; i < lout; ++i) {
        const T* dy = o.g.data() + (static_cast<size_t>(bi) * lout + i) * c;
        T* gr = g.data() + (static_cast<size_t>(bi) * l + src[static_cast<size_t>(i)]) * c;
        for (int ci = 0; ci < c; ++ci) gr[ci] += dy[ci];
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// embedding, attention, RoPE
// ---------------------------------------------------------------------------

/// Row lookup: ids (any shape) into table (V, D) -> (ids.shape..., D).
template <typename T>
TensorT<T> embedding(const TensorT<T>& table, const IntArray& ids) {
  require(table.ndim() == 2, "embedding: table must be (V, D)");
  const int v = table.dim(0), d = table.dim(1);
  for (int64_t i = 0; i < ids.numel(); ++i)
    require(ids.v[static_cast<size_t>(i)] >= 0 && ids.v[static_cast<size_t>(i)] < v,
            "embedding: id " + std::to_string(ids.v[static_cast<size_t>(i)]) + " out of range [0," +
                std::to_string(v) + ")");
  Shape out_shape = ids.shape;
  out_shape.push_back(d);
  auto out = TensorT<T>::zeros(out_shape);
  const int64_t n = ids.numel();
  for (int64_t i = 0; i < n; ++i)
    std::copy(table.data() + static_cast<size_t>(ids.v[static_cast<size_t>(i)]) * d,
              table.data() + (static_cast<size_t>(ids.v[static_cast<size_t>(i)]) + 1) * d,
              out.data() + i * d);
  IntArray idc = ids;
  attach_backward(out, {table}, [table, idc, d, n](detail::Node<T>& o) mutable {
    auto& g = table.grad();
    for (int64_t i = 0; i < n; ++i) {
      T* dst = g.data() + static_cast<size_t>(idc.v[static_cast<size_t>(i)]) * d;
      const T* src = o.g.data() + i * d;
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return out;
}

/// Rotary embedding on (B, H, L, Dh) with explicit (possibly fractional)
/// positions, one per sequence slot. Pairs (2i, 2i+1) rotate by pos*theta_i.
template <typename T>
TensorT<T> rope(const TensorT<T>& x, const std::vector<double>& positions, double base = 10000.0) {
  require(x.ndim() == 4, "rope: expects (B, H, L, Dh)");
  const int b = x.dim(0), h = x.dim(1), l = x.dim(2), dh = x.dim(3);
  require(dh % 2 == 0, "rope: head dim must be even");
  require(static_cast<int>(positions.size()) == l, "rope: positions size vs sequence length");
  const int half = dh / 2;
  auto cs = std::make_shared<std::vector<T>>(static_cast<size_t>(l) * dh);
  for (int li = 0; li < l; ++li)
    for (int i = 0; i < half; ++i) {
      const double theta = std::pow(base, -2.0 * i / dh);
      const double ang = positions[static_cast<size_t>(li)] * theta;
      (*cs)[(static_cast<size_t>(li) * half + i) * 2] = static_cast<T>(std::cos(ang));
      (*cs)[(static_cast<size_t>(li) * half + i) * 2 + 1] = static_cast<T>(std::sin(ang));
    }
  auto out = TensorT<T>::zeros(x.shape());
  for (int bi = 0; bi < b; ++bi)
    for (int hi = 0; hi < h; ++hi)
      for (int li = 0; li < l; ++li) {
        const T* xr = x.data() + ((static_cast<size_t>(bi) * h + hi) * l + li) * dh;
        T* yr = out.data() + ((static_cast<size_t>(bi) * h + hi) * l + li) * dh;
        for (int i = 0; i < half; ++i) {
          const T c = (*cs)[(static_cast<size_t>(li) * half + i) * 2];
          const T s = (*cs)[(static_cast<size_t>(li) * half + i) * 2 + 1];
          yr[2 * i] = xr[2 * i] * c - xr[2 * i + 1] * s;
          yr[2 * i + 1] = xr[2 * i] * s + xr[2 * i + 1] * c;
        }
      }
  attach_backward(out, {x}, [x, cs, b, h, l, dh, half](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    for (int bi = 0; bi < b; ++bi)
      for (int hi = 0; hi < h; ++hi)
        for (int li = 0; li < l; ++li) {
          const T* dy = o.g.data() + ((static_cast<size_t>(bi) * h + hi) * l + li) * dh;
          T* gx = g.data() + ((static_cast<size_t>(bi) * h + hi) * l + li) * dh;
          for (int i = 0; i < half; ++i) {
            const T c = (*cs)[(static_cast<size_t>(li) * half + i) * 2];
            const T s = (*cs)[(static_cast<size_t>(li) * half + i) * 2 + 1];
            gx[2 * i] += dy[2 * i] * c + dy[2 * i + 1] * s;
            gx[2 * i + 1] += -dy[2 * i] * s + dy[2 * i + 1] * c;
          }
        }
  });
  return out;
}

/// Scaled dot-product attention with optional additive mask.
/// q (B,H,Lq,Dh), k/v (B,H,Lk,Dh); mask broadcastable to (B,H,Lq,Lk).
template <typename T>
TensorT<T> scaled_dot_attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                                const TensorT<T>& mask = TensorT<T>()) {
  require(q.ndim() == 4 && k.ndim() == 4 && v.ndim() == 4, "attention: q,k,v must be (B,H,L,Dh)");
  require(q.dim(0) == k.dim(0) && q.dim(1) == k.dim(1) && q.dim(3) == k.dim(3),
          "attention: q/k shape mismatch " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  require(k.shape() == v.shape(), "attention: k/v shape mismatch");
  const int b = q.dim(0), h = q.dim(1), lq = q.dim(2), lk = k.dim(2), dh = q.dim(3);
  auto q3 = reshape(q, {b * h, lq, dh});
  auto k3 = reshape(k, {b * h, lk, dh});
  auto v3 = reshape(v, {b * h, lk, dh});
  auto scores = bmm(q3, transpose_last2(k3));
  scores = scale(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  auto scores4 = reshape(scores, {b, h, lq, lk});
  if (mask.defined()) scores4 = add_broadcast4(scores4, mask);
  auto att = softmax_last(scores4);
  auto out3 = bmm(reshape(att, {b * h, lq, lk}), v3);
  return reshape(out3, {b, h, lq, dh});
}

/// SwiGLU feed-forward: w2( silu(x w1) * (x w3) ). Weights are (D, Hf),
/// (D, Hf), (Hf, D); no biases.
template <typename T>
TensorT<T> swiglu_ff(const TensorT<T>& x, const TensorT<T>& w1, const TensorT<T>& w3, const TensorT<T>& w2) {
  auto gate = silu(linear(x, w1));
  auto val = linear(x, w3);
  return linear(mul(gate, val), w2);
}

/// Forward takes the values of `values_from`; gradient flows to `grad_to`
/// unchanged. The quantizer boundary estimator.
template <typename T>
TensorT<T> straight_through(const TensorT<T>& grad_to, const TensorT<T>& values_from) {
  require(grad_to.shape() == values_from.shape(), "straight_through: shape mismatch");
  auto out = TensorT<T>::from(grad_to.shape(), values_from.values());
  attach_backward(out, {grad_to}, [grad_to](detail::Node<T>& o) mutable {
    auto& g = grad_to.grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o.g[i];
  });
  return out;
}

/// Inverted dropout; active only when p > 0. Deterministic given the rng.
template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  require(p < 1.0, "dropout: p must be < 1");
  auto mask = std::make_shared<std::vector<T>>(x.values().size());
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  auto out = TensorT<T>::zeros(x.shape());
  for (size_t i = 0; i < mask->size(); ++i) {
    (*mask)[i] = rng.uniform() < p ? T(0) : keep;
    out.data()[static_cast<int64_t>(i)] = x.data()[static_cast<int64_t>(i)] * (*mask)[i];
  }
  attach_backward(out, {x}, [x, mask](detail::Node<T>& o) mutable {
    auto& g = x.grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o.g[i] * (*mask)[i];
  });
  return out;
}

}  // namespace msm
