#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <type_traits>
#include <span>
#include <string>
#include <vector>

#include "tah/errors.hpp"
#include "tah/numerics/tensor.hpp"

namespace tah {

namespace detail {

template <class T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (t.dim() != 2) throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <class T>
void check_finite(std::span<const T> values, const char* op) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

// c[m x n] += a[m x k] * b[k x n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x k] += a[m x n] * b[k x n]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
detail::Node<T>* parent(detail::Node<T>& self, std::size_t i) {
  return self.parents[i].get();
}

}  // namespace detail

/// Standard matrix product of 2-D tensors.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor<T>::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& self) {
    auto* pa = detail::parent(self, 0);
    auto* pb = detail::parent(self, 1);
    if (pa->requires_grad) detail::gemm_nt(self.grad.data(), pb->data.data(), pa->ensure_grad().data(), m, n, k);
    if (pb->requires_grad) detail::gemm_tn(pa->data.data(), self.grad.data(), pb->ensure_grad().data(), m, k, n);
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_2d(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  const auto& in = a.vec();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  return Tensor<T>::make_result({n, m}, std::move(out), {a}, [m, n](detail::Node<T>& self) {
    auto* pa = detail::parent(self, 0);
    if (!pa->requires_grad) return;
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.vec()[i] + b.vec()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto* pn = detail::parent(self, p);
      if (!pn->requires_grad) continue;
      auto& g = pn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.vec()[i] - b.vec()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    auto* pa = detail::parent(self, 0);
    auto* pb = detail::parent(self, 1);
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Elementwise (Hadamard) product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.vec()[i] * b.vec()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    auto* pa = detail::parent(self, 0);
    auto* pb = detail::parent(self, 1);
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->data[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.vec()[i] * s;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [s](detail::Node<T>& self) {
    auto* pa = detail::parent(self, 0);
    if (!pa->requires_grad) return;
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

/// x[n x m] + b[m] broadcast over rows.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  detail::require_2d(x, "add_bias");
  const std::size_t n = x.rows(), m = x.cols();
  if (b.numel() != m) throw DimensionError("add_bias: bias length does not match columns");
  std::vector<T> out(x.vec());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += b.vec()[j];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, b}, [n, m](detail::Node<T>& self) {
    auto* px = detail::parent(self, 0);
    auto* pb = detail::parent(self, 1);
    if (px->requires_grad) {
      auto& g = px->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
    }
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.vec()) acc += v;
  return Tensor<T>::make_result({1}, {acc}, {a}, [](detail::Node<T>& self) {
    auto* pa = detail::parent(self, 0);
    if (!pa->requires_grad) return;
    auto& g = pa->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.vec()[i];
    out[i] = x / (T(1) + std::exp(-x));
  }
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [](detail::Node<T>& self) {
    auto* pa = detail::parent(self, 0);
    if (!pa->requires_grad) return;
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = pa->data[i];
      const T s = T(1) / (T(1) + std::exp(-x));
      g[i] += self.grad[i] * (s * (T(1) + x * (T(1) - s)));
    }
  });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.vec()[i];
    out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  }
  return Tensor<T>::make_result(a.shape(), out, {a}, [out](detail::Node<T>& self) {
    auto* pa = detail::parent(self, 0);
    if (!pa->requires_grad) return;
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * out[i] * (T(1) - out[i]);
  });
}

/// Root-mean-square normalisation of each row, scaled by a learned gain.
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  detail::require_2d(x, "rms_norm");
  const std::size_t n = x.rows(), h = x.cols();
  if (gain.numel() != h) throw DimensionError("rms_norm: gain length does not match hidden size");
  std::vector<T> out(n * h);
  std::vector<T> inv(n);
  for (std::size_t i = 0; i < n; ++i) {
    T ss = T(0);
    for (std::size_t j = 0; j < h; ++j) ss += x.vec()[i * h + j] * x.vec()[i * h + j];
    inv[i] = T(1) / std::sqrt(ss / static_cast<T>(h) + eps);
    for (std::size_t j = 0; j < h; ++j) out[i * h + j] = x.vec()[i * h + j] * inv[i] * gain.vec()[j];
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, gain}, [n, h, inv](detail::Node<T>& self) {
    auto* px = detail::parent(self, 0);
    auto* pg = detail::parent(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const T* xr = px->data.data() + i * h;
      const T* gr = self.grad.data() + i * h;
      if (pg->requires_grad) {
        auto& gg = pg->ensure_grad();
        for (std::size_t j = 0; j < h; ++j) gg[j] += gr[j] * xr[j] * inv[i];
      }
      if (px->requires_grad) {
        auto& gx = px->ensure_grad();
        // dx = inv * (g*w) - inv^3 / h * x * sum(g*w*x)
        T dot = T(0);
        for (std::size_t j = 0; j < h; ++j) dot += gr[j] * pg->data[j] * xr[j];
        const T c = inv[i] * inv[i] * inv[i] * dot / static_cast<T>(h);
        for (std::size_t j = 0; j < h; ++j) gx[i * h + j] += inv[i] * gr[j] * pg->data[j] - c * xr[j];
      }
    }
  });
}

/// Rotary position encoding applied per head with the half-split pairing
/// (element k rotates with element k + head_dim/2). Row r uses position
/// positions[r].
template <class T>
Tensor<T> rope(const Tensor<T>& x, std::span<const std::int64_t> positions, std::size_t num_heads, double base) {
  detail::require_2d(x, "rope");
  const std::size_t n = x.rows(), h = x.cols();
  if (positions.size() != n) throw DimensionError("rope: one position per row required");
  if (num_heads == 0 || h % num_heads != 0) throw DimensionError("rope: hidden size not divisible by heads");
  const std::size_t hd = h / num_heads;
  if (hd % 2 != 0) throw DimensionError("rope: head dimension must be even");
  const std::size_t half = hd / 2;
  std::vector<T> cosv(n * half), sinv(n * half);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(hd));
      const double ang = static_cast<double>(positions[r]) * freq;
      cosv[r * half + k] = static_cast<T>(std::cos(ang));
      sinv[r * half + k] = static_cast<T>(std::sin(ang));
    }
  }
  std::vector<T> out(n * h);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t hh = 0; hh < num_heads; ++hh) {
      const std::size_t off = r * h + hh * hd;
      for (std::size_t k = 0; k < half; ++k) {
        const T c = cosv[r * half + k], s = sinv[r * half + k];
        const T a = x.vec()[off + k], b = x.vec()[off + k + half];
        out[off + k] = a * c - b * s;
        out[off + k + half] = b * c + a * s;
      }
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x}, [n, h, num_heads, hd, half, cosv, sinv](detail::Node<T>& self) {
        auto* px = detail::parent(self, 0);
        if (!px->requires_grad) return;
        auto& g = px->ensure_grad();
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t hh = 0; hh < num_heads; ++hh) {
            const std::size_t off = r * h + hh * hd;
            for (std::size_t k = 0; k < half; ++k) {
              const T c = cosv[r * half + k], s = sinv[r * half + k];
              const T ga = self.grad[off + k], gb = self.grad[off + k + half];
              g[off + k] += ga * c + gb * s;
              g[off + k + half] += -ga * s + gb * c;
            }
          }
        }
      });
}

/// Row gather: out[r] = x[index[r]]. Embedding lookup is gather over E.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
  detail::require_2d(x, "gather_rows");
  const std::size_t m = x.cols();
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<T> out(idx.size() * m);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= x.rows()) throw DimensionError("gather_rows: index out of range");
    std::copy_n(x.vec().begin() + static_cast<std::ptrdiff_t>(idx[r] * m), m, out.begin() + static_cast<std::ptrdiff_t>(r * m));
  }
  return Tensor<T>::make_result({idx.size(), m}, std::move(out), {x}, [idx, m](detail::Node<T>& self) {
    auto* px = detail::parent(self, 0);
    if (!px->requires_grad) return;
    auto& g = px->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < m; ++j) g[idx[r] * m + j] += self.grad[r * m + j];
  });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t m = parts.front().cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.cols() != m) throw DimensionError("concat_rows: column mismatch");
    n += p.rows();
  }
  std::vector<T> out;
  out.reserve(n * m);
  for (const auto& p : parts) out.insert(out.end(), p.vec().begin(), p.vec().end());
  return Tensor<T>::make_result({n, m}, std::move(out), parts, [](detail::Node<T>& self) {
    std::size_t off = 0;
    for (auto& pp : self.parents) {
      if (pp->requires_grad) {
        auto& g = pp->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += pp->data.size();
    }
  });
}

/// Max-subtracted softmax along `axis` of a 1-D or 2-D tensor.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (x.dim() > 2 || axis >= x.dim()) throw DimensionError("softmax: invalid axis");
  detail::check_finite(x.data(), "softmax");
  const std::size_t n = x.dim() == 1 ? 1 : x.rows();
  const std::size_t m = x.dim() == 1 ? x.numel() : x.cols();
  // Normalise over `len` elements spaced `stride` apart, for `count` groups.
  const bool along_rows = x.dim() == 1 || axis == 1;
  const std::size_t count = along_rows ? n : m;
  const std::size_t len = along_rows ? m : n;
  const std::size_t stride = along_rows ? 1 : m;
  const std::size_t step = along_rows ? m : 1;
  std::vector<T> out(x.numel());
  for (std::size_t g = 0; g < count; ++g) {
    const std::size_t base = g * step;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, x.vec()[base + i * stride]);
    T z = T(0);
    for (std::size_t i = 0; i < len; ++i) {
      out[base + i * stride] = std::exp(x.vec()[base + i * stride] - mx);
      z += out[base + i * stride];
    }
    for (std::size_t i = 0; i < len; ++i) out[base + i * stride] /= z;
  }
  return Tensor<T>::make_result(x.shape(), out, {x}, [out, count, len, stride, step](detail::Node<T>& self) {
    auto* px = detail::parent(self, 0);
    if (!px->requires_grad) return;
    auto& g = px->ensure_grad();
    for (std::size_t gi = 0; gi < count; ++gi) {
      const std::size_t base = gi * step;
      T dot = T(0);
      for (std::size_t i = 0; i < len; ++i) dot += self.grad[base + i * stride] * out[base + i * stride];
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t k = base + i * stride;
        g[k] += out[k] * (self.grad[k] - dot);
      }
    }
  });
}

/// Indices of the `k` largest entries of `row`, ties broken toward the
/// lower index, in descending value order.
template <class T>
std::vector<std::size_t> top_k_indices(std::span<const T> row, std::size_t k) {
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, row.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
  idx.resize(k);
  return idx;
}

/// Row-wise softmax restricted to each row's top-k logits; the retained
/// probabilities are renormalised and every other entry is exactly zero.
template <class T>
Tensor<T> topk_softmax(const Tensor<T>& logits, std::size_t k) {
  detail::require_2d(logits, "topk_softmax");
  if (k < 1) throw ConfigError("topk_softmax: k must be at least 1");
  detail::check_finite(logits.data(), "topk_softmax");
  const std::size_t n = logits.rows(), v = logits.cols();
  std::vector<T> out(n * v, T(0));
  std::vector<std::vector<std::size_t>> kept(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const T> row(logits.vec().data() + i * v, v);
    kept[i] = top_k_indices(row, k);
    const T mx = row[kept[i].front()];
    T z = T(0);
    for (auto j : kept[i]) z += (out[i * v + j] = std::exp(row[j] - mx));
    for (auto j : kept[i]) out[i * v + j] /= z;
  }
  return Tensor<T>::make_result(logits.shape(), out, {logits}, [out, kept, v](detail::Node<T>& self) {
    auto* px = detail::parent(self, 0);
    if (!px->requires_grad) return;
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < kept.size(); ++i) {
      T dot = T(0);
      for (auto j : kept[i]) dot += self.grad[i * v + j] * out[i * v + j];
      for (auto j : kept[i]) g[i * v + j] += out[i * v + j] * (self.grad[i * v + j] - dot);
    }
  });
}

/// Sum over rows of -log softmax(logits[r])[target[r]]; rows whose target
/// is negative are ignored.
template <class T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const std::int64_t> targets) {
  detail::require_2d(logits, "cross_entropy_sum");
  const std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n) throw DimensionError("cross_entropy_sum: one target per row required");
  detail::check_finite(logits.data(), "cross_entropy_sum");
  std::vector<T> probs(n * v, T(0));
  std::vector<std::int64_t> tgt(targets.begin(), targets.end());
  T loss = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (tgt[i] < 0) continue;
    if (static_cast<std::size_t>(tgt[i]) >= v) throw DimensionError("cross_entropy_sum: target out of range");
    const T* row = logits.vec().data() + i * v;
    const T mx = *std::max_element(row, row + v);
    T z = T(0);
    for (std::size_t j = 0; j < v; ++j) z += (probs[i * v + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
    loss += -(row[tgt[i]] - mx - std::log(z));
  }
  return Tensor<T>::make_result({1}, {loss}, {logits}, [probs, tgt, v](detail::Node<T>& self) {
    auto* px = detail::parent(self, 0);
    if (!px->requires_grad) return;
    auto& g = px->ensure_grad();
    const T up = self.grad[0];
    for (std::size_t i = 0; i < tgt.size(); ++i) {
      if (tgt[i] < 0) continue;
      for (std::size_t j = 0; j < v; ++j) g[i * v + j] += up * probs[i * v + j];
      g[i * v + static_cast<std::size_t>(tgt[i])] -= up;
    }
  });
}

/// Class-weighted binary cross-entropy summed over entries:
/// -sum_i [ w_i * c_i * log(p_i) + (1 - c_i) * log(1 - p_i) ],
/// with p clamped to [eps, 1 - eps]. `weights` multiplies only the
/// positive (continue) term.
template <class T>
Tensor<T> weighted_bce_sum(const Tensor<T>& probs, std::type_identity_t<std::span<const T>> labels,
                           std::type_identity_t<std::span<const T>> weights, T eps = T(1e-7)) {
  const std::size_t n = probs.numel();
  if (labels.size() != n || weights.size() != n) throw DimensionError("weighted_bce_sum: length mismatch");
  std::vector<T> lab(labels.begin(), labels.end()), w(weights.begin(), weights.end());
  T loss = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T p = std::clamp(probs.vec()[i], eps, T(1) - eps);
    loss -= w[i] * lab[i] * std::log(p) + (T(1) - lab[i]) * std::log(T(1) - p);
  }
  return Tensor<T>::make_result({1}, {loss}, {probs}, [lab, w, eps](detail::Node<T>& self) {
    auto* pp = detail::parent(self, 0);
    if (!pp->requires_grad) return;
    auto& g = pp->ensure_grad();
    for (std::size_t i = 0; i < lab.size(); ++i) {
      const T raw = pp->data[i];
      if (raw < eps || raw > T(1) - eps) continue;  // clamped: flat
      g[i] += self.grad[0] * (-w[i] * lab[i] / raw + (T(1) - lab[i]) / (T(1) - raw));
    }
  });
}

/// Key indices each query row may attend to (a sparse form of an additive
/// 0/-inf mask).
using AllowedKeys = std::vector<std::vector<std::uint32_t>>;

/// Optional sink for attention probabilities:
/// probs[query][head][n] aligned with allowed[query][n].
template <class T>
struct AttentionProbs {
  std::vector<std::vector<std::vector<T>>> probs;
};

/// Multi-head scaled dot-product attention with a sparse mask. q is
/// [nq x h], k and v are [nk x h]; heads split the hidden dimension
/// contiguously. Every query must have at least one allowed key.
template <class T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AllowedKeys& allowed,
                           std::size_t num_heads, AttentionProbs<T>* record = nullptr) {
  detail::require_2d(q, "masked_attention");
  detail::require_2d(k, "masked_attention");
  detail::require_2d(v, "masked_attention");
  const std::size_t nq = q.rows(), nk = k.rows(), h = q.cols();
  if (k.cols() != h || v.cols() != h || v.rows() != nk) throw DimensionError("masked_attention: q/k/v shapes disagree");
  if (allowed.size() != nq) throw DimensionError("masked_attention: one allowed-key list per query required");
  if (num_heads == 0 || h % num_heads != 0) throw DimensionError("masked_attention: hidden size not divisible by heads");
  const std::size_t hd = h / num_heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(hd));
  // probs laid out per query: [head][allowed index]
  std::vector<std::vector<T>> probs(nq);
  std::vector<T> out(nq * h, T(0));
  for (std::size_t i = 0; i < nq; ++i) {
    const auto& keys = allowed[i];
    if (keys.empty()) throw ContractError("masked_attention: query row " + std::to_string(i) + " has no allowed keys");
    probs[i].assign(num_heads * keys.size(), T(0));
    for (std::size_t hh = 0; hh < num_heads; ++hh) {
      const T* qi = q.vec().data() + i * h + hh * hd;
      T* pr = probs[i].data() + hh * keys.size();
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t a = 0; a < keys.size(); ++a) {
        if (keys[a] >= nk) throw DimensionError("masked_attention: key index out of range");
        const T* kj = k.vec().data() + keys[a] * h + hh * hd;
        T s = T(0);
        for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
        pr[a] = s * sc;
        mx = std::max(mx, pr[a]);
      }
      T z = T(0);
      for (std::size_t a = 0; a < keys.size(); ++a) z += (pr[a] = std::exp(pr[a] - mx));
      T* oi = out.data() + i * h + hh * hd;
      for (std::size_t a = 0; a < keys.size(); ++a) {
        pr[a] /= z;
        const T* vj = v.vec().data() + keys[a] * h + hh * hd;
        for (std::size_t c = 0; c < hd; ++c) oi[c] += pr[a] * vj[c];
      }
    }
  }
  if (record) {
    record->probs.assign(nq, {});
    for (std::size_t i = 0; i < nq; ++i) {
      const std::size_t na = allowed[i].size();
      record->probs[i].assign(num_heads, std::vector<T>(na));
      for (std::size_t hh = 0; hh < num_heads; ++hh)
        std::copy_n(probs[i].begin() + static_cast<std::ptrdiff_t>(hh * na), na, record->probs[i][hh].begin());
    }
  }
  return Tensor<T>::make_result(
      {nq, h}, std::move(out), {q, k, v}, [allowed, probs, num_heads, hd, h, sc](detail::Node<T>& self) {
        auto* pq = detail::parent(self, 0);
        auto* pk = detail::parent(self, 1);
        auto* pv = detail::parent(self, 2);
        std::vector<T>* gq = pq->requires_grad ? &pq->ensure_grad() : nullptr;
        std::vector<T>* gk = pk->requires_grad ? &pk->ensure_grad() : nullptr;
        std::vector<T>* gv = pv->requires_grad ? &pv->ensure_grad() : nullptr;
        std::vector<T> dp;
        for (std::size_t i = 0; i < allowed.size(); ++i) {
          const auto& keys = allowed[i];
          dp.assign(keys.size(), T(0));
          for (std::size_t hh = 0; hh < num_heads; ++hh) {
            const T* pr = probs[i].data() + hh * keys.size();
            const T* go = self.grad.data() + i * h + hh * hd;
            const T* qi = pq->data.data() + i * h + hh * hd;
            T dot = T(0);
            for (std::size_t a = 0; a < keys.size(); ++a) {
              const T* vj = pv->data.data() + keys[a] * h + hh * hd;
              T s = T(0);
              for (std::size_t c = 0; c < hd; ++c) s += go[c] * vj[c];
              dp[a] = s;
              dot += pr[a] * s;
              if (gv) {
                T* gvj = gv->data() + keys[a] * h + hh * hd;
                for (std::size_t c = 0; c < hd; ++c) gvj[c] += pr[a] * go[c];
              }
            }
            for (std::size_t a = 0; a < keys.size(); ++a) {
              const T ds = pr[a] * (dp[a] - dot) * sc;
              if (ds == T(0)) continue;
              const T* kj = pk->data.data() + keys[a] * h + hh * hd;
              if (gq) {
                T* gqi = gq->data() + i * h + hh * hd;
                for (std::size_t c = 0; c < hd; ++c) gqi[c] += ds * kj[c];
              }
              if (gk) {
                T* gkj = gk->data() + keys[a] * h + hh * hd;
                for (std::size_t c = 0; c < hd; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

}  // namespace tah
