#pragma once

// Differentiable operations over vila::Tensor. Each op computes its forward
// value eagerly and, when an input requires grad, records a backward rule on
// the current Graph.

#include <cmath>
#include <limits>
#include <numbers>

#include "vila/tensor.hpp"

namespace vila {

namespace detail {

inline double* grad_of(const ImplPtr& p) { return p->requires_grad ? p->grad_buffer() : nullptr; }

// C[m,n] += A[m,k] B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] B[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// C[m,n] += A[k,m]^T B[k,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::size_t norm_axis(std::ptrdiff_t axis, std::size_t rank) {
  auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("invalid axis " + std::to_string(axis) + " for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis);
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Products

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result(
      {m, n}, std::move(out), {a.impl(), b.impl()},
      [m, k, n](const Node& node) {
        const auto& A = node.inputs[0];
        const auto& B = node.inputs[1];
        const double* g = node.output->grad.data();
        if (double* ga = detail::grad_of(A)) detail::gemm_nt(g, B->data.data(), ga, m, n, k);
        if (double* gb = detail::grad_of(B)) detail::gemm_tn(A->data.data(), g, gb, k, m, n);
      },
      "matmul");
}

/// Batched product a[B,m,k] · b[B,k,n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(bs * m * n, 0.0);
  for (std::size_t i = 0; i < bs; ++i) {
    detail::gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n, out.data() + i * m * n, m, k, n);
  }
  return detail::make_result(
      {bs, m, n}, std::move(out), {a.impl(), b.impl()},
      [bs, m, k, n](const Node& node) {
        const auto& A = node.inputs[0];
        const auto& B = node.inputs[1];
        const double* g = node.output->grad.data();
        double* ga = detail::grad_of(A);
        double* gb = detail::grad_of(B);
        for (std::size_t i = 0; i < bs; ++i) {
          if (ga) detail::gemm_nt(g + i * m * n, B->data.data() + i * k * n, ga + i * m * k, m, n, k);
          if (gb) detail::gemm_tn(A->data.data() + i * m * k, g + i * m * n, gb + i * k * n, k, m, n);
        }
      },
      "bmm");
}

/// Batched product with transposed right operand: a[B,m,k] · b[B,n,k]^T.
inline Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
    throw DimensionError("bmm_nt shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  std::vector<double> out(bs * m * n, 0.0);
  for (std::size_t i = 0; i < bs; ++i) {
    detail::gemm_nt(a.data().data() + i * m * k, b.data().data() + i * n * k, out.data() + i * m * n, m, k, n);
  }
  return detail::make_result(
      {bs, m, n}, std::move(out), {a.impl(), b.impl()},
      [bs, m, k, n](const Node& node) {
        const auto& A = node.inputs[0];
        const auto& B = node.inputs[1];
        const double* g = node.output->grad.data();
        double* ga = detail::grad_of(A);
        double* gb = detail::grad_of(B);
        for (std::size_t i = 0; i < bs; ++i) {
          // dA = G B, dB = G^T A
          if (ga) detail::gemm_nn(g + i * m * n, B->data.data() + i * n * k, ga + i * m * k, m, n, k);
          if (gb) detail::gemm_tn(g + i * m * n, A->data.data() + i * m * k, gb + i * n * k, n, m, k);
        }
      },
      "bmm_nt");
}

/// x[..., k] · w[k, n] (+ bias[n]) applied over all leading positions.
inline Tensor linear(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || x.dim(-1) != w.dim(0)) {
    throw DimensionError("linear shape mismatch: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  }
  const std::size_t k = w.dim(0), n = w.dim(1), m = x.numel() / k;
  Shape shape = x.shape();
  shape.back() = n;
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  return detail::make_result(
      std::move(shape), std::move(out), {x.impl(), w.impl()},
      [m, k, n](const Node& node) {
        const auto& X = node.inputs[0];
        const auto& W = node.inputs[1];
        const double* g = node.output->grad.data();
        if (double* gx = detail::grad_of(X)) detail::gemm_nt(g, W->data.data(), gx, m, n, k);
        if (double* gw = detail::grad_of(W)) detail::gemm_tn(X->data.data(), g, gw, k, m, n);
      },
      "linear");
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <class Fwd, class GradA, class GradB>
Tensor binary_suffix(const Tensor& a, const Tensor& b, Fwd fwd, GradA ga_rule, GradB gb_rule, const char* op) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t na = a.numel(), nb = b.numel();
  std::vector<double> out(na);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < na; ++i) out[i] = fwd(pa[i], pb[i % nb]);
  return make_result(
      a.shape(), std::move(out), {a.impl(), b.impl()},
      [na, nb, ga_rule, gb_rule](const Node& node) {
        const auto& A = node.inputs[0];
        const auto& B = node.inputs[1];
        const double* g = node.output->grad.data();
        double* ga = grad_of(A);
        double* gb = grad_of(B);
        for (std::size_t i = 0; i < na; ++i) {
          const double av = A->data[i], bv = B->data[i % nb];
          if (ga) ga[i] += g[i] * ga_rule(av, bv);
          if (gb) gb[i % nb] += g[i] * gb_rule(av, bv);
        }
      },
      op);
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv, const char* op) {
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(px[i]);
  return make_result(
      x.shape(), std::move(out), {x.impl()},
      [deriv](const Node& node) {
        const auto& X = node.inputs[0];
        double* gx = grad_of(X);
        if (!gx) return;
        const double* g = node.output->grad.data();
        for (std::size_t i = 0; i < X->data.size(); ++i) gx[i] += g[i] * deriv(X->data[i]);
      },
      op);
}

}  // namespace detail

/// a + b where b's shape equals a trailing block of a's shape.
inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_suffix(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; }, "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_suffix(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; }, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_suffix(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; }, "mul");
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      x, [c](double v) { return c * v; }, [c](double) { return c; }, "scale");
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; }, "relu");
}

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline Tensor gelu(const Tensor& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return detail::unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v))); },
      [](double v) {
        const double t = std::tanh(k * (v + c * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * c * v * v);
      },
      "gelu");
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); }, "exp");
}

// ---------------------------------------------------------------------------
// Normalizations and reductions

/// Softmax along `axis`, max-subtracted.
inline Tensor softmax(const Tensor& x, std::ptrdiff_t axis = -1) {
  const auto ax = detail::norm_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < sp.len; ++j) mx = std::max(mx, px[base + j * sp.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.len; ++j) {
        const double e = std::exp(px[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= z;
    }
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return detail::make_result(
      x.shape(), std::move(out), {x.impl()},
      [sp, y](const Node& node) {
        double* gx = detail::grad_of(node.inputs[0]);
        if (!gx) return;
        const double* g = node.output->grad.data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.len * sp.inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < sp.len; ++j) dot += g[base + j * sp.inner] * (*y)[base + j * sp.inner];
            for (std::size_t j = 0; j < sp.len; ++j) {
              const std::size_t idx = base + j * sp.inner;
              gx[idx] += (*y)[idx] * (g[idx] - dot);
            }
          }
        }
      },
      "softmax");
}

/// log(softmax(x)) along the last axis.
inline Tensor log_softmax(const Tensor& x) {
  const std::size_t n = x.dim(-1), rows = x.numel() / n;
  std::vector<double> out(x.numel());
  auto probs = std::make_shared<std::vector<double>>(x.numel());
  const double* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = row[j] - lse;
      (*probs)[r * n + j] = std::exp(out[r * n + j]);
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x.impl()},
      [rows, n, probs](const Node& node) {
        double* gx = detail::grad_of(node.inputs[0]);
        if (!gx) return;
        const double* g = node.output->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
          double gs = 0.0;
          for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
          for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r * n + j] - (*probs)[r * n + j] * gs;
        }
      },
      "log_softmax");
}

/// Attention normalization with nonnegative per-key weights:
///   a[i,j] = w[j] exp(s[i,j]) / sum_k w[k] exp(s[i,k])
/// which equals softmax(s + log w) with log 0 = -inf. `scores` is
/// [G, Lq, Lk] with G = B * groups; `weights` is [B, Lk] shared by the
/// `groups` consecutive score blocks of a batch item. The weight gradient is
/// the continuous extension at w = 0, so unselected keys still receive a
/// straight-through signal.
inline Tensor masked_softmax(const Tensor& scores, const Tensor& weights, std::size_t groups = 1) {
  if (scores.rank() != 3 || weights.rank() != 2 || weights.dim(1) != scores.dim(2) ||
      weights.dim(0) * groups != scores.dim(0)) {
    throw DimensionError("masked_softmax shape mismatch: scores " + shape_str(scores.shape()) + ", weights " +
                         shape_str(weights.shape()));
  }
  const std::size_t G = scores.dim(0), Lq = scores.dim(1), Lk = scores.dim(2);
  const double* ps = scores.data().data();
  const double* pw = weights.data().data();
  std::vector<double> out(scores.numel(), 0.0);
  // ratio[i,j] = exp(s[i,j] - max) / Z_i, so a = w * ratio
  auto ratio = std::make_shared<std::vector<double>>(scores.numel(), 0.0);
  for (std::size_t gidx = 0; gidx < G; ++gidx) {
    const double* w = pw + (gidx / groups) * Lk;
    for (std::size_t i = 0; i < Lq; ++i) {
      const double* s = ps + (gidx * Lq + i) * Lk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < Lk; ++j) {
        if (w[j] < 0.0) throw std::invalid_argument("attention key weights must be nonnegative");
        if (w[j] > 0.0) mx = std::max(mx, s[j]);
      }
      if (!std::isfinite(mx)) throw std::invalid_argument("no attendable keys");
      double z = 0.0;
      for (std::size_t j = 0; j < Lk; ++j) {
        if (w[j] > 0.0) z += w[j] * std::exp(s[j] - mx);
      }
      const std::size_t base = (gidx * Lq + i) * Lk;
      for (std::size_t j = 0; j < Lk; ++j) {
        const double r = std::exp(std::min(s[j] - mx, 700.0)) / z;
        (*ratio)[base + j] = r;
        out[base + j] = w[j] > 0.0 ? w[j] * r : 0.0;
      }
    }
  }
  auto attn = std::make_shared<std::vector<double>>(out);
  return detail::make_result(
      scores.shape(), std::move(out), {scores.impl(), weights.impl()},
      [G, Lq, Lk, groups, ratio, attn](const Node& node) {
        double* gs = detail::grad_of(node.inputs[0]);
        double* gw = detail::grad_of(node.inputs[1]);
        const double* g = node.output->grad.data();
        for (std::size_t gidx = 0; gidx < G; ++gidx) {
          for (std::size_t i = 0; i < Lq; ++i) {
            const std::size_t base = (gidx * Lq + i) * Lk;
            double dot = 0.0;
            for (std::size_t j = 0; j < Lk; ++j) dot += g[base + j] * (*attn)[base + j];
            for (std::size_t j = 0; j < Lk; ++j) {
              const double centered = g[base + j] - dot;
              if (gs) gs[base + j] += (*attn)[base + j] * centered;
              if (gw) gw[(gidx / groups) * Lk + j] += (*ratio)[base + j] * centered;
            }
          }
        }
      },
      "masked_softmax");
}

/// Layer normalization over the last axis: gain * (x - mean) / sqrt(var + eps) + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const std::size_t d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm parameter width mismatch: input " + shape_str(x.shape()) + ", gain " +
                         shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  }
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm eps must be positive");
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* px = x.data().data();
  const double* pg = gain.data().data();
  const double* pb = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = pg[j] * h + pb[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x.impl(), gain.impl(), bias.impl()},
      [rows, d, xhat, inv_std](const Node& node) {
        double* gx = detail::grad_of(node.inputs[0]);
        double* gg = detail::grad_of(node.inputs[1]);
        double* gb = detail::grad_of(node.inputs[2]);
        const double* gain = node.inputs[1]->data.data();
        const double* g = node.output->grad.data();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* h = xhat->data() + r * d;
          const double* gr = g + r * d;
          if (gg || gb) {
            for (std::size_t j = 0; j < d; ++j) {
              if (gg) gg[j] += gr[j] * h[j];
              if (gb) gb[j] += gr[j];
            }
          }
          if (!gx) continue;
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = gr[j] * gain[j];
            mean_dh += dh;
            mean_dh_h += dh * h[j];
          }
          mean_dh *= inv_d;
          mean_dh_h *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = gr[j] * gain[j];
            gx[r * d + j] += (*inv_std)[r] * (dh - mean_dh - h[j] * mean_dh_h);
          }
        }
      },
      "layer_norm");
}

/// Arithmetic mean along `axis`; the axis is removed (a rank-1 input yields shape (1)).
inline Tensor mean_axis(const Tensor& x, std::ptrdiff_t axis) {
  const auto ax = detail::norm_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  Shape shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != ax) shape.push_back(x.shape()[i]);
  }
  if (shape.empty()) shape.push_back(1);
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const double* px = x.data().data();
  const double inv = 1.0 / static_cast<double>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.len; ++j) {
      for (std::size_t in = 0; in < sp.inner; ++in) out[o * sp.inner + in] += px[(o * sp.len + j) * sp.inner + in];
    }
  }
  for (double& v : out) v *= inv;
  return detail::make_result(
      std::move(shape), std::move(out), {x.impl()},
      [sp, inv](const Node& node) {
        double* gx = detail::grad_of(node.inputs[0]);
        if (!gx) return;
        const double* g = node.output->grad.data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t j = 0; j < sp.len; ++j) {
            for (std::size_t in = 0; in < sp.inner; ++in) gx[(o * sp.len + j) * sp.inner + in] += g[o * sp.inner + in] * inv;
          }
        }
      },
      "mean_axis");
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result(
      {1}, {s}, {x.impl()},
      [](const Node& node) {
        double* gx = detail::grad_of(node.inputs[0]);
        if (!gx) return;
        const double g = node.output->grad[0];
        for (std::size_t i = 0; i < node.inputs[0]->data.size(); ++i) gx[i] += g;
      },
      "sum");
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over rows of -log softmax(logits)[target].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
  if (logits.rank() != 2 || targets.size() != logits.dim(0)) {
    throw DimensionError("cross_entropy expects logits [b, k] and b targets, got " + shape_str(logits.shape()) +
                         " and " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  for (auto t : targets) {
    if (t >= k) throw std::out_of_range("cross_entropy target " + std::to_string(t) + " out of range for " + std::to_string(k) + " classes");
  }
  auto probs = std::make_shared<std::vector<double>>(b * k);
  double loss = 0.0;
  const double* pl = logits.data().data();
  for (std::size_t r = 0; r < b; ++r) {
    const double* row = pl + r * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    loss += lse - row[targets[r]];
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] = std::exp(row[j] - lse);
  }
  loss /= static_cast<double>(b);
  return detail::make_result(
      {1}, {loss}, {logits.impl()},
      [b, k, probs, targets](const Node& node) {
        double* gl = detail::grad_of(node.inputs[0]);
        if (!gl) return;
        const double g = node.output->grad[0] / static_cast<double>(b);
        for (std::size_t r = 0; r < b; ++r) {
          for (std::size_t j = 0; j < k; ++j) {
            gl[r * k + j] += g * ((*probs)[r * k + j] - (j == targets[r] ? 1.0 : 0.0));
          }
        }
      },
      "cross_entropy");
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return detail::make_result(
      {1}, {s / static_cast<double>(n)}, {a.impl(), b.impl()},
      [n](const Node& node) {
        const auto& A = node.inputs[0];
        const auto& B = node.inputs[1];
        double* ga = detail::grad_of(A);
        double* gb = detail::grad_of(B);
        const double g = node.output->grad[0] * 2.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double d = A->data[i] - B->data[i];
          if (ga) ga[i] += g * d;
          if (gb) gb[i] -= g * d;
        }
      },
      "mse");
}

// ---------------------------------------------------------------------------
// Layout

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return detail::make_result(
      std::move(shape), x.values(), {x.impl()},
      [](const Node& node) {
        double* gx = detail::grad_of(node.inputs[0]);
        if (!gx) return;
        const auto& g = node.output->grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      },
      "reshape");
}

inline Tensor detach(const Tensor& x) { return Tensor(x.shape(), x.values(), false); }

/// Concatenation along `axis`; all other dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::ptrdiff_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const auto ax = detail::norm_axis(axis, parts[0].rank());
  Shape shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) throw DimensionError("concat rank mismatch");
    probe[ax] = shape[ax];
    if (probe != shape) {
      throw DimensionError("concat shape mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    total += p.dim(static_cast<std::ptrdiff_t>(ax));
  }
  shape[ax] = total;
  const auto sp = detail::split_at(shape, ax);
  std::vector<double> out(shape_numel(shape));
  std::vector<ImplPtr> inputs;
  std::vector<std::size_t> lens;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(static_cast<std::ptrdiff_t>(ax));
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(p.data().data() + o * len * sp.inner, len * sp.inner,
                  out.data() + (o * total + offset) * sp.inner);
    }
    offset += len;
    inputs.push_back(p.impl());
    lens.push_back(len);
  }
  return detail::make_result(
      std::move(shape), std::move(out), std::move(inputs),
      [sp, lens, total](const Node& node) {
        const double* g = node.output->grad.data();
        std::size_t off = 0;
        for (std::size_t k = 0; k < lens.size(); ++k) {
          double* gp = detail::grad_of(node.inputs[k]);
          if (gp) {
            for (std::size_t o = 0; o < sp.outer; ++o) {
              const double* src = g + (o * total + off) * sp.inner;
              double* dst = gp + o * lens[k] * sp.inner;
              for (std::size_t i = 0; i < lens[k] * sp.inner; ++i) dst[i] += src[i];
            }
          }
          off += lens[k];
        }
      },
      "concat");
}

/// Gathers positions `indices` along `axis` (indices may repeat).
inline Tensor index_select(const Tensor& x, std::ptrdiff_t axis, const std::vector<std::size_t>& indices) {
  const auto ax = detail::norm_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  if (indices.empty()) throw DimensionError("index_select with no indices");
  for (auto i : indices) {
    if (i >= sp.len) throw std::out_of_range("index_select index " + std::to_string(i) + " out of range " + std::to_string(sp.len));
  }
  Shape shape = x.shape();
  shape[ax] = indices.size();
  const std::size_t n = indices.size();
  std::vector<double> out(shape_numel(shape));
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      std::copy_n(x.data().data() + (o * sp.len + indices[k]) * sp.inner, sp.inner, out.data() + (o * n + k) * sp.inner);
    }
  }
  return detail::make_result(
      std::move(shape), std::move(out), {x.impl()},
      [sp, indices, n](const Node& node) {
        double* gx = detail::grad_of(node.inputs[0]);
        if (!gx) return;
        const double* g = node.output->grad.data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t k = 0; k < n; ++k) {
            double* dst = gx + (o * sp.len + indices[k]) * sp.inner;
            const double* src = g + (o * n + k) * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
          }
        }
      },
      "index_select");
}

inline Tensor slice(const Tensor& x, std::ptrdiff_t axis, std::size_t begin, std::size_t end) {
  const auto ax = detail::norm_axis(axis, x.rank());
  if (begin >= end || end > x.shape()[ax]) {
    throw DimensionError("invalid slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_str(x.shape()));
  }
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return index_select(x, static_cast<std::ptrdiff_t>(ax), idx);
}

/// Repeats every element of the last axis `times` times consecutively.
inline Tensor repeat_interleave_last(const Tensor& x, std::size_t times) {
  Shape shape = x.shape();
  shape.back() *= times;
  std::vector<double> out(x.numel() * times);
  for (std::size_t i = 0; i < x.numel(); ++i) std::fill_n(out.data() + i * times, times, x[i]);
  return detail::make_result(
      std::move(shape), std::move(out), {x.impl()},
      [times](const Node& node) {
        double* gx = detail::grad_of(node.inputs[0]);
        if (!gx) return;
        const double* g = node.output->grad.data();
        for (std::size_t i = 0; i < node.inputs[0]->data.size(); ++i) {
          for (std::size_t r = 0; r < times; ++r) gx[i] += g[i * times + r];
        }
      },
      "repeat_interleave_last");
}

/// Stacks `n` copies of x along a new leading axis.
inline Tensor broadcast_leading(const Tensor& x, std::size_t n) {
  Shape shape{n};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  std::vector<double> out;
  out.reserve(x.numel() * n);
  for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), x.data().begin(), x.data().end());
  const std::size_t m = x.numel();
  return detail::make_result(
      std::move(shape), std::move(out), {x.impl()},
      [n, m](const Node& node) {
        double* gx = detail::grad_of(node.inputs[0]);
        if (!gx) return;
        const double* g = node.output->grad.data();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < m; ++j) gx[j] += g[i * m + j];
        }
      },
      "broadcast_leading");
}

/// Forward value of `hard`, gradient routed to `soft` unchanged
/// (equivalent to hard + soft - detach(soft)).
inline Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  if (hard.shape() != soft.shape()) {
    throw DimensionError("straight_through shape mismatch: " + shape_str(hard.shape()) + " vs " + shape_str(soft.shape()));
  }
  return detail::make_result(
      hard.shape(), hard.values(), {soft.impl()},
      [](const Node& node) {
        double* gs = detail::grad_of(node.inputs[0]);
        if (!gs) return;
        const auto& g = node.output->grad;
        for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
      },
      "straight_through");
}

/// Row lookup: ids index rows of table[V, d]; result shape is ids_shape + (d).
inline Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids, Shape ids_shape) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2, got " + shape_str(table.shape()));
  if (shape_numel(ids_shape) != ids.size()) throw DimensionError("embedding ids do not match shape " + shape_str(ids_shape));
  const std::size_t V = table.dim(0), d = table.dim(1);
  for (auto id : ids) {
    if (id >= V) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(V));
  }
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) std::copy_n(table.data().data() + ids[i] * d, d, out.data() + i * d);
  ids_shape.push_back(d);
  return detail::make_result(
      std::move(ids_shape), std::move(out), {table.impl()},
      [ids, d](const Node& node) {
        double* gt = detail::grad_of(node.inputs[0]);
        if (!gt) return;
        const double* g = node.output->grad.data();
        for (std::size_t i = 0; i < ids.size(); ++i) {
          for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
        }
      },
      "embedding");
}

/// [B, L, h*dh] -> [B*h, L, dh]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (heads == 1) return x;
  const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  if (D % heads != 0) throw DimensionError("width " + std::to_string(D) + " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = D / heads;
  std::vector<std::size_t> perm(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t j = 0; j < dh; ++j) perm[((b * heads + h) * L + l) * dh + j] = (b * L + l) * D + h * dh + j;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[perm[i]];
  return detail::make_result(
      {B * heads, L, dh}, std::move(out), {x.impl()},
      [perm](const Node& node) {
        double* gx = detail::grad_of(node.inputs[0]);
        if (!gx) return;
        const double* g = node.output->grad.data();
        for (std::size_t i = 0; i < perm.size(); ++i) gx[perm[i]] += g[i];
      },
      "split_heads");
}

/// [B*h, L, dh] -> [B, L, h*dh]
inline Tensor merge_heads(const Tensor& x, std::size_t heads) {
  if (heads == 1) return x;
  const std::size_t G = x.dim(0), L = x.dim(1), dh = x.dim(2), B = G / heads, D = dh * heads;
  std::vector<std::size_t> perm(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t j = 0; j < dh; ++j) perm[(b * L + l) * D + h * dh + j] = ((b * heads + h) * L + l) * dh + j;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[perm[i]];
  return detail::make_result(
      {B, L, D}, std::move(out), {x.impl()},
      [perm](const Node& node) {
        double* gx = detail::grad_of(node.inputs[0]);
        if (!gx) return;
        const double* g = node.output->grad.data();
        for (std::size_t i = 0; i < perm.size(); ++i) gx[perm[i]] += g[i];
      },
      "merge_heads");
}

}  // namespace vila
