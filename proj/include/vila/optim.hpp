#pragma once

// AdamW with decoupled weight decay, cosine learning-rate schedule and
// global-norm gradient clipping.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "vila/nn.hpp"

namespace vila {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One update: p <- p(1 - lr*wd), then the bias-corrected Adam step.
inline void adamw_step(const NamedTensors& params, AdamWState& st, double lr, const AdamWConfig& cfg) {
  if (st.m.empty()) {
    for (const auto& [name, p] : params) {
      st.m.emplace_back(p.numel(), 0.0);
      st.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw std::invalid_argument("optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = params[i].second.grad();
    for (double x : g) {
      if (!std::isfinite(x)) throw NonFiniteGradient("non-finite gradient in parameter " + params[i].first);
    }
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = st.m[i];
    auto& v = st.v[i];
    if (m.size() != w.size()) throw DimensionError("optimizer state shape mismatch for " + params[i].first);
    for (std::size_t j = 0; j < w.size(); ++j) {
      w[j] *= 1.0 - lr * cfg.weight_decay;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.eps);
    }
  }
}

inline double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min) {
  if (total == 0) throw std::invalid_argument("cosine_lr: total must be positive");
  if (step > total) throw std::invalid_argument("cosine_lr: step exceeds total");
  if (step == total) return lr_min;
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

inline double grad_global_norm(const NamedTensors& params) {
  double s = 0.0;
  for (const auto& [name, p] : params) {
    for (double g : p.grad()) s += g * g;
  }
  return std::sqrt(s);
}

/// Rescales gradients so their global norm is at most max_norm; returns the
/// norm measured before clipping.
inline double clip_grad_norm(const NamedTensors& params, double max_norm) {
  const double norm = grad_global_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double c = max_norm / norm;
    for (const auto& [name, p] : params) {
      Tensor t = p;
      for (auto& g : t.mutable_grad()) g *= c;
    }
  }
  return norm;
}

}  // namespace vila
