#pragma once

// Attention and MLP building blocks shared by the frame selector and the
// query transformer.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vila/ops.hpp"
#include "vila/random.hpp"

namespace vila {

/// Named parameter handles, in canonical dotted-name order.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void append_named(NamedTensors& out, const std::string& prefix, const NamedTensors& items) {
  for (const auto& [name, t] : items) out.emplace_back(prefix + name, t);
}

/// Gaussian init with variance gain / fan_in.
inline Tensor random_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng, double gain = 1.0) {
  std::vector<double> v(fan_in * fan_out);
  const double sd = std::sqrt(gain / static_cast<double>(fan_in));
  for (auto& x : v) x = sd * rng.normal();
  return Tensor({fan_in, fan_out}, std::move(v), true);
}

inline Tensor identity_matrix(std::size_t d, bool requires_grad = true) {
  auto t = Tensor::zeros({d, d}, requires_grad);
  auto data = t.mutable_data();
  for (std::size_t i = 0; i < d; ++i) data[i * d + i] = 1.0;
  return t;
}

// ---------------------------------------------------------------------------
// Attention

struct AttentionParams {
  std::size_t d_model = 0;
  std::size_t num_heads = 1;
  Tensor wq, wk, wv, wo;  // [d_model, d_model], applied as x · W

  static AttentionParams random(std::size_t d_model, std::size_t num_heads, Rng& rng, double out_gain = 1.0) {
    AttentionParams p;
    p.d_model = d_model;
    p.num_heads = num_heads;
    p.wq = random_weight(d_model, d_model, rng);
    p.wk = random_weight(d_model, d_model, rng);
    p.wv = random_weight(d_model, d_model, rng);
    p.wo = random_weight(d_model, d_model, rng, out_gain);
    p.validate();
    return p;
  }

  void validate() const {
    if (num_heads == 0 || d_model % num_heads != 0) {
      throw std::invalid_argument("d_model " + std::to_string(d_model) + " must be a multiple of num_heads " +
                                  std::to_string(num_heads));
    }
    for (const Tensor* w : {&wq, &wk, &wv, &wo}) {
      if (w->shape() != Shape{d_model, d_model}) {
        throw DimensionError("attention weight must be " + shape_str({d_model, d_model}) + ", got " + shape_str(w->shape()));
      }
      for (double v : w->data()) {
        if (!std::isfinite(v)) throw std::invalid_argument("attention weight is not finite");
      }
    }
  }

  NamedTensors named() const { return {{"wq", wq}, {"wk", wk}, {"wv", wv}, {"wo", wo}}; }
};

struct AttentionResult {
  Tensor output;   // [b, Lq, d]
  Tensor weights;  // [b * heads, Lq, Lk]
};

/// Scaled dot-product attention of `queries` over `keys_values`.
/// `key_weights` ([b, Lk], entries in [0, 1]) multiplies each key's
/// unnormalized attention, i.e. adds log(weight) to the logits.
inline AttentionResult attend(const AttentionParams& p, const Tensor& queries, const Tensor& keys_values,
                              const Tensor* key_weights = nullptr) {
  if (queries.rank() != 3 || keys_values.rank() != 3 || queries.dim(2) != p.d_model ||
      keys_values.dim(2) != p.d_model || queries.dim(0) != keys_values.dim(0)) {
    throw DimensionError("attention expects [b, L, " + std::to_string(p.d_model) + "] inputs, got " +
                         shape_str(queries.shape()) + " and " + shape_str(keys_values.shape()));
  }
  const std::size_t h = p.num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(p.d_model / h));
  const Tensor q = split_heads(linear(queries, p.wq), h);
  const Tensor k = split_heads(linear(keys_values, p.wk), h);
  const Tensor v = split_heads(linear(keys_values, p.wv), h);
  const Tensor scores = scale(bmm_nt(q, k), inv_sqrt);
  Tensor weights;
  if (key_weights) {
    if (key_weights->shape() != Shape{keys_values.dim(0), keys_values.dim(1)}) {
      throw DimensionError("key mask must be " + shape_str({keys_values.dim(0), keys_values.dim(1)}) + ", got " +
                           shape_str(key_weights->shape()));
    }
    weights = masked_softmax(scores, *key_weights, h);
  } else {
    weights = softmax(scores, -1);
  }
  const Tensor ctx = merge_heads(bmm(weights, v), h);
  return {linear(ctx, p.wo), weights};
}

inline Tensor cross_attention(const AttentionParams& p, const Tensor& queries, const Tensor& keys_values,
                              const Tensor* key_weights = nullptr) {
  return attend(p, queries, keys_values, key_weights).output;
}

inline Tensor self_attention(const AttentionParams& p, const Tensor& tokens, const Tensor* key_weights = nullptr) {
  return attend(p, tokens, tokens, key_weights).output;
}

// ---------------------------------------------------------------------------
// MLP stacks

enum class LayerKind { Linear, LayerNorm, Relu, Gelu };

struct MlpLayer {
  LayerKind kind = LayerKind::Linear;
  Tensor weight;  // Linear: [in, out]; LayerNorm: gain [d]
  Tensor bias;    // Linear: [out] when has_bias; LayerNorm: [d]
  bool has_bias = false;
  double eps = 1e-5;
};

/// Ordered stack of FC / LN / activation layers.
struct MlpParams {
  std::vector<MlpLayer> layers;

  MlpParams& fc(Tensor w, std::optional<Tensor> b = std::nullopt) {
    MlpLayer l;
    l.kind = LayerKind::Linear;
    l.weight = std::move(w);
    if (b) {
      l.bias = std::move(*b);
      l.has_bias = true;
    }
    layers.push_back(std::move(l));
    return *this;
  }
  MlpParams& fc_random(std::size_t in, std::size_t out, Rng& rng, bool bias = true, double gain = 1.0) {
    return fc(random_weight(in, out, rng, gain),
              bias ? std::optional<Tensor>(Tensor::zeros({out}, true)) : std::nullopt);
  }
  MlpParams& layer_norm(std::size_t d, double eps = 1e-5) {
    MlpLayer l;
    l.kind = LayerKind::LayerNorm;
    l.weight = Tensor::full({d}, 1.0, true);
    l.bias = Tensor::zeros({d}, true);
    l.has_bias = true;
    l.eps = eps;
    layers.push_back(std::move(l));
    return *this;
  }
  MlpParams& relu() {
    layers.push_back(MlpLayer{LayerKind::Relu, {}, {}, false, 0.0});
    return *this;
  }
  MlpParams& gelu() {
    layers.push_back(MlpLayer{LayerKind::Gelu, {}, {}, false, 0.0});
    return *this;
  }

  std::size_t in_width() const {
    for (const auto& l : layers) {
      if (l.kind == LayerKind::Linear) return l.weight.dim(0);
      if (l.kind == LayerKind::LayerNorm) return l.weight.numel();
    }
    return 0;
  }
  std::size_t out_width() const {
    for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
      if (it->kind == LayerKind::Linear) return it->weight.dim(1);
      if (it->kind == LayerKind::LayerNorm) return it->weight.numel();
    }
    return 0;
  }

  /// Throws when consecutive layer widths do not compose.
  void validate() const {
    std::size_t width = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      std::size_t in = 0, out = 0;
      if (l.kind == LayerKind::Linear) {
        if (l.weight.rank() != 2) throw DimensionError("mlp layer " + std::to_string(i) + " weight must be rank 2");
        in = l.weight.dim(0);
        out = l.weight.dim(1);
        if (l.has_bias && l.bias.numel() != out) throw DimensionError("mlp layer " + std::to_string(i) + " bias width mismatch");
      } else if (l.kind == LayerKind::LayerNorm) {
        in = out = l.weight.numel();
      } else {
        continue;
      }
      if (width != 0 && width != in) {
        throw DimensionError("mlp layer " + std::to_string(i) + " expects width " + std::to_string(in) + " but receives " +
                             std::to_string(width));
      }
      width = out;
    }
  }

  NamedTensors named() const {
    NamedTensors out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string p = std::to_string(i) + ".";
      if (l.kind == LayerKind::Linear) {
        out.emplace_back(p + "weight", l.weight);
        if (l.has_bias) out.emplace_back(p + "bias", l.bias);
      } else if (l.kind == LayerKind::LayerNorm) {
        out.emplace_back(p + "gain", l.weight);
        out.emplace_back(p + "bias", l.bias);
      }
    }
    return out;
  }
};

inline Tensor mlp_apply(const MlpParams& mlp, const Tensor& x) {
  mlp.validate();
  if (mlp.in_width() != 0 && x.dim(-1) != mlp.in_width()) {
    throw DimensionError("mlp input width " + std::to_string(x.dim(-1)) + " does not match first layer width " +
                         std::to_string(mlp.in_width()));
  }
  Tensor h = x;
  for (const auto& l : mlp.layers) {
    switch (l.kind) {
      case LayerKind::Linear:
        h = linear(h, l.weight);
        if (l.has_bias) h = add(h, l.bias);
        break;
      case LayerKind::LayerNorm:
        h = layer_norm(h, l.weight, l.bias, l.eps);
        break;
      case LayerKind::Relu:
        h = relu(h);
        break;
      case LayerKind::Gelu:
        h = gelu(h);
        break;
    }
  }
  return h;
}

}  // namespace vila
