#pragma once

// Query transformer with learnable queries (teacher and student instances)
// and the distillation decoder that maps student features onto the teacher's.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "vila/frame_prompter.hpp"
#include "vila/nn.hpp"

namespace vila {

struct QFormerConfig {
  std::size_t d_model = 64;
  std::size_t num_heads = 1;
  std::size_t num_queries = 8;
  std::size_t depth = 1;
  std::size_t channels = 16;  // C of the incoming visual features
  std::size_t patches = 4;    // N
  std::size_t frame_budget = 32;

  void validate() const {
    if (num_queries == 0) throw std::invalid_argument("QFormer needs at least one query token");
    if (depth == 0) throw std::invalid_argument("QFormer depth must be at least 1");
    if (frame_budget == 0 || patches == 0 || channels == 0) throw std::invalid_argument("QFormer sizes must be positive");
    if (num_heads == 0 || d_model % num_heads != 0) throw std::invalid_argument("d_model must be a multiple of num_heads");
  }
};

struct QFormerParams {
  QFormerConfig cfg;
  Tensor query_tokens;  // [Q, d]
  Tensor visual_proj;   // [C, d]
  Tensor patch_pos;     // [N, d]
  std::vector<AttentionParams> self_attn;
  AttentionParams cross_attn;

  static QFormerParams init(const QFormerConfig& cfg, Rng& rng) {
    cfg.validate();
    QFormerParams p;
    p.cfg = cfg;
    p.query_tokens = Tensor({cfg.num_queries, cfg.d_model}, random_weight(cfg.d_model, cfg.num_queries, rng, 1.0).values(), true);
    p.visual_proj = random_weight(cfg.channels, cfg.d_model, rng);
    p.patch_pos = Tensor({cfg.patches, cfg.d_model}, random_weight(cfg.d_model, cfg.patches, rng, 0.25).values(), true);
    for (std::size_t l = 0; l < cfg.depth; ++l) p.self_attn.push_back(AttentionParams::random(cfg.d_model, cfg.num_heads, rng));
    p.cross_attn = AttentionParams::random(cfg.d_model, cfg.num_heads, rng);
    return p;
  }

  NamedTensors named() const {
    NamedTensors out{{"query_tokens", query_tokens}, {"visual_proj", visual_proj}, {"patch_pos", patch_pos}};
    for (std::size_t l = 0; l < self_attn.size(); ++l) append_named(out, "self_attn." + std::to_string(l) + ".", self_attn[l].named());
    append_named(out, "cross_attn.", cross_attn.named());
    return out;
  }
};

/// features [B, T, N, C] -> tokens [B, T, N, d] (projection plus patch position).
inline Tensor visual_tokens(const QFormerParams& p, const Tensor& features) {
  if (features.rank() != 4 || features.dim(2) != p.cfg.patches || features.dim(3) != p.cfg.channels) {
    throw DimensionError("visual_tokens expects [B, T, " + std::to_string(p.cfg.patches) + ", " +
                         std::to_string(p.cfg.channels) + "], got " + shape_str(features.shape()));
  }
  return add(linear(features, p.visual_proj), p.patch_pos);
}

/// X' = CrossAttn(text, SelfAttn([q; visual])[query rows]).
/// visual [B, Lv, d]; text [B, Lq, d]; optional key_weights [B, Lv] mask
/// visual keys (query positions are always attendable). Without a mask the
/// visual length must fit the frame budget.
inline Tensor qformer_forward(const QFormerParams& p, const Tensor& visual, const Tensor& text,
                              const Tensor* key_weights = nullptr) {
  const std::size_t d = p.cfg.d_model, Q = p.cfg.num_queries;
  if (visual.rank() != 3 || text.rank() != 3 || visual.dim(2) != d || text.dim(2) != d || visual.dim(0) != text.dim(0)) {
    throw DimensionError("qformer_forward expects [B, L, " + std::to_string(d) + "] inputs, got " +
                         shape_str(visual.shape()) + " and " + shape_str(text.shape()));
  }
  const std::size_t B = visual.dim(0), Lv = visual.dim(1);
  if (!key_weights && Lv > p.cfg.frame_budget * p.cfg.patches) {
    throw std::invalid_argument("frame budget exceeded: " + std::to_string(Lv) + " visual tokens > " +
                                std::to_string(p.cfg.frame_budget) + " frames x " + std::to_string(p.cfg.patches) +
                                " patches");
  }
  Tensor keys_w;
  if (key_weights) {
    if (key_weights->shape() != Shape{B, Lv}) {
      throw DimensionError("QFormer key mask must be " + shape_str({B, Lv}) + ", got " + shape_str(key_weights->shape()));
    }
    keys_w = concat({Tensor::full({B, Q}, 1.0), *key_weights}, 1);
  }
  const Tensor* kw = key_weights ? &keys_w : nullptr;

  Tensor seq = concat({broadcast_leading(p.query_tokens, B), visual}, 1);  // [B, Q + Lv, d]
  for (std::size_t l = 0; l + 1 < p.self_attn.size(); ++l) seq = self_attention(p.self_attn[l], seq, kw);
  const Tensor q_rows = slice(seq, 1, 0, Q);
  const Tensor q_out = attend(p.self_attn.back(), q_rows, seq, kw).output;  // [B, Q, d]
  return cross_attention(p.cross_attn, text, q_out);
}

// ---------------------------------------------------------------------------
// Distillation

enum class DecoderVariant { FC, FC_LN, FC_LN_GELU_FC };

inline std::string to_string(DecoderVariant v) {
  switch (v) {
    case DecoderVariant::FC: return "FC";
    case DecoderVariant::FC_LN: return "FC+LN";
    case DecoderVariant::FC_LN_GELU_FC: return "FC+LN+GELU+FC";
  }
  return "?";
}
inline DecoderVariant decoder_from_string(const std::string& s) {
  if (s == "FC" || s == "fc") return DecoderVariant::FC;
  if (s == "FC+LN" || s == "fc_ln") return DecoderVariant::FC_LN;
  if (s == "FC+LN+GELU+FC" || s == "fc_ln_gelu_fc") return DecoderVariant::FC_LN_GELU_FC;
  throw std::invalid_argument("decoder must be FC, FC+LN or FC+LN+GELU+FC, got " + s);
}

struct DistillDecoderParams {
  DecoderVariant variant = DecoderVariant::FC_LN;
  MlpParams decoder;

  static DistillDecoderParams init(DecoderVariant v, std::size_t d_student, std::size_t d_teacher, Rng& rng) {
    DistillDecoderParams p;
    p.variant = v;
    // Identity start when widths agree: D(x_student) begins as a normalized
    // copy of the student feature, so distillation pulls the student itself
    // toward the teacher's space.
    if (d_student == d_teacher) {
      p.decoder.fc(identity_matrix(d_student), Tensor::zeros({d_teacher}, true));
    } else {
      p.decoder.fc_random(d_student, d_teacher, rng);
    }
    if (v != DecoderVariant::FC) p.decoder.layer_norm(d_teacher);
    if (v == DecoderVariant::FC_LN_GELU_FC) p.decoder.gelu().fc_random(d_teacher, d_teacher, rng);
    return p;
  }

  NamedTensors named() const { return decoder.named(); }
};

inline Tensor distill_decode(const DistillDecoderParams& dec, const Tensor& x_student) {
  return mlp_apply(dec.decoder, x_student);
}

/// MSE(D(x_student), x_teacher); the teacher side never receives gradient.
inline Tensor distill_loss(const DistillDecoderParams& dec, const Tensor& x_student, const Tensor& x_teacher) {
  const Tensor decoded = distill_decode(dec, x_student);
  if (decoded.shape() != x_teacher.shape()) {
    throw DimensionError("decoded student " + shape_str(decoded.shape()) + " does not match teacher " +
                         shape_str(x_teacher.shape()));
  }
  return mse(decoded, detach(x_teacher));
}

/// Mean over rows of |a ∩ b| / |a|; directional (normalized by a).
inline double selection_overlap(const std::vector<std::vector<std::size_t>>& a,
                                const std::vector<std::vector<std::size_t>>& b) {
  if (a.size() != b.size()) throw DimensionError("selection_overlap batch sizes differ");
  if (a.empty()) throw std::invalid_argument("selection_overlap: empty selection");
  double total = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r) {
    if (a[r].empty()) throw std::invalid_argument("selection_overlap: empty selection");
    const std::set<std::size_t> sb(b[r].begin(), b[r].end());
    std::size_t common = 0;
    for (auto i : std::set<std::size_t>(a[r].begin(), a[r].end())) common += sb.count(i);
    total += static_cast<double>(common) / static_cast<double>(std::set<std::size_t>(a[r].begin(), a[r].end()).size());
  }
  return total / static_cast<double>(a.size());
}

inline double selection_overlap(const SelectionMask& a, const SelectionMask& b) {
  if (a.frames() != b.frames()) {
    throw DimensionError("selection_overlap: masks cover " + std::to_string(a.frames()) + " and " +
                         std::to_string(b.frames()) + " frames");
  }
  return selection_overlap(a.selected_indices, b.selected_indices);
}

}  // namespace vila
