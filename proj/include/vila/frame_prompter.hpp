#pragma once

// Text-guided differentiable frame selector: pool, embed, segment,
// Gumbel-select, mask, and fuse with the question tokens.

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "vila/nn.hpp"

namespace vila {

enum class SamplingDesign { Segmented, FreeForm };

inline std::string to_string(SamplingDesign d) { return d == SamplingDesign::Segmented ? "segmented" : "free_form"; }
inline SamplingDesign design_from_string(const std::string& s) {
  if (s == "segmented") return SamplingDesign::Segmented;
  if (s == "free_form") return SamplingDesign::FreeForm;
  throw std::invalid_argument("design must be segmented or free_form, got " + s);
}

struct FramePrompterConfig {
  std::size_t T = 32;
  std::size_t S = 4;
  std::size_t N = 4;
  std::size_t C = 16;
  std::size_t d_model = 64;
  std::size_t num_heads = 1;
  std::size_t embed_hidden = 16;
  SamplingDesign design = SamplingDesign::Segmented;
  double tau_start = 1.0;
  double tau_end = 0.01;
  bool straight_through = true;

  std::size_t segment_len() const { return T / S; }

  void validate() const {
    if (T == 0 || N == 0 || C == 0 || d_model == 0 || embed_hidden == 0) {
      throw std::invalid_argument("frame prompter sizes must be positive");
    }
    if (S < 1 || S > T) throw std::invalid_argument("frame prompter needs T >= S >= 1");
    if (design == SamplingDesign::Segmented && T % S != 0) {
      throw std::invalid_argument("T (" + std::to_string(T) + ") must be divisible by S (" + std::to_string(S) + ")");
    }
    if (!(tau_end > 0.0) || tau_start < tau_end) throw std::invalid_argument("need tau_start >= tau_end > 0");
  }
};

struct FramePrompterParams {
  MlpParams embed;        // N -> hidden -> N with LN and ReLU in between
  MlpParams select_head;  // (T/S)*N -> T/S (segmented) or N -> 2 (free form)
  AttentionParams guide_attn;

  static FramePrompterParams init(const FramePrompterConfig& cfg, Rng& rng) {
    cfg.validate();
    FramePrompterParams p;
    p.embed.fc_random(cfg.N, cfg.embed_hidden, rng).layer_norm(cfg.embed_hidden).relu().fc_random(cfg.embed_hidden, cfg.N, rng);
    if (cfg.design == SamplingDesign::Segmented) {
      p.select_head.fc_random(cfg.segment_len() * cfg.N, cfg.segment_len(), rng);
    } else {
      p.select_head.fc_random(cfg.N, 2, rng);
    }
    p.guide_attn = AttentionParams::random(cfg.d_model, cfg.num_heads, rng);
    return p;
  }

  NamedTensors named() const {
    NamedTensors out;
    append_named(out, "embed.", embed.named());
    append_named(out, "select_head.", select_head.named());
    append_named(out, "guide_attn.", guide_attn.named());
    return out;
  }
};

/// hard/soft are [B, T]. For the segmented design per_segment is
/// [B, S, T/S]; for free form it is [B, 1, T] keep weights. `weights` is the
/// graph-attached mask used downstream: the straight-through value in
/// training (hard forward, soft gradient), otherwise hard or soft.
struct SelectionMask {
  Tensor hard;
  Tensor soft;
  Tensor per_segment;
  Tensor weights;
  std::vector<std::vector<std::size_t>> selected_indices;

  std::size_t batch() const { return hard.dim(0); }
  std::size_t frames() const { return hard.dim(1); }
};

// ---------------------------------------------------------------------------

/// x [B, T, N, C] -> mean over C -> per-frame embedding -> [B, T, N]
inline Tensor pool_and_embed(const Tensor& x, const FramePrompterParams& p, const FramePrompterConfig& cfg) {
  if (x.rank() != 4 || x.dim(1) != cfg.T || x.dim(2) != cfg.N || x.dim(3) != cfg.C) {
    throw DimensionError("frame prompter expects [B, " + std::to_string(cfg.T) + ", " + std::to_string(cfg.N) + ", " +
                         std::to_string(cfg.C) + "], got " + shape_str(x.shape()));
  }
  return mlp_apply(p.embed, mean_axis(x, 3));
}

/// embedded [B, T, N] -> contiguous chunks of T/S frames -> [B, S, T/S] logits
inline Tensor segment_logits(const Tensor& embedded, const FramePrompterParams& p, const FramePrompterConfig& cfg) {
  if (embedded.rank() != 3 || embedded.dim(1) != cfg.T || embedded.dim(2) != cfg.N) {
    throw DimensionError("segment_logits expects [B, " + std::to_string(cfg.T) + ", " + std::to_string(cfg.N) +
                         "], got " + shape_str(embedded.shape()));
  }
  if (cfg.T % cfg.S != 0) {
    throw std::invalid_argument("T (" + std::to_string(cfg.T) + ") must be divisible by S (" + std::to_string(cfg.S) + ")");
  }
  const std::size_t B = embedded.dim(0);
  return mlp_apply(p.select_head, reshape(embedded, {B, cfg.S, cfg.segment_len() * cfg.N}));
}

/// τ = tau_start · (tau_end / tau_start)^(step / total)
inline double tau_schedule(std::size_t step, std::size_t total_steps, const FramePrompterConfig& cfg) {
  if (total_steps == 0) throw std::invalid_argument("tau_schedule: total_steps must be positive");
  if (step > total_steps) throw std::invalid_argument("tau_schedule: step exceeds total_steps");
  if (step == 0) return cfg.tau_start;
  if (step == total_steps) return cfg.tau_end;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return cfg.tau_start * std::pow(cfg.tau_end / cfg.tau_start, frac);
}

namespace detail {

inline void check_noise(const Tensor& logits, std::span<const double> noise) {
  if (noise.size() != logits.numel()) {
    throw DimensionError("Gumbel noise has " + std::to_string(noise.size()) + " entries, logits have " +
                         std::to_string(logits.numel()));
  }
}

/// One-hot of argmax(row) for each last-axis row; lowest index wins ties.
inline std::vector<double> row_argmax_onehot(std::span<const double> v, std::size_t len) {
  std::vector<double> out(v.size(), 0.0);
  for (std::size_t r = 0; r < v.size() / len; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < len; ++j) {
      if (v[r * len + j] > v[r * len + best]) best = j;
    }
    out[r * len + best] = 1.0;
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> segment_indices(const std::vector<double>& hard, std::size_t B,
                                                             std::size_t T) {
  std::vector<std::vector<std::size_t>> idx(B);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      if (hard[b * T + t] > 0.5) idx[b].push_back(t);
    }
  }
  return idx;
}

/// log_softmax(logits) + noise, the perturbed log-probabilities.
inline Tensor perturbed_logp(const Tensor& logits, std::span<const double> noise) {
  check_noise(logits, noise);
  const Tensor g(logits.shape(), std::vector<double>(noise.begin(), noise.end()));
  return add(log_softmax(logits), g);
}

}  // namespace detail

/// Gumbel-max per segment with explicit noise (zeros give the noiseless argmax).
inline SelectionMask gumbel_sample_hard(const Tensor& logits, std::span<const double> noise) {
  if (logits.rank() != 3) throw DimensionError("segment logits must be [B, S, T/S], got " + shape_str(logits.shape()));
  NoGradGuard ng;
  const std::size_t B = logits.dim(0), S = logits.dim(1), L = logits.dim(2), T = S * L;
  const Tensor z = detail::perturbed_logp(logits, noise);
  auto hard = detail::row_argmax_onehot(z.data(), L);
  SelectionMask m;
  m.selected_indices = detail::segment_indices(hard, B, T);
  m.per_segment = Tensor({B, S, L}, hard);
  m.hard = Tensor({B, T}, hard);
  m.soft = m.hard;
  m.weights = m.hard;
  return m;
}

inline SelectionMask gumbel_sample_hard(const Tensor& logits, Rng& rng) {
  const auto noise = rng.gumbel_vector(logits.numel());
  return gumbel_sample_hard(logits, noise);
}

/// Relaxed per-segment weights softmax((log p + g) / τ); with straight_through
/// the forward value is the hard one-hot of the same perturbed logits.
inline SelectionMask gumbel_sample_soft(const Tensor& logits, double tau, std::span<const double> noise,
                                        bool straight_through) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature tau must be positive, got " + std::to_string(tau));
  if (logits.rank() != 3) throw DimensionError("segment logits must be [B, S, T/S], got " + shape_str(logits.shape()));
  const std::size_t B = logits.dim(0), S = logits.dim(1), L = logits.dim(2), T = S * L;
  const Tensor z = detail::perturbed_logp(logits, noise);
  const Tensor soft = softmax(scale(z, 1.0 / tau), -1);
  auto hard = detail::row_argmax_onehot(z.data(), L);
  SelectionMask m;
  m.selected_indices = detail::segment_indices(hard, B, T);
  m.hard = Tensor({B, T}, hard);
  m.soft = reshape(soft, {B, T});
  m.per_segment = straight_through ? vila::straight_through(Tensor({B, S, L}, hard), soft) : soft;
  m.weights = reshape(m.per_segment, {B, T});
  return m;
}

inline SelectionMask gumbel_sample_soft(const Tensor& logits, double tau, Rng& rng, bool straight_through) {
  const auto noise = rng.gumbel_vector(logits.numel());
  return gumbel_sample_soft(logits, tau, noise, straight_through);
}

/// Per-frame keep/drop logits [B, T, 2] (class 1 = keep) for the free-form design.
inline Tensor free_form_logits(const Tensor& embedded, const FramePrompterParams& p) {
  if (embedded.rank() != 3) throw DimensionError("free_form_logits expects [B, T, N], got " + shape_str(embedded.shape()));
  return mlp_apply(p.select_head, embedded);
}

/// Independent 2-class Gumbel-Softmax per frame; the selected count varies.
inline SelectionMask free_form_sample(const Tensor& keep_logits, double tau, std::span<const double> noise,
                                      bool straight_through) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature tau must be positive, got " + std::to_string(tau));
  if (keep_logits.rank() != 3 || keep_logits.dim(2) != 2) {
    throw DimensionError("free-form logits must be [B, T, 2], got " + shape_str(keep_logits.shape()));
  }
  const std::size_t B = keep_logits.dim(0), T = keep_logits.dim(1);
  const Tensor z = detail::perturbed_logp(keep_logits, noise);
  const auto onehot = detail::row_argmax_onehot(z.data(), 2);
  std::vector<double> keep(B * T);
  for (std::size_t i = 0; i < B * T; ++i) keep[i] = onehot[2 * i + 1];
  const Tensor soft_keep = reshape(slice(softmax(scale(z, 1.0 / tau), -1), 2, 1, 2), {B, T});
  SelectionMask m;
  m.selected_indices = detail::segment_indices(keep, B, T);
  m.hard = Tensor({B, T}, keep);
  m.soft = soft_keep;
  m.weights = straight_through ? vila::straight_through(m.hard, soft_keep) : soft_keep;
  m.per_segment = reshape(m.weights, {B, 1, T});
  return m;
}

inline SelectionMask free_form_mask(const Tensor& embedded, const FramePrompterParams& p, double tau, Rng& rng,
                                    bool straight_through = true) {
  const Tensor logits = free_form_logits(embedded, p);
  const auto noise = rng.gumbel_vector(logits.numel());
  return free_form_sample(logits, tau, noise, straight_through);
}

// ---------------------------------------------------------------------------
// Masking and text-guided fusion

enum class FuseMode { Hard, Soft };

/// tokens [B, T, N, d] -> [B, k*N, d] holding the listed frames of each row.
/// Every row must list the same number of frames.
inline Tensor gather_frames(const Tensor& tokens, const std::vector<std::vector<std::size_t>>& frames) {
  const std::size_t B = tokens.dim(0), N = tokens.dim(2), d = tokens.dim(3);
  if (frames.size() != B) throw DimensionError("gather_frames needs one index list per batch row");
  const std::size_t k = frames[0].size();
  if (k == 0) throw std::invalid_argument("no attendable keys: empty frame selection");
  bool same = true;
  for (std::size_t b = 1; b < B && same; ++b) same = frames[b] == frames[0];
  if (same) return reshape(index_select(tokens, 1, frames[0]), {B, k * N, d});
  std::vector<Tensor> rows;
  for (std::size_t b = 0; b < B; ++b) {
    if (frames[b].size() != k) throw DimensionError("gather_frames rows select different frame counts");
    rows.push_back(index_select(slice(tokens, 0, b, b + 1), 1, frames[b]));
  }
  return reshape(concat(rows, 0), {B, k * N, d});
}

/// Frame mask [B, T] -> per-token key weights [B, T*N].
inline Tensor frame_mask_to_keys(const Tensor& frame_weights, std::size_t patches) {
  return repeat_interleave_last(frame_weights, patches);
}

/// X_LLM = CrossAttn(text, X·M). Hard mode gathers the selected frames;
/// soft mode keeps all frames and weights each key by its frame's mask value.
inline Tensor apply_mask_and_fuse(const Tensor& tokens, const SelectionMask& mask, const Tensor& text,
                                  const FramePrompterParams& p, FuseMode mode) {
  if (tokens.rank() != 4 || tokens.dim(0) != mask.batch() || tokens.dim(1) != mask.frames()) {
    throw DimensionError("apply_mask_and_fuse: tokens " + shape_str(tokens.shape()) + " do not match mask " +
                         shape_str(mask.hard.shape()));
  }
  const std::size_t B = tokens.dim(0), T = tokens.dim(1), N = tokens.dim(2), d = tokens.dim(3);
  for (const auto& row : mask.selected_indices) {
    if (row.empty()) throw std::invalid_argument("no attendable keys: empty frame selection");
  }
  if (mode == FuseMode::Hard) {
    bool equal_counts = true;
    for (const auto& row : mask.selected_indices) equal_counts &= row.size() == mask.selected_indices[0].size();
    if (equal_counts) return cross_attention(p.guide_attn, text, gather_frames(tokens, mask.selected_indices));
    // Ragged free-form selections: exact key removal through a 0/1 mask.
    const Tensor keys = frame_mask_to_keys(mask.hard, N);
    return cross_attention(p.guide_attn, text, reshape(tokens, {B, T * N, d}), &keys);
  }
  const Tensor keys = frame_mask_to_keys(mask.weights, N);
  return cross_attention(p.guide_attn, text, reshape(tokens, {B, T * N, d}), &keys);
}

struct SelectMode {
  enum class Kind { Train, Infer, InferSoft };
  Kind kind = Kind::Infer;
  double tau = 1.0;
  Rng* rng = nullptr;  // Train only

  static SelectMode train(double tau, Rng& rng) { return {Kind::Train, tau, &rng}; }
  static SelectMode infer() { return {Kind::Infer, 0.0, nullptr}; }
  static SelectMode infer_soft(double tau) { return {Kind::InferSoft, tau, nullptr}; }
};

/// Selection logits of either design: [B, S, T/S] or [B, T, 2].
inline Tensor selection_logits(const Tensor& features, const FramePrompterParams& p, const FramePrompterConfig& cfg) {
  const Tensor e = pool_and_embed(features, p, cfg);
  return cfg.design == SamplingDesign::Segmented ? segment_logits(e, p, cfg) : free_form_logits(e, p);
}

/// Samples a mask from selection logits according to the mode.
inline SelectionMask sample_mask(const Tensor& logits, const FramePrompterConfig& cfg, const SelectMode& mode) {
  const bool seg = cfg.design == SamplingDesign::Segmented;
  if (mode.kind == SelectMode::Kind::Train) {
    if (!mode.rng) throw std::invalid_argument("training selection needs an rng");
    const auto noise = mode.rng->gumbel_vector(logits.numel());
    return seg ? gumbel_sample_soft(logits, mode.tau, noise, cfg.straight_through)
               : free_form_sample(logits, mode.tau, noise, cfg.straight_through);
  }
  const std::vector<double> zeros(logits.numel(), 0.0);
  if (mode.kind == SelectMode::Kind::InferSoft) {
    return seg ? gumbel_sample_soft(logits, mode.tau, zeros, false) : free_form_sample(logits, mode.tau, zeros, false);
  }
  NoGradGuard ng;
  return seg ? gumbel_sample_hard(logits, zeros) : free_form_sample(logits, 1.0, zeros, false);
}

struct FrameSelection {
  Tensor x_llm;  // [B, Lt, d]
  SelectionMask mask;
};

/// features [B, T, N, C] drive the selection; tokens [B, T, N, d] are fused
/// with the text queries [B, Lt, d].
inline FrameSelection select_frames(const Tensor& features, const Tensor& tokens, const Tensor& text,
                                    const FramePrompterParams& p, const FramePrompterConfig& cfg,
                                    const SelectMode& mode) {
  FrameSelection out;
  out.mask = sample_mask(selection_logits(features, p, cfg), cfg, mode);
  const FuseMode fuse = mode.kind == SelectMode::Kind::Infer ? FuseMode::Hard : FuseMode::Soft;
  out.x_llm = apply_mask_and_fuse(tokens, out.mask, text, p, fuse);
  return out;
}

}  // namespace vila
