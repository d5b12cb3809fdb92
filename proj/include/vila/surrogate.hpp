#pragma once

// Small stand-ins for the frozen pre-trained endpoints: a fixed linear visual
// encoder, a token embedder, and a bilinear answer scorer in place of the
// language model.

#include <string>
#include <vector>

#include "vila/nn.hpp"

namespace vila {

struct SurrogateVisualEncoder {
  Tensor projection;  // [raw_dim, C], never trainable
  std::size_t patches = 0;

  static SurrogateVisualEncoder make(std::size_t raw_dim, std::size_t channels, std::size_t patches, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xE1C0DE));
    SurrogateVisualEncoder enc;
    enc.projection = random_weight(raw_dim, channels, rng);
    enc.projection.set_requires_grad(false);
    enc.patches = patches;
    return enc;
  }

  std::size_t raw_dim() const { return projection.dim(0); }
  std::size_t channels() const { return projection.dim(1); }
};

/// raw [B, T, N, raw_dim] -> features [B, T, N, C]; a fixed per-patch linear map.
inline Tensor encode_video(const Tensor& raw, const SurrogateVisualEncoder& enc) {
  if (raw.rank() != 4 || raw.dim(2) != enc.patches || raw.dim(3) != enc.raw_dim()) {
    throw DimensionError("encode_video expects [B, T, " + std::to_string(enc.patches) + ", " +
                         std::to_string(enc.raw_dim()) + "], got " + shape_str(raw.shape()));
  }
  return linear(raw, enc.projection);
}

struct SurrogateTextEncoder {
  Tensor embedding;  // [V, d]
  Tensor position;   // [Lmax, d]

  static SurrogateTextEncoder make(std::size_t vocab, std::size_t max_len, std::size_t d, Rng& rng) {
    SurrogateTextEncoder t;
    t.embedding = random_weight(d, vocab, rng);  // unit-scale rows
    t.embedding = Tensor({vocab, d}, t.embedding.values(), true);
    t.position = random_weight(d, max_len, rng, 0.25);
    t.position = Tensor({max_len, d}, t.position.values(), true);
    return t;
  }

  std::size_t vocab() const { return embedding.dim(0); }
  std::size_t width() const { return embedding.dim(1); }
  NamedTensors named() const { return {{"embedding", embedding}, {"position", position}}; }
};

/// tokens: B rows of equal length L -> [B, L, d] (embedding + position).
inline Tensor encode_text(const std::vector<std::vector<std::size_t>>& tokens, const SurrogateTextEncoder& enc) {
  if (tokens.empty() || tokens[0].empty()) throw DimensionError("encode_text needs a nonempty batch");
  const std::size_t L = tokens[0].size();
  if (L > enc.position.dim(0)) throw DimensionError("token sequence longer than the positional table");
  std::vector<std::size_t> flat;
  for (const auto& row : tokens) {
    if (row.size() != L) throw DimensionError("encode_text rows must share one length");
    for (auto id : row) {
      if (id >= enc.vocab()) throw std::out_of_range("token id " + std::to_string(id) + " out of vocabulary");
    }
    flat.insert(flat.end(), row.begin(), row.end());
  }
  const Tensor e = embedding(enc.embedding, flat, {tokens.size(), L});
  return add(e, slice(enc.position, 0, 0, L));
}

/// choices: [B][A] token lists of equal length -> [B, A, d], mean over each list.
inline Tensor encode_choices(const std::vector<std::vector<std::vector<std::size_t>>>& choices,
                             const SurrogateTextEncoder& enc) {
  std::vector<std::vector<std::size_t>> rows;
  for (const auto& sample : choices) rows.insert(rows.end(), sample.begin(), sample.end());
  const std::size_t B = choices.size(), A = choices.at(0).size();
  const Tensor e = mean_axis(encode_text(rows, enc), 1);  // [B*A, d]
  return reshape(e, {B, A, enc.width()});
}

struct AnswerHead {
  Tensor score;  // [d, d]

  static AnswerHead make(std::size_t d, Rng& rng) { return {random_weight(d, d, rng)}; }
  NamedTensors named() const { return {{"score", score}}; }
};

/// logit[b, a] = mean_t(x_llm[b, t]) · score · choice[b, a]
inline Tensor score_answers(const Tensor& x_llm, const Tensor& choices, const AnswerHead& head) {
  if (choices.rank() != 3 || choices.dim(1) < 2) {
    throw std::invalid_argument("score_answers needs at least two answer choices, got " + shape_str(choices.shape()));
  }
  if (x_llm.rank() != 3 || x_llm.dim(0) != choices.dim(0) || x_llm.dim(2) != choices.dim(2)) {
    throw DimensionError("score_answers shape mismatch: " + shape_str(x_llm.shape()) + " vs " + shape_str(choices.shape()));
  }
  const std::size_t B = x_llm.dim(0), d = x_llm.dim(2), A = choices.dim(1);
  const Tensor pooled = mean_axis(x_llm, 1);                         // [B, d]
  const Tensor projected = reshape(linear(pooled, head.score), {B, d, 1});
  return reshape(bmm(choices, projected), {B, A});
}

enum class VqaLossKind { CrossEntropy, MseOneHot };

inline std::string to_string(VqaLossKind k) { return k == VqaLossKind::CrossEntropy ? "cross_entropy" : "mse_onehot"; }
inline VqaLossKind vqa_loss_from_string(const std::string& s) {
  if (s == "cross_entropy") return VqaLossKind::CrossEntropy;
  if (s == "mse_onehot") return VqaLossKind::MseOneHot;
  throw std::invalid_argument("vqa_loss must be cross_entropy or mse_onehot, got " + s);
}

inline Tensor vqa_loss(const Tensor& logits, const std::vector<std::size_t>& answers,
                       VqaLossKind kind = VqaLossKind::CrossEntropy) {
  if (kind == VqaLossKind::CrossEntropy) return cross_entropy(logits, answers);
  const std::size_t B = logits.dim(0), A = logits.dim(1);
  std::vector<double> target(B * A, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    if (answers.at(b) >= A) throw std::out_of_range("answer index out of range");
    target[b * A + answers[b]] = 1.0;
  }
  return mse(softmax(logits, -1), Tensor({B, A}, std::move(target)));
}

}  // namespace vila
