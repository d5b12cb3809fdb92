#pragma once

// The assembled pipeline: surrogate encoders, teacher and student query
// transformers, frame prompter, distillation decoder and answer head.

#include <string>
#include <vector>

#include "vila/frame_prompter.hpp"
#include "vila/qformer.hpp"
#include "vila/surrogate.hpp"
#include "vila/synth_data.hpp"

namespace vila {

struct ModelConfig {
  std::size_t channels = 16;  // C
  std::size_t d_model = 64;
  std::size_t num_heads = 1;
  std::size_t num_queries = 8;
  std::size_t depth = 1;
  std::size_t embed_hidden = 16;
  std::size_t vocab = 64;
  std::size_t max_text_len = 8;
  std::size_t S = 4;
  SamplingDesign design = SamplingDesign::Segmented;
  double tau_start = 1.0;
  double tau_end = 0.01;
  bool straight_through = true;
  DecoderVariant decoder = DecoderVariant::FC_LN;

  FramePrompterConfig prompter(const DatasetSpec& data) const {
    FramePrompterConfig c;
    c.T = data.T;
    c.S = S;
    c.N = data.N;
    c.C = channels;
    c.d_model = d_model;
    c.num_heads = num_heads;
    c.embed_hidden = embed_hidden;
    c.design = design;
    c.tau_start = tau_start;
    c.tau_end = tau_end;
    c.straight_through = straight_through;
    return c;
  }

  QFormerConfig qformer(const DatasetSpec& data, std::size_t frame_budget) const {
    return {d_model, num_heads, num_queries, depth, channels, data.N, frame_budget};
  }

  void validate(const DatasetSpec& data) const {
    prompter(data).validate();
    qformer(data, data.T).validate();
    const Vocab v{.num_attributes = data.num_attributes, .A = data.A};
    if (v.size() > vocab) {
      throw std::invalid_argument("vocab " + std::to_string(vocab) + " is smaller than the " + std::to_string(v.size()) +
                                  " tokens the dataset uses");
    }
    if (max_text_len < 2) throw std::invalid_argument("max_text_len must be at least 2");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& m) {
  j = {{"channels", m.channels},         {"d_model", m.d_model},
       {"num_heads", m.num_heads},       {"num_queries", m.num_queries},
       {"depth", m.depth},               {"embed_hidden", m.embed_hidden},
       {"vocab", m.vocab},               {"max_text_len", m.max_text_len},
       {"S", m.S},                       {"design", to_string(m.design)},
       {"tau_start", m.tau_start},       {"tau_end", m.tau_end},
       {"straight_through", m.straight_through}, {"decoder", to_string(m.decoder)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& m) {
  const ModelConfig d;
  m.channels = j.value("channels", d.channels);
  m.d_model = j.value("d_model", d.d_model);
  m.num_heads = j.value("num_heads", d.num_heads);
  m.num_queries = j.value("num_queries", d.num_queries);
  m.depth = j.value("depth", d.depth);
  m.embed_hidden = j.value("embed_hidden", d.embed_hidden);
  m.vocab = j.value("vocab", d.vocab);
  m.max_text_len = j.value("max_text_len", d.max_text_len);
  m.S = j.value("S", d.S);
  m.design = design_from_string(j.value("design", to_string(d.design)));
  m.tau_start = j.value("tau_start", d.tau_start);
  m.tau_end = j.value("tau_end", d.tau_end);
  m.straight_through = j.value("straight_through", d.straight_through);
  m.decoder = decoder_from_string(j.value("decoder", to_string(d.decoder)));
}

struct VilaModel {
  DatasetSpec data;
  ModelConfig cfg;
  SurrogateVisualEncoder visual;
  SurrogateTextEncoder text;
  AnswerHead head;
  QFormerParams teacher;
  QFormerParams student;
  FramePrompterParams prompter;
  DistillDecoderParams decoder;

  /// Teacher-side parameters come from `teacher_seed`, student-side ones
  /// from `student_seed`, so student arms can share one teacher.
  static VilaModel init(const DatasetSpec& data, const ModelConfig& cfg, std::uint64_t teacher_seed,
                        std::uint64_t student_seed) {
    cfg.validate(data);
    VilaModel m;
    m.data = data;
    m.cfg = cfg;
    m.visual = SurrogateVisualEncoder::make(data.raw_dim, cfg.channels, data.N, data.seed);
    Rng trng(derive_seed(teacher_seed, 0x7EAC));
    m.text = SurrogateTextEncoder::make(cfg.vocab, cfg.max_text_len, cfg.d_model, trng);
    m.head = AnswerHead::make(cfg.d_model, trng);
    m.teacher = QFormerParams::init(cfg.qformer(data, data.T), trng);
    Rng srng(derive_seed(student_seed, 0x57D7));
    m.student = QFormerParams::init(cfg.qformer(data, cfg.S), srng);
    m.prompter = FramePrompterParams::init(cfg.prompter(data), srng);
    m.decoder = DistillDecoderParams::init(cfg.decoder, cfg.d_model, cfg.d_model, srng);
    return m;
  }

  FramePrompterConfig prompter_cfg() const { return cfg.prompter(data); }

  NamedTensors teacher_side() const {
    NamedTensors out;
    append_named(out, "text.", text.named());
    append_named(out, "head.", head.named());
    append_named(out, "teacher.", teacher.named());
    return out;
  }
  NamedTensors student_side() const {
    NamedTensors out;
    append_named(out, "student.", student.named());
    append_named(out, "prompter.", prompter.named());
    append_named(out, "decoder.", decoder.named());
    return out;
  }
  /// Every parameter including the fixed visual projection.
  NamedTensors named() const {
    NamedTensors out{{"visual.projection", visual.projection}};
    append_named(out, "", teacher_side());
    append_named(out, "", student_side());
    return out;
  }
};

// ---------------------------------------------------------------------------

struct Batch {
  Tensor raw;  // [B, T, N, raw_dim]
  std::vector<std::vector<std::size_t>> questions;
  std::vector<std::vector<std::vector<std::size_t>>> choices;
  std::vector<std::size_t> answers;
  std::vector<std::vector<std::size_t>> keyframes;

  std::size_t size() const { return answers.size(); }
};

inline Batch make_batch(const DatasetSpec& spec, const std::vector<SynthSample>& samples,
                        const std::vector<std::size_t>& idx) {
  Batch b;
  const std::size_t per = spec.T * spec.N * spec.raw_dim;
  std::vector<double> raw;
  raw.reserve(idx.size() * per);
  for (auto i : idx) {
    const auto& s = samples.at(i);
    if (s.raw_video.size() != per) {
      throw DimensionError("sample video has " + std::to_string(s.raw_video.size()) + " values, expected " +
                           std::to_string(per));
    }
    raw.insert(raw.end(), s.raw_video.begin(), s.raw_video.end());
    b.questions.push_back(s.question_tokens);
    b.choices.push_back(s.choice_tokens);
    b.answers.push_back(s.answer_idx);
    b.keyframes.push_back(s.keyframes);
  }
  b.raw = Tensor({idx.size(), spec.T, spec.N, spec.raw_dim}, std::move(raw));
  return b;
}

struct TeacherOutput {
  Tensor x_prime;  // [B, Lq, d]
  Tensor logits;   // [B, A]
};

inline void check_batch_frames(const VilaModel& m, const Batch& b) {
  if (b.raw.dim(1) != m.data.T) {
    throw DimensionError("batch has T=" + std::to_string(b.raw.dim(1)) + " frames but the model was built for T=" +
                         std::to_string(m.data.T));
  }
}

/// A dataset can feed a model only if its video geometry matches.
inline void check_dataset_matches(const VilaModel& m, const DatasetSpec& s) {
  auto dim = [](const char* n, std::size_t got, std::size_t want) {
    if (got != want) {
      throw DimensionError(std::string("dataset has ") + n + "=" + std::to_string(got) + " but the model was built for " + n +
                           "=" + std::to_string(want));
    }
  };
  dim("T", s.T, m.data.T);
  dim("N", s.N, m.data.N);
  dim("raw_dim", s.raw_dim, m.data.raw_dim);
  dim("A", s.A, m.data.A);
}

inline TeacherOutput teacher_forward(const VilaModel& m, const Batch& b) {
  check_batch_frames(m, b);
  const Tensor features = encode_video(b.raw, m.visual);
  const Tensor tokens = visual_tokens(m.teacher, features);
  const std::size_t B = b.size();
  const Tensor flat = reshape(tokens, {B, m.data.T * m.data.N, m.cfg.d_model});
  const Tensor text = encode_text(b.questions, m.text);
  TeacherOutput out;
  out.x_prime = qformer_forward(m.teacher, flat, text);
  out.logits = score_answers(out.x_prime, encode_choices(b.choices, m.text), m.head);
  return out;
}

struct StudentOutput {
  Tensor x_student;  // X'_student [B, Lq, d]
  Tensor x_llm;      // what the answer head reads
  Tensor logits;
  std::vector<std::vector<std::size_t>> selected;
  std::optional<SelectionMask> mask;  // present when the frame prompter ran
};

/// With the prompter, frames come from the selector and X_LLM = X'_student
/// plus the text-guided fusion. Without it, `frame_budget` evenly spaced
/// frames are gathered and X_LLM = X'_student.
inline StudentOutput student_forward(const VilaModel& m, const Batch& b, bool use_prompter, const SelectMode& mode,
                                     std::size_t frame_budget = 0) {
  check_batch_frames(m, b);
  const std::size_t B = b.size(), T = m.data.T, N = m.data.N, d = m.cfg.d_model;
  const Tensor features = encode_video(b.raw, m.visual);
  const Tensor tokens = visual_tokens(m.student, features);  // [B, T, N, d]
  const Tensor text = encode_text(b.questions, m.text);
  const Tensor choices = encode_choices(b.choices, m.text);
  StudentOutput out;
  if (use_prompter) {
    const auto fp = m.prompter_cfg();
    SelectionMask mask = sample_mask(selection_logits(features, m.prompter, fp), fp, mode);
    bool ragged = false;
    for (const auto& row : mask.selected_indices) {
      if (row.empty()) throw std::invalid_argument("no attendable keys: empty frame selection");
      ragged |= row.size() != mask.selected_indices[0].size();
    }
    if (mode.kind == SelectMode::Kind::Infer && !ragged && fp.design == SamplingDesign::Segmented) {
      const Tensor gathered = gather_frames(tokens, mask.selected_indices);
      out.x_student = qformer_forward(m.student, gathered, text);
      out.x_llm = add(out.x_student, cross_attention(m.prompter.guide_attn, text, gathered));
    } else {
      const Tensor keys = frame_mask_to_keys(mode.kind == SelectMode::Kind::Infer ? mask.hard : mask.weights, N);
      const Tensor flat = reshape(tokens, {B, T * N, d});
      out.x_student = qformer_forward(m.student, flat, text, &keys);
      out.x_llm = add(out.x_student, cross_attention(m.prompter.guide_attn, text, flat, &keys));
    }
    out.selected = mask.selected_indices;
    out.mask = std::move(mask);
  } else {
    const std::size_t k = frame_budget ? frame_budget : m.cfg.S;
    out.selected.assign(B, uniform_frames(T, k));
    const Tensor gathered = gather_frames(tokens, out.selected);
    out.x_student = qformer_forward(m.student, gathered, text);
    out.x_llm = out.x_student;
  }
  out.logits = score_answers(out.x_llm, choices, m.head);
  return out;
}

/// |selected ∩ planted| / |planted|, averaged over the batch.
inline double keyframe_recall(const std::vector<std::vector<std::size_t>>& selected,
                              const std::vector<std::vector<std::size_t>>& keyframes) {
  double total = 0.0;
  for (std::size_t r = 0; r < selected.size(); ++r) {
    const std::set<std::size_t> sel(selected[r].begin(), selected[r].end());
    std::size_t hit = 0;
    for (auto k : keyframes[r]) hit += sel.count(k);
    total += static_cast<double>(hit) / static_cast<double>(keyframes[r].size());
  }
  return total / static_cast<double>(selected.size());
}

inline std::size_t count_correct(const Tensor& logits, const std::vector<std::size_t>& answers) {
  const std::size_t A = logits.dim(1);
  std::size_t c = 0;
  for (std::size_t b = 0; b < answers.size(); ++b) {
    const auto row = logits.data().subspan(b * A, A);
    if (static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == answers[b]) ++c;
  }
  return c;
}

}  // namespace vila
