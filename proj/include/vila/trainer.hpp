#pragma once

// Two-stage training: the teacher on all frames with the task loss, then the
// student and frame prompter against the task loss plus distillation toward
// the frozen teacher. Also evaluation, latency benchmarking and ablations.

#include <algorithm>
#include <chrono>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "vila/checkpoint.hpp"
#include "vila/metrics.hpp"
#include "vila/model.hpp"
#include "vila/optim.hpp"

namespace vila {

struct StageConfig {
  std::size_t steps = 1000;
  std::size_t batch = 32;
  double lr = 3e-3;
  double lr_min = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;

  AdamWConfig adamw() const { return {beta1, beta2, eps, weight_decay}; }
  void validate(const char* stage) const {
    if (steps < 1) throw std::invalid_argument(std::string(stage) + ".steps must be at least 1");
    if (batch < 1) throw std::invalid_argument(std::string(stage) + ".batch must be at least 1");
    if (!(lr > 0.0) || lr_min < 0.0 || lr_min > lr) throw std::invalid_argument(std::string(stage) + " needs lr >= lr_min >= 0");
  }
};

inline void to_json(nlohmann::json& j, const StageConfig& s) {
  j = {{"steps", s.steps}, {"batch", s.batch},     {"lr", s.lr},       {"lr_min", s.lr_min},  {"weight_decay", s.weight_decay},
       {"beta1", s.beta1}, {"beta2", s.beta2},     {"eps", s.eps},     {"clip_norm", s.clip_norm}};
}
inline void from_json(const nlohmann::json& j, StageConfig& s) {
  const StageConfig d = s;
  s.steps = j.value("steps", d.steps);
  s.batch = j.value("batch", d.batch);
  s.lr = j.value("lr", d.lr);
  s.lr_min = j.value("lr_min", d.lr_min);
  s.weight_decay = j.value("weight_decay", d.weight_decay);
  s.beta1 = j.value("beta1", d.beta1);
  s.beta2 = j.value("beta2", d.beta2);
  s.eps = j.value("eps", d.eps);
  s.clip_norm = j.value("clip_norm", d.clip_norm);
}

struct TrainConfig {
  DatasetSpec data;
  ModelConfig model;
  StageConfig teacher{.steps = 1000};
  StageConfig student{.steps = 300};
  double lambda_distill = 1.0;
  bool use_prompter = true;
  VqaLossKind vqa_loss = VqaLossKind::CrossEntropy;
  bool unfreeze_answerer = false;  // train text encoder and answer head in the student stage too
  std::uint64_t seed = 0;          // teacher-side initialization and batches
  std::uint64_t student_seed = 0;  // student-side initialization, batches and Gumbel noise
  std::size_t eval_every = 0;      // 0: evaluate only at the end
  std::size_t eval_samples = 0;    // 0: whole validation split
  bool audit_frozen = true;
  bool log_wallclock = false;
  std::string output_dir = "runs/default";

  void validate() const {
    data.validate();
    model.validate(data);
    teacher.validate("teacher");
    student.validate("student");
    if (!(lambda_distill >= 0.0)) throw std::invalid_argument("lambda_distill must be nonnegative");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"data", c.data},
       {"model", c.model},
       {"teacher", c.teacher},
       {"student", c.student},
       {"lambda_distill", c.lambda_distill},
       {"use_prompter", c.use_prompter},
       {"vqa_loss", to_string(c.vqa_loss)},
       {"unfreeze_answerer", c.unfreeze_answerer},
       {"seed", c.seed},
       {"student_seed", c.student_seed},
       {"eval_every", c.eval_every},
       {"eval_samples", c.eval_samples},
       {"audit_frozen", c.audit_frozen},
       {"log_wallclock", c.log_wallclock},
       {"output_dir", c.output_dir}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known{"data",         "model",          "teacher",      "student",
                                              "lambda_distill", "use_prompter", "vqa_loss",     "unfreeze_answerer",
                                              "seed",         "student_seed",   "eval_every",   "eval_samples",
                                              "audit_frozen", "log_wallclock",  "output_dir"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) throw std::invalid_argument("unknown config field '" + k + "'");
  }
  const TrainConfig d;
  if (j.contains("data")) c.data = j.at("data").get<DatasetSpec>();
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  c.teacher = d.teacher;
  c.student = d.student;
  if (j.contains("teacher")) from_json(j.at("teacher"), c.teacher);
  if (j.contains("student")) from_json(j.at("student"), c.student);
  c.lambda_distill = j.value("lambda_distill", d.lambda_distill);
  c.use_prompter = j.value("use_prompter", d.use_prompter);
  c.vqa_loss = vqa_loss_from_string(j.value("vqa_loss", to_string(d.vqa_loss)));
  c.unfreeze_answerer = j.value("unfreeze_answerer", d.unfreeze_answerer);
  c.seed = j.value("seed", d.seed);
  c.student_seed = j.value("student_seed", d.student_seed);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.eval_samples = j.value("eval_samples", d.eval_samples);
  c.audit_frozen = j.value("audit_frozen", d.audit_frozen);
  c.log_wallclock = j.value("log_wallclock", d.log_wallclock);
  c.output_dir = j.value("output_dir", d.output_dir);
}

/// Digest of everything that shapes the trained numbers (paths and logging
/// switches excluded).
inline std::string config_digest(const TrainConfig& c) {
  nlohmann::json j = c;
  j.erase("output_dir");
  j.erase("log_wallclock");
  j.erase("eval_every");
  return hex64(fnv1a(j.dump()));
}

/// Digest of the fields the teacher stage depends on; student runs that share
/// a teacher must agree on it.
inline std::string teacher_digest(const TrainConfig& c) {
  const auto& m = c.model;
  nlohmann::json j{{"data", c.data},
                   {"teacher", c.teacher},
                   {"seed", c.seed},
                   {"vqa_loss", to_string(c.vqa_loss)},
                   {"model",
                    {{"channels", m.channels},
                     {"d_model", m.d_model},
                     {"num_heads", m.num_heads},
                     {"num_queries", m.num_queries},
                     {"depth", m.depth},
                     {"vocab", m.vocab},
                     {"max_text_len", m.max_text_len}}}};
  return hex64(fnv1a(j.dump()));
}

class FrozenGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  MetricsWriter* metrics = nullptr;
  const Checkpoint* resume = nullptr;
  std::size_t stop_at = 0;  // stop after this many completed steps (0: run to the end)
  /// Called after every optimizer step with the 1-based completed step count.
  std::function<void(std::size_t, const VilaModel&)> on_step;
};

struct TrainResult {
  VilaModel model;
  Checkpoint checkpoint;
  std::vector<MetricsRow> rows;
  MetricsRow final_val;
  std::size_t audited_steps = 0;
  std::size_t clipped_steps = 0;
  bool finished = false;
};

// ---------------------------------------------------------------------------
// Evaluation

enum class EvalMode { Hard, SoftTau };

struct EvalResult {
  MetricsRow row;
  std::vector<std::vector<std::size_t>> selections;
  std::vector<std::size_t> predictions;
};

namespace detail {

inline std::vector<std::size_t> eval_indices(std::size_t available, std::size_t limit) {
  std::vector<std::size_t> idx(limit ? std::min(limit, available) : available);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

inline std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t A = logits.dim(1);
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < logits.dim(0); ++b) {
    const auto row = logits.data().subspan(b * A, A);
    out.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

}  // namespace detail

inline EvalResult evaluate_teacher(const VilaModel& m, const std::vector<SynthSample>& samples, std::size_t limit = 0,
                                   std::size_t batch = 100) {
  NoGradGuard ng;
  const auto idx = detail::eval_indices(samples.size(), limit);
  EvalResult r;
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch) {
    const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(start + batch, idx.size())));
    const Batch b = make_batch(m.data, samples, chunk);
    const auto out = teacher_forward(m, b);
    loss += cross_entropy(out.logits, b.answers).item() * static_cast<double>(chunk.size());
    correct += count_correct(out.logits, b.answers);
    const auto pred = detail::argmax_rows(out.logits);
    r.predictions.insert(r.predictions.end(), pred.begin(), pred.end());
  }
  r.row.split = "val";
  r.row.loss_vqa = loss / static_cast<double>(idx.size());
  r.row.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
  return r;  // keyframe recall does not apply to the all-frame teacher
}

inline EvalResult evaluate_student(const VilaModel& m, const std::vector<SynthSample>& samples, bool use_prompter,
                                   EvalMode mode = EvalMode::Hard, std::size_t limit = 0, std::size_t batch = 100,
                                   const std::vector<std::vector<std::size_t>>* reference = nullptr) {
  NoGradGuard ng;
  const auto idx = detail::eval_indices(samples.size(), limit);
  const SelectMode sel = mode == EvalMode::Hard ? SelectMode::infer() : SelectMode::infer_soft(m.cfg.tau_end);
  EvalResult r;
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<std::vector<std::size_t>> keyframes;
  for (std::size_t start = 0; start < idx.size(); start += batch) {
    const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(start + batch, idx.size())));
    const Batch b = make_batch(m.data, samples, chunk);
    const auto out = student_forward(m, b, use_prompter, sel);
    loss += cross_entropy(out.logits, b.answers).item() * static_cast<double>(chunk.size());
    correct += count_correct(out.logits, b.answers);
    const auto pred = detail::argmax_rows(out.logits);
    r.predictions.insert(r.predictions.end(), pred.begin(), pred.end());
    r.selections.insert(r.selections.end(), out.selected.begin(), out.selected.end());
    keyframes.insert(keyframes.end(), b.keyframes.begin(), b.keyframes.end());
  }
  r.row.split = "val";
  r.row.loss_vqa = loss / static_cast<double>(idx.size());
  r.row.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
  r.row.keyframe_recall = keyframe_recall(r.selections, keyframes);
  if (reference) {
    if (reference->size() < r.selections.size()) throw DimensionError("reference selections cover fewer samples");
    r.row.selection_overlap = selection_overlap(
        r.selections, std::vector<std::vector<std::size_t>>(reference->begin(), reference->begin() + static_cast<std::ptrdiff_t>(r.selections.size())));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

enum : std::uint64_t { kStreamTeacherBatch = 0x7B, kStreamStudentBatch = 0x5B, kStreamGumbel = 0x6B };

inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t stream, std::size_t step,
                                              std::size_t batch, std::size_t n) {
  Rng rng(derive_seed(seed, stream, step));
  std::vector<std::size_t> idx(batch);
  for (auto& i : idx) i = rng.below(n);
  return idx;
}

inline void set_trainable(const NamedTensors& params, bool on) {
  for (const auto& [n, p] : params) {
    Tensor t = p;
    t.set_requires_grad(on);
    t.zero_grad();
  }
}

inline void zero_grads(const NamedTensors& params) {
  for (const auto& [n, p] : params) {
    Tensor t = p;
    t.zero_grad();
  }
}

inline void store_optimizer(Checkpoint& ck, const NamedTensors& params, const AdamWState& st) {
  ck.extra["optim_t"] = st.t;
  for (std::size_t i = 0; i < params.size() && i < st.m.size(); ++i) {
    ck.put("optim.m." + params[i].first, params[i].second.shape(), st.m[i]);
    ck.put("optim.v." + params[i].first, params[i].second.shape(), st.v[i]);
  }
}

inline void load_optimizer(const Checkpoint& ck, const NamedTensors& params, AdamWState& st) {
  st.t = ck.extra.at("optim_t").get<std::size_t>();
  st.m.clear();
  st.v.clear();
  if (st.t == 0) return;
  for (const auto& [n, p] : params) {
    st.m.push_back(ck.at("optim.m." + n).data);
    st.v.push_back(ck.at("optim.v." + n).data);
  }
}

inline void check_frozen(const NamedTensors& frozen, std::size_t step) {
  for (const auto& [n, p] : frozen) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) {
      if (g != 0.0) throw FrozenGradientError("frozen parameter " + n + " received gradient at step " + std::to_string(step));
    }
  }
}

inline double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline Checkpoint make_checkpoint(const TrainConfig& cfg, const VilaModel& m, const std::string& stage, std::size_t step,
                                  const NamedTensors& trainable, const AdamWState& st) {
  Checkpoint ck;
  ck.stage = stage;
  ck.step = step;
  ck.config_digest = config_digest(cfg);
  ck.extra["teacher_digest"] = teacher_digest(cfg);
  ck.extra["config"] = cfg;
  ck.extra["total_steps"] = stage == "teacher" ? cfg.teacher.steps : cfg.student.steps;
  // Batches and Gumbel noise are pure functions of (seed, stream, step), so
  // the step count is the whole generator state.
  ck.extra["rng"] = {{"scheme", "derive_seed(seed, stream, step)"},
                     {"seed", stage == "teacher" ? cfg.seed : cfg.student_seed},
                     {"next_step", step}};
  ck.put_all(m.named());
  store_optimizer(ck, trainable, st);
  return ck;
}

}  // namespace detail

inline TrainResult train_teacher(const TrainConfig& cfg, const Dataset& ds, const TrainOptions& opts = {}) {
  cfg.validate();
  if (ds.train.empty() || ds.val.empty()) throw std::invalid_argument("train_teacher needs a nonempty dataset");
  TrainResult res{VilaModel::init(cfg.data, cfg.model, cfg.seed, cfg.student_seed), {}, {}, {}, 0, 0, false};
  VilaModel& m = res.model;
  const NamedTensors trainable = m.teacher_side();
  detail::set_trainable(m.student_side(), false);
  detail::set_trainable(trainable, true);
  AdamWState st;
  std::size_t start = 0;
  if (opts.resume) {
    if (opts.resume->stage != "teacher") throw std::invalid_argument("resume checkpoint is not a teacher checkpoint");
    if (opts.resume->config_digest != config_digest(cfg)) throw std::invalid_argument("config digest mismatch on resume");
    opts.resume->load_into(m.named());
    detail::load_optimizer(*opts.resume, trainable, st);
    start = opts.resume->step;
  }
  const auto& sc = cfg.teacher;
  const std::size_t end = opts.stop_at ? std::min(opts.stop_at, sc.steps) : sc.steps;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t step = start; step < end; ++step) {
    const auto idx = detail::batch_indices(cfg.seed, detail::kStreamTeacherBatch, step, sc.batch, ds.train.size());
    const Batch b = make_batch(cfg.data, ds.train, idx);
    const double lr = cosine_lr(step, sc.steps, sc.lr, sc.lr_min);
    detail::zero_grads(trainable);
    reset_graph();
    const auto out = teacher_forward(m, b);
    const Tensor loss = vqa_loss(out.logits, b.answers, cfg.vqa_loss);
    if (!std::isfinite(loss.item())) throw std::runtime_error("non-finite loss at teacher step " + std::to_string(step));
    const double loss_v = loss.item();
    const std::size_t correct = count_correct(out.logits, b.answers);
    backward(loss);
    const double norm = clip_grad_norm(trainable, sc.clip_norm);
    if (norm > sc.clip_norm) {
      ++res.clipped_steps;
      if (opts.metrics) opts.metrics->event({{"event", "clip"}, {"stage", "teacher"}, {"step", step}, {"norm", norm}});
    }
    adamw_step(trainable, st, lr, sc.adamw());
    MetricsRow row;
    row.step = step;
    row.split = "train";
    row.loss_vqa = loss_v;
    row.accuracy = static_cast<double>(correct) / static_cast<double>(b.size());
    row.lr = lr;
    if (cfg.log_wallclock) row.wallclock_ms = detail::ms_since(t0);
    res.rows.push_back(row);
    if (opts.metrics) opts.metrics->write(row);
    if (cfg.eval_every && (step + 1) % cfg.eval_every == 0 && step + 1 < sc.steps) {
      auto ev = evaluate_teacher(m, ds.val, cfg.eval_samples).row;
      ev.step = step + 1;
      ev.lr = lr;
      if (cfg.log_wallclock) ev.wallclock_ms = detail::ms_since(t0);
      res.rows.push_back(ev);
      if (opts.metrics) opts.metrics->write(ev);
    }
    if (opts.on_step) opts.on_step(step + 1, m);
  }
  res.finished = end == sc.steps;
  if (res.finished) {
    res.final_val = evaluate_teacher(m, ds.val, cfg.eval_samples).row;
    res.final_val.step = sc.steps;
    if (cfg.log_wallclock) res.final_val.wallclock_ms = detail::ms_since(t0);
    res.rows.push_back(res.final_val);
    if (opts.metrics) opts.metrics->write(res.final_val);
  }
  if (opts.metrics) opts.metrics->flush();
  res.checkpoint = detail::make_checkpoint(cfg, m, "teacher", end, trainable, st);
  detail::set_trainable(trainable, false);
  return res;
}

/// Rebuilds a model from a checkpoint written by either stage.
inline VilaModel model_from_checkpoint(const Checkpoint& ck) {
  const TrainConfig cfg = ck.extra.at("config").get<TrainConfig>();
  VilaModel m = VilaModel::init(cfg.data, cfg.model, cfg.seed, cfg.student_seed);
  const NamedTensors all = m.named();
  if (ck.stage == "teacher") {
    ck.load_into(m.teacher_side());
  } else {
    ck.load_into(all);
  }
  const auto& proj = ck.at("visual.projection");
  if (proj.data != m.visual.projection.values()) throw std::runtime_error("checkpoint visual encoder does not match its data seed");
  detail::set_trainable(all, false);
  return m;
}

inline TrainResult train_student(const TrainConfig& cfg, const Dataset& ds, const Checkpoint& teacher_ckpt,
                                 const TrainOptions& opts = {}) {
  cfg.validate();
  if (teacher_ckpt.stage != "teacher") throw std::invalid_argument("student stage needs a teacher checkpoint, got stage '" + teacher_ckpt.stage + "'");
  if (teacher_ckpt.extra.value("teacher_digest", "") != teacher_digest(cfg)) {
    throw std::invalid_argument("config digest mismatch: teacher checkpoint was trained with a different teacher configuration");
  }
  TrainResult res{VilaModel::init(cfg.data, cfg.model, cfg.seed, cfg.student_seed), {}, {}, {}, 0, 0, false};
  VilaModel& m = res.model;
  teacher_ckpt.load_into(m.teacher_side());

  NamedTensors trainable = m.student_side();
  NamedTensors frozen{{"visual.projection", m.visual.projection}};
  append_named(frozen, "teacher.", m.teacher.named());
  if (cfg.unfreeze_answerer) {
    append_named(trainable, "text.", m.text.named());
    append_named(trainable, "head.", m.head.named());
  } else {
    append_named(frozen, "text.", m.text.named());
    append_named(frozen, "head.", m.head.named());
  }
  detail::set_trainable(frozen, false);
  detail::set_trainable(trainable, true);

  AdamWState st;
  std::size_t start = 0;
  if (opts.resume) {
    if (opts.resume->stage != "student") throw std::invalid_argument("resume checkpoint is not a student checkpoint");
    if (opts.resume->config_digest != config_digest(cfg)) throw std::invalid_argument("config digest mismatch on resume");
    opts.resume->load_into(m.named());
    detail::load_optimizer(*opts.resume, trainable, st);
    start = opts.resume->step;
  }

  const auto& sc = cfg.student;
  const auto fp = m.prompter_cfg();
  const bool distill = cfg.lambda_distill > 0.0;
  const std::size_t end = opts.stop_at ? std::min(opts.stop_at, sc.steps) : sc.steps;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t step = start; step < end; ++step) {
    const auto idx = detail::batch_indices(cfg.student_seed, detail::kStreamStudentBatch, step, sc.batch, ds.train.size());
    const Batch b = make_batch(cfg.data, ds.train, idx);
    const double lr = cosine_lr(step, sc.steps, sc.lr, sc.lr_min);
    const double tau = tau_schedule(step, sc.steps, fp);
    Rng gumbel(derive_seed(cfg.student_seed, detail::kStreamGumbel, step));
    detail::zero_grads(trainable);
    reset_graph();

    Tensor target;
    if (distill) {
      NoGradGuard ng;
      target = teacher_forward(m, b).x_prime;
    }
    const auto out = student_forward(m, b, cfg.use_prompter, SelectMode::train(tau, gumbel));
    const Tensor lv = vqa_loss(out.logits, b.answers, cfg.vqa_loss);
    Tensor total = lv;
    std::optional<double> ld;
    if (distill) {
      const Tensor dl = distill_loss(m.decoder, out.x_student, target);
      ld = dl.item();
      total = add(lv, scale(dl, cfg.lambda_distill));
    }
    if (!std::isfinite(total.item())) throw std::runtime_error("non-finite loss at student step " + std::to_string(step));
    const double loss_v = lv.item();
    const std::size_t correct = count_correct(out.logits, b.answers);
    backward(total);
    if (cfg.audit_frozen) {
      detail::check_frozen(frozen, step);
      ++res.audited_steps;
    }
    const double norm = clip_grad_norm(trainable, sc.clip_norm);
    if (norm > sc.clip_norm) {
      ++res.clipped_steps;
      if (opts.metrics) opts.metrics->event({{"event", "clip"}, {"stage", "student"}, {"step", step}, {"norm", norm}});
    }
    adamw_step(trainable, st, lr, sc.adamw());

    MetricsRow row;
    row.step = step;
    row.split = "train";
    row.loss_vqa = loss_v;
    row.loss_distill = ld;
    row.accuracy = static_cast<double>(correct) / static_cast<double>(b.size());
    row.keyframe_recall = keyframe_recall(out.selected, b.keyframes);
    row.tau = tau;
    row.lr = lr;
    if (cfg.log_wallclock) row.wallclock_ms = detail::ms_since(t0);
    res.rows.push_back(row);
    if (opts.metrics) opts.metrics->write(row);
    if (cfg.eval_every && (step + 1) % cfg.eval_every == 0 && step + 1 < sc.steps) {
      auto ev = evaluate_student(m, ds.val, cfg.use_prompter, EvalMode::Hard, cfg.eval_samples).row;
      ev.step = step + 1;
      if (cfg.log_wallclock) ev.wallclock_ms = detail::ms_since(t0);
      res.rows.push_back(ev);
      if (opts.metrics) opts.metrics->write(ev);
    }
    if (opts.on_step) opts.on_step(step + 1, m);
  }
  res.finished = end == sc.steps;
  if (res.finished) {
    res.final_val = evaluate_student(m, ds.val, cfg.use_prompter, EvalMode::Hard, cfg.eval_samples).row;
    res.final_val.step = sc.steps;
    res.final_val.tau = fp.tau_end;
    if (cfg.log_wallclock) res.final_val.wallclock_ms = detail::ms_since(t0);
    res.rows.push_back(res.final_val);
    if (opts.metrics) opts.metrics->write(res.final_val);
  }
  if (opts.metrics) opts.metrics->flush();
  res.checkpoint = detail::make_checkpoint(cfg, m, "student", end, trainable, st);
  detail::set_trainable(trainable, false);
  return res;
}

// ---------------------------------------------------------------------------
// Latency

struct LatencyRow {
  std::size_t frames = 0;
  double median_ms = 0.0;  // per video
  double p95_ms = 0.0;
  std::size_t timed_batches = 0;
};

struct BenchOptions {
  std::size_t batch = 4;
  std::size_t warmup = 20;
  std::size_t timed = 200;
};

/// Inference with the student on a fixed number of frames. Below T the
/// selector runs and its picks are used when the count matches its segment
/// budget (uniform frames otherwise); at T every frame goes through fusion.
inline Tensor student_infer_frames(const VilaModel& m, const Batch& b, std::size_t frames) {
  NoGradGuard ng;
  const std::size_t T = m.data.T, B = b.size();
  const Tensor features = encode_video(b.raw, m.visual);
  std::vector<std::vector<std::size_t>> picks;
  if (frames < T) {
    const auto fp = m.prompter_cfg();
    const SelectionMask mask = sample_mask(selection_logits(features, m.prompter, fp), fp, SelectMode::infer());
    picks = frames == fp.S && fp.design == SamplingDesign::Segmented ? mask.selected_indices
                                                                    : std::vector<std::vector<std::size_t>>(B, uniform_frames(T, frames));
  } else {
    picks.assign(B, uniform_frames(T, T));
  }
  QFormerParams wide = m.student;
  wide.cfg.frame_budget = std::max(wide.cfg.frame_budget, frames);
  const Tensor tokens = gather_frames(visual_tokens(m.student, features), picks);
  const Tensor text = encode_text(b.questions, m.text);
  const Tensor x = add(qformer_forward(wide, tokens, text), cross_attention(m.prompter.guide_attn, text, tokens));
  return score_answers(x, encode_choices(b.choices, m.text), m.head);
}

inline std::vector<LatencyRow> bench_latency(const VilaModel& m, const std::vector<SynthSample>& samples,
                                             const std::vector<std::size_t>& frame_counts, const BenchOptions& opt = {}) {
  if (frame_counts.empty()) throw std::invalid_argument("bench_latency needs at least one frame count");
  if (samples.size() < opt.batch) throw std::invalid_argument("not enough samples for one benchmark batch");
  for (auto f : frame_counts) {
    if (f == 0 || f > m.data.T) throw std::invalid_argument("frame count " + std::to_string(f) + " outside [1, T]");
  }
  std::vector<Batch> batches;
  for (std::size_t i = 0; i + opt.batch <= samples.size() && batches.size() < 16; i += opt.batch) {
    std::vector<std::size_t> idx(opt.batch);
    std::iota(idx.begin(), idx.end(), i);
    batches.push_back(make_batch(m.data, samples, idx));
  }
  // Frame counts are timed round-robin so slow phases of the host hit all
  // counts alike.
  for (auto frames : frame_counts) {
    for (std::size_t w = 0; w < opt.warmup; ++w) student_infer_frames(m, batches[w % batches.size()], frames);
  }
  std::vector<std::vector<double>> per_video(frame_counts.size());
  for (std::size_t r = 0; r < opt.timed; ++r) {
    for (std::size_t i = 0; i < frame_counts.size(); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor logits = student_infer_frames(m, batches[r % batches.size()], frame_counts[i]);
      per_video[i].push_back(detail::ms_since(t0) / static_cast<double>(opt.batch));
      if (!std::isfinite(logits[0])) throw std::runtime_error("non-finite logits during benchmark");
    }
  }
  std::vector<LatencyRow> out;
  for (std::size_t i = 0; i < frame_counts.size(); ++i) {
    auto& v = per_video[i];
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    const double median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    const double p95 = v[std::min(n - 1, static_cast<std::size_t>(0.95 * static_cast<double>(n)))];
    out.push_back({frame_counts[i], median, p95, n});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablations

enum class AblationAxis { Components, Decoder, Design, Lambda };

inline AblationAxis axis_from_string(const std::string& s) {
  if (s == "components") return AblationAxis::Components;
  if (s == "decoder") return AblationAxis::Decoder;
  if (s == "design") return AblationAxis::Design;
  if (s == "lambda") return AblationAxis::Lambda;
  throw std::invalid_argument("axis must be components, decoder, design or lambda, got " + s);
}

struct AblationArm {
  std::string name;
  TrainConfig cfg;
};

/// The matched arms for one axis; all share the teacher fields of `base`.
inline std::vector<AblationArm> ablation_arms(const TrainConfig& base, AblationAxis axis) {
  std::vector<AblationArm> arms;
  auto arm = [&](std::string name, auto&& edit) {
    TrainConfig c = base;
    edit(c);
    arms.push_back({std::move(name), c});
  };
  const double lam = base.lambda_distill > 0.0 ? base.lambda_distill : 1.0;
  switch (axis) {
    case AblationAxis::Components:
      arm("base", [](TrainConfig& c) { c.use_prompter = false; c.lambda_distill = 0.0; });
      arm("base+QFormer-Distiller", [&](TrainConfig& c) { c.use_prompter = false; c.lambda_distill = lam; });
      arm("base+Frame-Prompter", [](TrainConfig& c) { c.use_prompter = true; c.lambda_distill = 0.0; });
      arm("base+QFormer-Distiller+Frame-Prompter", [&](TrainConfig& c) { c.use_prompter = true; c.lambda_distill = lam; });
      break;
    case AblationAxis::Decoder:
      for (auto v : {DecoderVariant::FC, DecoderVariant::FC_LN, DecoderVariant::FC_LN_GELU_FC}) {
        arm(to_string(v), [&](TrainConfig& c) { c.model.decoder = v; c.use_prompter = true; c.lambda_distill = lam; });
      }
      break;
    case AblationAxis::Design:
      for (auto d : {SamplingDesign::Segmented, SamplingDesign::FreeForm}) {
        arm(to_string(d), [&](TrainConfig& c) { c.model.design = d; c.use_prompter = true; c.lambda_distill = lam; });
      }
      break;
    case AblationAxis::Lambda:
      for (double l : {0.0, 0.1, 1.0, 10.0}) {
        arm("lambda=" + format_double(l), [&](TrainConfig& c) { c.use_prompter = true; c.lambda_distill = l; });
      }
      break;
  }
  return arms;
}

struct ArmOutcome {
  std::string arm;
  std::uint64_t student_seed = 0;
  double accuracy = 0.0;
  std::optional<double> recall;
  std::vector<std::vector<std::size_t>> selections;
};

/// Runs every arm for each student seed against one fixed teacher.
inline std::vector<ArmOutcome> run_ablation(const std::vector<AblationArm>& arms, const Dataset& ds,
                                            const Checkpoint& teacher_ckpt, const std::vector<std::uint64_t>& seeds) {
  std::vector<ArmOutcome> out;
  for (const auto& a : arms) {
    for (auto s : seeds) {
      TrainConfig c = a.cfg;
      c.student_seed = s;
      const auto r = train_student(c, ds, teacher_ckpt);
      const auto ev = evaluate_student(r.model, ds.val, c.use_prompter, EvalMode::Hard, c.eval_samples);
      out.push_back({a.name, s, *ev.row.accuracy, c.use_prompter ? ev.row.keyframe_recall : std::nullopt, ev.selections});
    }
  }
  return out;
}

}  // namespace vila
