#pragma once

// Finite-difference suites over every differentiable primitive and over the
// composed selector, query-transformer and end-to-end student paths.

#include <functional>
#include <string>
#include <vector>

#include "vila/grad_check.hpp"
#include "vila/model.hpp"

namespace vila {

struct GradCase {
  std::string name;
  std::function<Tensor(const Tensor&)> f;
  Tensor x;
  GradCheckOptions opt;
};

struct GradCaseResult {
  std::string name;
  std::size_t instance = 0;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

namespace detail {

inline Tensor randn(const Shape& s, Rng& rng, double sd = 1.0) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = sd * rng.normal();
  return Tensor(s, std::move(v));
}

inline Tensor rand_uniform(const Shape& s, Rng& rng, double lo, double hi) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(s, std::move(v));
}

/// sum(f(x) * probe): a scalar whose gradient exercises every output entry.
inline Tensor probe_sum(const Tensor& y, const Tensor& probe) { return sum(mul(y, probe)); }

}  // namespace detail

/// One random instance of each differentiable primitive. detach and
/// straight_through are left out: their backward deliberately differs from
/// the derivative of their forward value.
inline std::vector<GradCase> primitive_cases(Rng& rng) {
  using detail::probe_sum;
  using detail::randn;
  const GradCheckOptions tight{.eps = 1e-4, .tol = 1e-5};
  std::vector<GradCase> cs;
  auto add_case = [&](std::string name, std::function<Tensor(const Tensor&)> f, Tensor x, GradCheckOptions o) {
    cs.push_back({std::move(name), std::move(f), std::move(x), std::move(o)});
  };

  {
    const Tensor b = randn({4, 2}, rng), p = randn({3, 2}, rng);
    add_case("matmul", [=](const Tensor& v) { return probe_sum(matmul(v, b), p); }, randn({3, 4}, rng), tight);
  }
  {
    const Tensor x = randn({2, 3, 4}, rng), p = randn({2, 3, 2}, rng);
    add_case("linear", [=](const Tensor& v) { return probe_sum(linear(x, v), p); }, randn({4, 2}, rng), tight);
  }
  {
    const Tensor b = randn({2, 4, 3}, rng), p = randn({2, 3, 3}, rng);
    add_case("bmm", [=](const Tensor& v) { return probe_sum(bmm(v, b), p); }, randn({2, 3, 4}, rng), tight);
  }
  {
    const Tensor b = randn({2, 5, 4}, rng), p = randn({2, 3, 5}, rng);
    add_case("bmm_nt", [=](const Tensor& v) { return probe_sum(bmm_nt(v, b), p); }, randn({2, 3, 4}, rng), tight);
  }
  {
    const Tensor o = randn({3, 4}, rng), p = randn({3, 4}, rng);
    add_case("add", [=](const Tensor& v) { return probe_sum(add(o, v), p); }, randn({4}, rng), tight);
    add_case("sub", [=](const Tensor& v) { return probe_sum(sub(o, v), p); }, randn({3, 4}, rng), tight);
    add_case("mul", [=](const Tensor& v) { return probe_sum(mul(o, v), p); }, randn({4}, rng), tight);
    add_case("scale", [=](const Tensor& v) { return probe_sum(scale(v, -1.7), p); }, randn({3, 4}, rng), tight);
    GradCheckOptions kink = tight;
    kink.skip = skip_near(0.0, 1e-3);
    add_case("relu", [=](const Tensor& v) { return probe_sum(relu(v), p); }, randn({3, 4}, rng), kink);
    add_case("gelu", [=](const Tensor& v) { return probe_sum(gelu(v), p); }, randn({3, 4}, rng), tight);
    add_case("exp", [=](const Tensor& v) { return probe_sum(exp(v), p); }, randn({3, 4}, rng), tight);
    add_case("softmax", [=](const Tensor& v) { return probe_sum(softmax(v, 0), p); }, randn({3, 4}, rng), tight);
    add_case("log_softmax", [=](const Tensor& v) { return probe_sum(log_softmax(v), p); }, randn({3, 4}, rng), tight);
    add_case("mse", [=](const Tensor& v) { return mse(v, o); }, randn({3, 4}, rng), tight);
    add_case("cross_entropy", [](const Tensor& v) { return cross_entropy(v, {1, 3, 0}); }, randn({3, 4}, rng), tight);
    add_case("sum", [=](const Tensor& v) { return sum(mul(v, v)); }, randn({3, 4}, rng), tight);
    add_case("reshape", [=](const Tensor& v) { return probe_sum(reshape(v, {3, 4}), p); }, randn({2, 6}, rng), tight);
    add_case("mean_axis", [=](const Tensor& v) { return probe_sum(mean_axis(v, 1), p); }, randn({3, 5, 4}, rng), tight);
  }
  {
    const Tensor g = randn({5}, rng), b = randn({5}, rng), x = randn({3, 5}, rng), p = randn({3, 5}, rng);
    add_case("layer_norm.x", [=](const Tensor& v) { return probe_sum(layer_norm(v, g, b), p); }, randn({3, 5}, rng), tight);
    add_case("layer_norm.gain", [=](const Tensor& v) { return probe_sum(layer_norm(x, v, b), p); }, randn({5}, rng), tight);
    add_case("layer_norm.bias", [=](const Tensor& v) { return probe_sum(layer_norm(x, g, v), p); }, randn({5}, rng), tight);
  }
  {
    // scores [b*h, Lq, Lk] with h = 2 heads sharing the [b, Lk] key weights
    const Tensor s = randn({4, 3, 5}, rng), w = detail::rand_uniform({2, 5}, rng, 0.1, 1.0), p = randn({4, 3, 5}, rng);
    add_case("masked_softmax.scores", [=](const Tensor& v) { return probe_sum(masked_softmax(v, w, 2), p); },
             randn({4, 3, 5}, rng), tight);
    add_case("masked_softmax.weights", [=](const Tensor& v) { return probe_sum(masked_softmax(s, v, 2), p); },
             detail::rand_uniform({2, 5}, rng, 0.1, 1.0), tight);
  }
  {
    const Tensor o = randn({2, 3}, rng), p = randn({2, 5}, rng);
    add_case("concat", [=](const Tensor& v) { return probe_sum(concat({o, v}, 1), p); }, randn({2, 2}, rng), tight);
    const Tensor p2 = randn({2, 3, 4}, rng);
    add_case("index_select", [=](const Tensor& v) { return probe_sum(index_select(v, 1, {3, 0, 3}), p2); },
             randn({2, 4, 4}, rng), tight);
    const Tensor p3 = randn({2, 2, 4}, rng);
    add_case("slice", [=](const Tensor& v) { return probe_sum(slice(v, 1, 1, 3), p3); }, randn({2, 4, 4}, rng), tight);
    const Tensor p4 = randn({2, 9}, rng);
    add_case("repeat_interleave_last", [=](const Tensor& v) { return probe_sum(repeat_interleave_last(v, 3), p4); },
             randn({2, 3}, rng), tight);
    const Tensor p5 = randn({3, 2, 4}, rng);
    add_case("broadcast_leading", [=](const Tensor& v) { return probe_sum(broadcast_leading(v, 3), p5); },
             randn({2, 4}, rng), tight);
    const Tensor p6 = randn({4, 3, 2}, rng);
    add_case("split_heads", [=](const Tensor& v) { return probe_sum(split_heads(v, 2), p6); }, randn({2, 3, 4}, rng), tight);
    const Tensor p7 = randn({2, 3, 4}, rng);
    add_case("merge_heads", [=](const Tensor& v) { return probe_sum(merge_heads(v, 2), p7); }, randn({4, 3, 2}, rng), tight);
    const Tensor p8 = randn({2, 3, 4}, rng);
    add_case("embedding", [=](const Tensor& v) { return probe_sum(embedding(v, {4, 0, 2, 4, 1, 0}, {2, 3}), p8); },
             randn({5, 4}, rng), tight);
  }
  return cs;
}

/// Relaxed selector path: features -> pool/embed -> segment logits -> Gumbel
/// softmax (fixed noise, no straight-through) -> soft-masked fusion.
inline std::vector<GradCase> prompter_cases(Rng& rng) {
  FramePrompterConfig cfg;
  cfg.T = 8;
  cfg.S = 4;
  cfg.N = 2;
  cfg.C = 3;
  cfg.d_model = 6;
  cfg.embed_hidden = 5;
  cfg.straight_through = false;
  auto params = std::make_shared<FramePrompterParams>(FramePrompterParams::init(cfg, rng));
  const std::size_t B = 2;
  const Tensor tokens = detail::randn({B, cfg.T, cfg.N, cfg.d_model}, rng);
  const Tensor text = detail::randn({B, 3, cfg.d_model}, rng);
  const Tensor probe = detail::randn({B, 3, cfg.d_model}, rng);
  const auto noise = rng.gumbel_vector(B * cfg.S * cfg.segment_len());
  const double tau = 0.5 + rng.uniform_open();
  auto run = [=](const Tensor& features) {
    const Tensor logits = segment_logits(pool_and_embed(features, *params, cfg), *params, cfg);
    const SelectionMask m = gumbel_sample_soft(logits, tau, noise, false);
    return detail::probe_sum(apply_mask_and_fuse(tokens, m, text, *params, FuseMode::Soft), probe);
  };
  const GradCheckOptions composed{.eps = 1e-4, .tol = 1e-4};
  std::vector<GradCase> cs;
  cs.push_back({"prompter.features", run, detail::randn({B, cfg.T, cfg.N, cfg.C}, rng), composed});
  const Tensor features = detail::randn({B, cfg.T, cfg.N, cfg.C}, rng);
  const Tensor head_w = params->select_head.layers[0].weight;
  cs.push_back({"prompter.select_head", [=](const Tensor&) { return run(features); }, head_w, composed});
  return cs;
}

/// Query transformer output, differentiated in its query tokens and visual input.
inline std::vector<GradCase> qformer_cases(Rng& rng) {
  QFormerConfig cfg;
  cfg.d_model = 6;
  cfg.num_heads = 2;
  cfg.num_queries = 3;
  cfg.depth = 2;
  cfg.channels = 4;
  cfg.patches = 2;
  cfg.frame_budget = 4;
  auto p = std::make_shared<QFormerParams>(QFormerParams::init(cfg, rng));
  const Tensor visual = detail::randn({2, 8, cfg.d_model}, rng);
  const Tensor text = detail::randn({2, 3, cfg.d_model}, rng);
  const Tensor probe = detail::randn({2, 3, cfg.d_model}, rng);
  const Tensor keyw = detail::rand_uniform({2, 8}, rng, 0.1, 1.0);
  const GradCheckOptions composed{.eps = 1e-4, .tol = 1e-4};
  std::vector<GradCase> cs;
  cs.push_back({"qformer.query_tokens",
                [=](const Tensor&) { return detail::probe_sum(qformer_forward(*p, visual, text), probe); },
                p->query_tokens, composed});
  cs.push_back({"qformer.visual",
                [=](const Tensor& v) { return detail::probe_sum(qformer_forward(*p, v, text), probe); },
                detail::randn({2, 8, cfg.d_model}, rng), composed});
  cs.push_back({"qformer.key_weights",
                [=](const Tensor& w) { return detail::probe_sum(qformer_forward(*p, visual, text, &w), probe); }, keyw,
                composed});
  return cs;
}

/// Full student objective (task loss + distillation) on a 2-sample batch of
/// a small model, differentiated in the selector, student and decoder.
inline std::vector<GradCase> end2end_cases(Rng& rng) {
  DatasetSpec data;
  data.num_train = 2;
  data.num_val = 1;
  data.T = 8;
  data.K = 4;
  data.seed = rng.next_u64();
  ModelConfig mc;
  mc.channels = 16;
  mc.d_model = 8;
  mc.num_queries = 2;
  mc.embed_hidden = 4;
  mc.S = 4;
  mc.straight_through = false;
  const Dataset ds = generate(data);
  auto m = std::make_shared<VilaModel>(VilaModel::init(data, mc, rng.next_u64(), rng.next_u64()));
  const Batch b = make_batch(data, ds.train, {0, 1});
  const std::uint64_t noise_seed = rng.next_u64();
  const double tau = 0.5 + rng.uniform_open();
  auto loss = [=](const Tensor&) {
    Tensor target;
    {
      NoGradGuard ng;
      target = teacher_forward(*m, b).x_prime;
    }
    Rng g(noise_seed);
    const auto out = student_forward(*m, b, true, SelectMode::train(tau, g));
    return add(vqa_loss(out.logits, b.answers), distill_loss(m->decoder, out.x_student, target));
  };
  const GradCheckOptions composed{.eps = 1e-4, .tol = 1e-4};
  std::vector<GradCase> cs;
  cs.push_back({"end2end.prompter.select_head", loss, m->prompter.select_head.layers[0].weight, composed});
  cs.push_back({"end2end.student.query_tokens", loss, m->student.query_tokens, composed});
  cs.push_back({"end2end.decoder.fc", loss, m->decoder.decoder.layers[0].weight, composed});
  cs.push_back({"end2end.prompter.guide_attn.wv", loss, m->prompter.guide_attn.wv, composed});
  return cs;
}

enum class GradScope { Ops, Prompter, QFormer, End2End };

inline GradScope grad_scope_from_string(const std::string& s) {
  if (s == "ops") return GradScope::Ops;
  if (s == "prompter") return GradScope::Prompter;
  if (s == "qformer") return GradScope::QFormer;
  if (s == "end2end") return GradScope::End2End;
  throw std::invalid_argument("scope must be ops, prompter, qformer or end2end, got " + s);
}

/// Runs `instances` independently drawn instances of every case in the scope.
inline std::vector<GradCaseResult> run_grad_suite(GradScope scope, std::size_t instances, std::uint64_t seed) {
  std::vector<GradCaseResult> out;
  for (std::size_t i = 0; i < instances; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(scope) + 0x6C, i));
    std::vector<GradCase> cases;
    switch (scope) {
      case GradScope::Ops: cases = primitive_cases(rng); break;
      case GradScope::Prompter: cases = prompter_cases(rng); break;
      case GradScope::QFormer: cases = qformer_cases(rng); break;
      case GradScope::End2End: cases = end2end_cases(rng); break;
    }
    for (auto& c : cases) {
      const auto rep = grad_check(c.f, c.x, c.opt);
      out.push_back({c.name, i, rep.max_rel_error, rep.checked, rep.passed});
    }
  }
  return out;
}

}  // namespace vila
