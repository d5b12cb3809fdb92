// End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
// when any criterion fails. Criteria 4-8 share one teacher and one set of
// student runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <unistd.h>

#include "vila/gradcheck_suite.hpp"
#include "vila/trainer.hpp"

using namespace vila;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const std::string& what, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << " (" << what << "): " << detail << std::endl;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("vila_accept_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------

void gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t checks = 0, failed = 0;
  double worst_prim = 0.0, worst_comp = 0.0;
  for (auto scope : {GradScope::Ops, GradScope::Prompter, GradScope::QFormer, GradScope::End2End}) {
    for (const auto& r : run_grad_suite(scope, 10, 2024)) {
      ++checks;
      failed += r.passed ? 0 : 1;
      (scope == GradScope::Ops ? worst_prim : worst_comp) = std::max(scope == GradScope::Ops ? worst_prim : worst_comp, r.max_rel_error);
      if (!r.passed) std::cout << "  failed " << r.name << " instance " << r.instance << " err " << r.max_rel_error << "\n";
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << checks - failed << "/" << checks << " checks, worst primitive " << std::scientific << std::setprecision(2) << worst_prim
    << ", worst composed " << worst_comp << std::defaultfloat << ", " << num(secs, 1) << " s";
  report(1, "gradient fidelity", failed == 0 && secs < 120.0, d.str());
}

void gumbel_frequencies() {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr std::size_t L = 8, draws = 100000;
  Rng rng(derive_seed(99, 0x6B));
  double worst = 0.0;
  for (int v = 0; v < 5; ++v) {
    std::vector<double> logits(L);
    for (auto& x : logits) x = rng.normal();
    std::vector<double> tiled;
    tiled.reserve(draws * L);
    for (std::size_t i = 0; i < draws; ++i) tiled.insert(tiled.end(), logits.begin(), logits.end());
    const auto mask = gumbel_sample_hard(Tensor({draws, 1, L}, std::move(tiled)), rng);
    std::vector<double> freq(L, 0.0);
    for (const auto& sel : mask.selected_indices) freq[sel[0]] += 1.0 / draws;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double x : logits) z += std::exp(x - mx);
    for (std::size_t c = 0; c < L; ++c) worst = std::max(worst, std::abs(freq[c] - std::exp(logits[c] - mx) / z));
  }
  const double secs = seconds_since(t0);
  report(2, "Gumbel-max frequencies", worst <= 0.01 && secs < 60.0,
         "max |freq - softmax| " + num(worst) + " over 5 vectors x 100k draws, " + num(secs, 1) + " s");
}

void tau_exactness() {
  const FramePrompterConfig cfg;
  const std::size_t total = TrainConfig{}.student.steps;
  const double a = tau_schedule(0, total, cfg), b = tau_schedule(total / 2, total, cfg), c = tau_schedule(total, total, cfg);
  std::ostringstream d;
  d << std::setprecision(17) << "tau(0)=" << a << " tau(total/2)=" << b << " tau(total)=" << c;
  report(3, "temperature schedule", a == 1.0 && b == 0.1 && c == 0.01, d.str());
}

void determinism() {
  TrainConfig cfg;
  cfg.data.num_train = 200;
  cfg.data.num_val = 50;
  cfg.teacher.steps = 30;
  cfg.student.steps = 20;
  cfg.eval_every = 10;
  const fs::path dir = scratch("det");
  std::vector<std::string> csvs, jsonls;
  std::vector<Checkpoint> students;
  for (int run = 0; run < 2; ++run) {
    const Dataset ds = generate(cfg.data);
    const fs::path stem_t = dir / ("teacher" + std::to_string(run)), stem_s = dir / ("student" + std::to_string(run));
    MetricsWriter wt(stem_t), ws(stem_s);
    TrainOptions ot, os;
    ot.metrics = &wt;
    os.metrics = &ws;
    const auto t = train_teacher(cfg, ds, ot);
    students.push_back(train_student(cfg, ds, t.checkpoint, os).checkpoint);
    wt.flush();
    ws.flush();
    csvs.push_back(read_bytes(stem_t.string() + ".csv") + read_bytes(stem_s.string() + ".csv"));
    jsonls.push_back(read_bytes(stem_t.string() + ".jsonl") + read_bytes(stem_s.string() + ".jsonl"));
  }
  const bool metrics_same = csvs[0] == csvs[1] && jsonls[0] == jsonls[1] && !csvs[0].empty();

  save_checkpoint(students[0], dir / "a.ckpt");
  save_checkpoint(students[1], dir / "b.ckpt");
  save_checkpoint(load_checkpoint(dir / "a.ckpt"), dir / "a2.ckpt");
  const std::string ck = read_bytes(dir / "a.ckpt");
  const bool ckpt_same = ck == read_bytes(dir / "b.ckpt") && ck == read_bytes(dir / "a2.ckpt");

  const Dataset ds = generate(cfg.data);
  save_dataset(ds, dir / "d1");
  const Dataset back = load_dataset(dir / "d1");
  save_dataset(back, dir / "d2");
  bool data_same = dataset_digest(dir / "d1") == dataset_digest(dir / "d2");
  for (const auto& e : fs::directory_iterator(dir / "d1")) {
    data_same = data_same && read_bytes(e.path()) == read_bytes(dir / "d2" / e.path().filename());
  }
  for (std::size_t i = 0; i < ds.val.size(); ++i) data_same = data_same && back.val[i].raw_video == ds.val[i].raw_video;
  fs::remove_all(dir);
  report(9, "determinism and persistence", metrics_same && ckpt_same && data_same,
         std::string("metrics reruns ") + (metrics_same ? "identical" : "DIFFER") + ", checkpoint round-trip " +
             (ckpt_same ? "bit-exact" : "DIFFERS") + ", dataset round-trip " + (data_same ? "bit-exact" : "DIFFERS"));
}

void frozen_audit(const TrainConfig& base, const Dataset& ds, const Checkpoint& teacher) {
  TrainConfig cfg = base;
  cfg.student.steps = 200;
  cfg.audit_frozen = true;
  const VilaModel before = model_from_checkpoint(teacher);
  std::size_t observed = 0, nonzero = 0;
  TrainOptions o;
  o.on_step = [&](std::size_t, const VilaModel& m) {
    NamedTensors frozen{{"visual.projection", m.visual.projection}};
    append_named(frozen, "", m.teacher_side());
    for (const auto& [name, p] : frozen) {
      for (double g : p.grad()) nonzero += g != 0.0 ? 1 : 0;
    }
    ++observed;
  };
  const auto r = train_student(cfg, ds, teacher, o);
  bool unchanged = r.model.visual.projection.values() == before.visual.projection.values();
  const auto after = r.model.teacher_side(), orig = before.teacher_side();
  for (std::size_t i = 0; i < after.size(); ++i) unchanged = unchanged && after[i].second.values() == orig[i].second.values();
  report(10, "frozen-boundary audit", observed == 200 && r.audited_steps == 200 && nonzero == 0 && unchanged,
         std::to_string(observed) + " steps observed, " + std::to_string(nonzero) + " nonzero frozen gradient entries, frozen values " +
             (unchanged ? "unchanged" : "CHANGED"));
}

struct Run {
  double accuracy = 0.0;
  std::optional<double> recall;
  std::vector<std::vector<std::size_t>> selections;
  VilaModel model;
  double seconds = 0.0;
};

Run train_arm(TrainConfig cfg, std::uint64_t seed, const Dataset& ds, const Checkpoint& teacher) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.student_seed = seed;
  auto r = train_student(cfg, ds, teacher);
  const auto ev = evaluate_student(r.model, ds.val, cfg.use_prompter, EvalMode::Hard);
  return {*ev.row.accuracy, ev.row.keyframe_recall, ev.selections, std::move(r.model), seconds_since(t0)};
}

double mean_acc(const std::vector<Run>& runs) {
  double s = 0.0;
  for (const auto& r : runs) s += r.accuracy;
  return s / static_cast<double>(runs.size());
}

}  // namespace

int main() {
  const auto t_all = std::chrono::steady_clock::now();
  gradient_fidelity();
  gumbel_frequencies();
  tau_exactness();
  determinism();

  const TrainConfig cfg;
  const Dataset ds = generate(cfg.data);
  const auto t_teacher = std::chrono::steady_clock::now();
  const auto teacher = train_teacher(cfg, ds);
  const double teacher_secs = seconds_since(t_teacher);
  std::cout << "  shared teacher: val accuracy " << num(*teacher.final_val.accuracy) << ", " << num(teacher_secs, 1) << " s"
            << std::endl;

  frozen_audit(cfg, ds, teacher.checkpoint);

  const std::vector<std::uint64_t> seeds{11, 12, 13};
  const auto arms = ablation_arms(cfg, AblationAxis::Components);
  TrainConfig fp8 = cfg;
  fp8.model.S = 8;
  fp8.use_prompter = true;
  fp8.lambda_distill = 0.0;
  std::map<std::string, std::vector<Run>> runs;
  for (const auto& a : arms) {
    for (auto s : seeds) {
      runs[a.name].push_back(train_arm(a.cfg, s, ds, teacher.checkpoint));
      const auto& r = runs[a.name].back();
      std::cout << "  " << a.name << " seed " << s << ": accuracy " << num(r.accuracy)
                << (r.recall ? ", recall " + num(*r.recall) : std::string()) << ", " << num(r.seconds, 1) << " s" << std::endl;
    }
  }
  std::vector<Run> fp8_runs;
  for (auto s : seeds) fp8_runs.push_back(train_arm(fp8, s, ds, teacher.checkpoint));

  const auto& base = runs["base"];
  const auto& qfd = runs["base+QFormer-Distiller"];
  const auto& fp = runs["base+Frame-Prompter"];
  const auto& full = runs["base+QFormer-Distiller+Frame-Prompter"];

  // 4: recall against the enumerated uniform baseline
  {
    const auto uniform = enumerate_uniform_baseline(cfg.data.T, cfg.data.K, cfg.model.S, cfg.data.keyframe_placement, cfg.data.A);
    double worst = 1.0;
    for (const auto& r : full) worst = std::min(worst, r.recall.value_or(0.0));
    const double pipeline_secs = teacher_secs + full.front().seconds;
    report(4, "selection learning", worst >= 0.8 && pipeline_secs < 1200.0,
           "min student recall " + num(worst) + " over 3 seeds vs uniform baseline " + num(uniform.recall) +
               "; teacher + student " + num(pipeline_secs, 1) + " s");
  }

  // 5: distillation lift, seed-paired against the lambda = 0 arm
  {
    std::size_t wins = 0;
    double lift = 0.0;
    std::string pairs;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const double d = full[i].accuracy - fp[i].accuracy;
      wins += d > 0.0 ? 1 : 0;
      lift += d / static_cast<double>(seeds.size());
      pairs += (i ? ", " : "") + num(d, 3);
    }
    report(5, "distillation lift", wins == seeds.size() && lift > 0.0,
           std::to_string(wins) + "/3 seeds improve over lambda=0 (deltas " + pairs + "), mean lift " + num(lift));
  }

  // 6: ordering of the four arms by mean accuracy
  {
    const double b = mean_acc(base), q = mean_acc(qfd), f = mean_acc(fp), a = mean_acc(full);
    report(6, "component ablation ordering", a >= q && a >= f && q >= b && f >= b,
           "base " + num(b) + ", +distiller " + num(q) + ", +prompter " + num(f) + ", full " + num(a));
  }

  // 7: agreement with a wider selector vs chance agreement
  {
    bool ok = true;
    std::string parts;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      std::vector<std::vector<std::size_t>> random4;
      for (const auto& s : ds.val) random4.push_back(strategy_frames(Strategy::RandomK, cfg.data, s, cfg.model.S));
      const double wide = selection_overlap(full[i].selections, fp8_runs[i].selections);
      const double chance = selection_overlap(full[i].selections, random4);
      ok = ok && wide - chance >= 0.3;
      parts += (i ? "; " : "") + std::string("seed ") + std::to_string(seeds[i]) + " " + num(wide, 3) + " vs " + num(chance, 3);
    }
    report(7, "selection overlap", ok, "overlap with S=8 selector vs random-4: " + parts);
  }

  // 8: latency of 4 selected frames vs all 32, two runs
  {
    const std::vector<std::size_t> frames{cfg.model.S, cfg.data.T};
    const auto r1 = bench_latency(full.front().model, ds.val, frames);
    const auto r2 = bench_latency(full.front().model, ds.val, frames);
    const auto cv = [](double a, double b) { return std::abs(a - b) / std::sqrt(2.0) / (0.5 * (a + b)); };
    const double s1 = r1[1].median_ms / r1[0].median_ms, s2 = r2[1].median_ms / r2[0].median_ms;
    const double cv_lo = cv(r1[0].median_ms, r2[0].median_ms), cv_hi = cv(r1[1].median_ms, r2[1].median_ms);
    report(8, "latency", std::min(s1, s2) >= 2.0 && std::max(cv_lo, cv_hi) < 0.10,
           "speedup " + num(s1, 2) + "x / " + num(s2, 2) + "x (" + num(r1[0].median_ms, 3) + " vs " + num(r1[1].median_ms, 3) +
               " ms per video), CV of medians " + num(100 * cv_lo, 1) + "% / " + num(100 * cv_hi, 1) + "%");
  }

  std::cout << "total " << num(seconds_since(t_all), 1) << " s, " << failures << " criteria failed" << std::endl;
  return failures ? 1 : 0;
}
