// vila_cli: data generation, two-stage training, evaluation, ablations,
// gradient checks and latency benchmarks.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
// 3 verification failure.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vila/gradcheck_suite.hpp"
#include "vila/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vila;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;
constexpr int kVerification = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string build_digest() {
  try {
    return hex64(fnv1a(detail::slurp("/proc/self/exe")));
  } catch (const std::exception&) {
    return "unknown";
  }
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw UsageError("cannot read " + p.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw UsageError(p.string() + ": " + e.what());
  }
}

TrainConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  try {
    return read_json(path).get<TrainConfig>();
  } catch (const json::exception& e) {
    throw UsageError(path + ": " + e.what());
  }
}

/// --out wins, then VILA_OUTPUT_DIR, then the fallback.
fs::path output_dir(const std::string& flag, const std::string& fallback) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("VILA_OUTPUT_DIR"); env && *env) return env;
  return fallback;
}

void guard_overwrite(const std::vector<fs::path>& targets, bool force) {
  for (const auto& t : targets) {
    if (fs::exists(t) && !force) throw UsageError(t.string() + " already exists; pass --force to overwrite");
  }
}

/// Written once at the end of a command, via a temp file and rename.
struct RunManifest {
  explicit RunManifest(std::string cmd) : command(std::move(cmd)), started(utc_now()) {}

  std::string command;
  json config = json::object();
  std::string dataset_digest;
  std::string started;
  std::vector<fs::path> artifacts;
  std::string status = "ok";
  json summary = json::object();

  void write(const fs::path& path) const {
    json j{{"command", command},
           {"config", config},
           {"build_digest", build_digest()},
           {"dataset_digest", dataset_digest},
           {"started", started},
           {"finished", utc_now()},
           {"status", status},
           {"summary", summary}};
    json arts = json::array();
    for (const auto& a : artifacts) arts.push_back(a.string());
    arts.push_back(path.string());
    j["artifacts"] = arts;
    detail::write_atomic(path, j.dump(2) + "\n");
  }
};

/// Dataset from --data, or generated from the config when absent.
Dataset obtain_dataset(const std::string& data_dir, const DatasetSpec& spec, std::string& digest) {
  if (data_dir.empty()) {
    Dataset ds = generate(spec);
    digest = hex64(fnv1a(json(spec).dump()));
    return ds;
  }
  Dataset ds = load_dataset(data_dir);
  digest = dataset_digest(data_dir);
  return ds;
}

std::vector<std::size_t> parse_list(const std::string& s, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || item[0] == '-') throw UsageError(std::string("malformed ") + what + " list: " + s);
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw UsageError(std::string("empty ") + what + " list");
  return out;
}

std::string fixed(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string spec, out;
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& a) {
  RunManifest man("gen-data");
  DatasetSpec spec;
  if (!a.spec.empty()) {
    try {
      spec = read_json(a.spec).get<DatasetSpec>();
    } catch (const json::exception& e) {
      throw UsageError(a.spec + ": " + e.what());
    }
  }
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const fs::path out = output_dir(a.out, "data");
  guard_overwrite({out / "manifest.json"}, a.force);
  const Dataset ds = generate(spec);
  save_dataset(ds, out);
  man.config = spec;
  man.dataset_digest = dataset_digest(out);
  man.artifacts = {out / "manifest.json", out / "train.f32", out / "val.f32"};
  man.summary = {{"train", ds.train.size()},
                 {"val", ds.val.size()},
                 {"self_decoder_accuracy", oracle_accuracy(Strategy::KeyframeOracle, ds, spec.K)}};
  man.write(out / "run_manifest.json");
  std::cout << "wrote " << ds.train.size() << " train / " << ds.val.size() << " val samples to " << out.string() << "\n"
            << "self-decoder accuracy " << man.summary["self_decoder_accuracy"].get<double>() << "\n"
            << "digest " << man.dataset_digest << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, stage = "teacher", teacher_ckpt, data, out, resume;
  std::size_t stop_at = 0;
  bool force = false, print_default = false;
};

int cmd_train(const TrainArgs& a) {
  if (a.print_default) {
    std::cout << json(TrainConfig{}).dump(2) << "\n";
    return 0;
  }
  RunManifest man("train " + a.stage);
  TrainConfig cfg = load_config(a.config);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (a.stage == "student" && a.teacher_ckpt.empty()) throw UsageError("the student stage needs --teacher-ckpt");
  const fs::path out = output_dir(a.out, cfg.output_dir);
  const fs::path ckpt = out / (a.stage + ".ckpt"), metrics = out / (a.stage + "_metrics");
  if (a.resume.empty()) guard_overwrite({ckpt, fs::path(metrics.string() + ".csv")}, a.force);
  fs::create_directories(out);

  const Dataset ds = obtain_dataset(a.data, cfg.data, man.dataset_digest);
  if (!a.data.empty() && json(ds.spec) != json(cfg.data)) {
    throw UsageError("dataset at " + a.data + " was generated from a different spec than the config's data section");
  }
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);
  MetricsWriter writer(metrics, resume.has_value());
  TrainOptions opts;
  opts.metrics = &writer;
  opts.resume = resume ? &*resume : nullptr;
  opts.stop_at = a.stop_at;

  TrainResult r = [&] {
    if (a.stage == "teacher") return train_teacher(cfg, ds, opts);
    const Checkpoint teacher = load_checkpoint(a.teacher_ckpt);
    return train_student(cfg, ds, teacher, opts);
  }();
  save_checkpoint(r.checkpoint, ckpt);
  man.config = cfg;
  man.artifacts = {ckpt, fs::path(metrics.string() + ".csv"), fs::path(metrics.string() + ".jsonl")};
  man.status = r.finished ? "ok" : "stopped";
  man.summary = {{"steps_completed", r.checkpoint.step}, {"clipped_steps", r.clipped_steps}};
  if (r.finished) {
    man.summary["val_accuracy"] = *r.final_val.accuracy;
    if (r.final_val.keyframe_recall) man.summary["val_keyframe_recall"] = *r.final_val.keyframe_recall;
    std::cout << a.stage << " val accuracy " << fixed(*r.final_val.accuracy);
    if (a.stage == "student" && r.final_val.keyframe_recall) std::cout << ", keyframe recall " << fixed(*r.final_val.keyframe_recall);
    std::cout << "\n";
  } else {
    std::cout << a.stage << " stopped after " << r.checkpoint.step << " steps\n";
  }
  if (a.stage == "student") man.summary["audited_steps"] = r.audited_steps;
  man.write(out / (a.stage + "_manifest.json"));
  std::cout << "checkpoint " << ckpt.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, out, mode = "hard";
  std::size_t samples = 0;
  bool force = false;
};

int cmd_eval(const EvalArgs& a) {
  if (a.mode != "hard" && a.mode != "soft-tau") throw UsageError("--mode must be hard or soft-tau");
  RunManifest man("eval");
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const VilaModel m = model_from_checkpoint(ck);
  const TrainConfig cfg = ck.extra.at("config").get<TrainConfig>();
  const Dataset ds = obtain_dataset(a.data, cfg.data, man.dataset_digest);
  check_dataset_matches(m, ds.spec);
  const fs::path out = output_dir(a.out, cfg.output_dir);
  const std::string tag = ck.stage + "_" + a.mode;
  const fs::path metrics = out / ("eval_" + tag), selections = out / ("selections_" + tag + ".jsonl");
  guard_overwrite({fs::path(metrics.string() + ".csv")}, a.force);
  fs::create_directories(out);

  EvalResult r;
  if (ck.stage == "teacher") {
    std::cerr << "note: teacher checkpoint; reporting accuracy only (no frame selection to score)\n";
    r = evaluate_teacher(m, ds.val, a.samples);
  } else {
    r = evaluate_student(m, ds.val, cfg.use_prompter, a.mode == "hard" ? EvalMode::Hard : EvalMode::SoftTau, a.samples);
  }
  r.row.step = ck.step;
  MetricsWriter w(metrics);
  w.write(r.row);
  w.flush();
  man.artifacts = {fs::path(metrics.string() + ".csv"), fs::path(metrics.string() + ".jsonl")};
  if (!r.selections.empty()) {
    std::ostringstream os;
    for (std::size_t i = 0; i < r.selections.size(); ++i) {
      os << json{{"index", i}, {"selected", r.selections[i]}, {"keyframes", ds.val[i].keyframes},
                 {"predicted", r.predictions[i]}, {"answer", ds.val[i].answer_idx}}
                .dump()
         << "\n";
    }
    detail::write_atomic(selections, os.str());
    man.artifacts.push_back(selections);
  }
  man.config = cfg;
  man.summary = to_json(r.row);
  man.write(out / ("eval_" + tag + "_manifest.json"));
  std::cout << "accuracy " << fixed(*r.row.accuracy);
  if (r.row.keyframe_recall) std::cout << ", keyframe recall " << fixed(*r.row.keyframe_recall);
  std::cout << " (" << r.predictions.size() << " samples, " << a.mode << ")\n";
  return 0;
}

struct AblateArgs {
  std::string config, axis = "components", teacher_ckpt, data, out, seeds = "11,12,13";
  bool force = false;
};

int cmd_ablate(const AblateArgs& a) {
  RunManifest man("ablate " + a.axis);
  TrainConfig cfg = load_config(a.config);
  AblationAxis axis;
  try {
    cfg.validate();
    axis = axis_from_string(a.axis);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  std::vector<std::uint64_t> seeds;
  for (auto s : parse_list(a.seeds, "seed")) seeds.push_back(s);
  const fs::path out = output_dir(a.out, cfg.output_dir);
  const fs::path table = out / ("ablation_" + a.axis + ".csv");
  guard_overwrite({table}, a.force);
  fs::create_directories(out);
  const Dataset ds = obtain_dataset(a.data, cfg.data, man.dataset_digest);

  Checkpoint teacher;
  if (a.teacher_ckpt.empty()) {
    std::cout << "training the shared teacher (" << cfg.teacher.steps << " steps)\n";
    teacher = train_teacher(cfg, ds).checkpoint;
    save_checkpoint(teacher, out / "teacher.ckpt");
    man.artifacts.push_back(out / "teacher.ckpt");
  } else {
    teacher = load_checkpoint(a.teacher_ckpt);
  }
  const auto arms = ablation_arms(cfg, axis);
  const auto results = run_ablation(arms, ds, teacher, seeds);

  // seed-paired deltas against the first arm
  std::map<std::uint64_t, double> reference;
  for (const auto& r : results) {
    if (r.arm == arms.front().name) reference[r.student_seed] = r.accuracy;
  }
  std::ostringstream csv;
  csv << "# shared teacher digest " << teacher.extra.value("teacher_digest", "") << ", teacher step " << teacher.step << "\n";
  csv << "arm,student_seed,accuracy,keyframe_recall,delta_vs_" << csv_field(arms.front().name) << "\n";
  for (const auto& r : results) {
    csv << csv_field(r.arm) << "," << r.student_seed << "," << format_double(r.accuracy) << ","
        << (r.recall ? format_double(*r.recall) : "") << "," << format_double(r.accuracy - reference[r.student_seed]) << "\n";
  }
  detail::write_atomic(table, csv.str());
  man.artifacts.push_back(table);

  std::cout << std::left << std::setw(40) << "arm" << std::setw(12) << "accuracy" << std::setw(12) << "recall"
            << "delta\n";
  for (const auto& arm : arms) {
    double acc = 0.0, rec = 0.0, delta = 0.0;
    bool has_rec = false;
    for (const auto& r : results) {
      if (r.arm != arm.name) continue;
      acc += r.accuracy;
      delta += r.accuracy - reference[r.student_seed];
      if (r.recall) {
        rec += *r.recall;
        has_rec = true;
      }
    }
    const double n = static_cast<double>(seeds.size());
    std::cout << std::setw(40) << arm.name << std::setw(12) << fixed(acc / n) << std::setw(12)
              << (has_rec ? fixed(rec / n) : "-") << fixed(delta / n) << "\n";
    man.summary[arm.name] = {{"mean_accuracy", acc / n}};
  }
  man.config = cfg;
  man.write(out / ("ablation_" + a.axis + "_manifest.json"));
  return 0;
}

struct GradArgs {
  std::string scope = "ops";
  std::size_t instances = 10;
  std::uint64_t seed = 1;
};

int cmd_gradcheck(const GradArgs& a) {
  GradScope scope;
  try {
    scope = grad_scope_from_string(a.scope);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto results = run_grad_suite(scope, a.instances, a.seed);
  std::map<std::string, std::pair<double, bool>> worst;
  std::size_t failures = 0;
  for (const auto& r : results) {
    auto& w = worst.try_emplace(r.name, 0.0, true).first->second;
    w.first = std::max(w.first, r.max_rel_error);
    w.second = w.second && r.passed;
    failures += r.passed ? 0 : 1;
  }
  for (const auto& [name, w] : worst) {
    std::cout << (w.second ? "ok   " : "FAIL ") << std::left << std::setw(36) << name << " max rel err " << std::scientific
              << std::setprecision(2) << w.first << std::defaultfloat << "\n";
  }
  std::cout << results.size() - failures << "/" << results.size() << " checks passed\n";
  return failures ? kVerification : 0;
}

struct BenchArgs {
  std::string ckpt, data, out, frames = "4,8,16,32";
  std::size_t timed = 200, warmup = 20;
  bool force = false;
};

int cmd_bench(const BenchArgs& a) {
  const auto frames = parse_list(a.frames, "frames");
  RunManifest man("bench");
  const Checkpoint ck = load_checkpoint(a.ckpt);
  if (ck.stage != "student") throw UsageError("bench needs a student checkpoint");
  const VilaModel m = model_from_checkpoint(ck);
  const TrainConfig cfg = ck.extra.at("config").get<TrainConfig>();
  for (auto f : frames) {
    if (f == 0 || f > m.data.T) throw UsageError("frame count " + std::to_string(f) + " outside [1, " + std::to_string(m.data.T) + "]");
  }
  const Dataset ds = obtain_dataset(a.data, cfg.data, man.dataset_digest);
  check_dataset_matches(m, ds.spec);
  const fs::path out = output_dir(a.out, cfg.output_dir);
  const fs::path table = out / "latency.csv";
  guard_overwrite({table}, a.force);
  fs::create_directories(out);
  const auto rows = bench_latency(m, ds.val, frames, {.batch = 4, .warmup = a.warmup, .timed = a.timed});
  std::ostringstream csv;
  csv << "frames,median_ms_per_video,p95_ms_per_video,timed_batches\n";
  std::cout << std::left << std::setw(8) << "frames" << std::setw(14) << "median ms" << "p95 ms\n";
  for (const auto& r : rows) {
    csv << r.frames << "," << format_double(r.median_ms) << "," << format_double(r.p95_ms) << "," << r.timed_batches << "\n";
    std::cout << std::setw(8) << r.frames << std::setw(14) << fixed(r.median_ms, 3) << fixed(r.p95_ms, 3) << "\n";
  }
  detail::write_atomic(table, csv.str());
  const auto find = [&](std::size_t f) -> const LatencyRow* {
    for (const auto& r : rows)
      if (r.frames == f) return &r;
    return nullptr;
  };
  if (const auto *lo = find(cfg.model.S), *hi = find(m.data.T); lo && hi && lo != hi) {
    const double speedup = hi->median_ms / lo->median_ms;
    std::cout << "speedup " << lo->frames << " vs " << hi->frames << " frames: " << fixed(speedup, 2) << "x\n";
    man.summary["speedup"] = speedup;
  }
  man.config = cfg;
  man.artifacts = {table};
  man.write(out / "bench_manifest.json");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Keyframe selection and distillation for video question answering"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate the synthetic planted-keyframe dataset");
  g->add_option("--spec", gen.spec, "Dataset spec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "Output directory (default: $VILA_OUTPUT_DIR or ./data)");
  g->add_flag("--force", gen.force, "Overwrite an existing dataset");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Run one training stage");
  t->add_option("--config", tr.config, "Training config JSON (defaults when omitted)")->check(CLI::ExistingFile);
  t->add_option("--stage", tr.stage, "teacher or student")->check(CLI::IsMember({"teacher", "student"}));
  t->add_option("--teacher-ckpt", tr.teacher_ckpt, "Teacher checkpoint (student stage)")->check(CLI::ExistingFile);
  t->add_option("--data", tr.data, "Dataset directory (generated from the config when omitted)")->check(CLI::ExistingDirectory);
  t->add_option("--out", tr.out, "Output directory (default: $VILA_OUTPUT_DIR or the config's output_dir)");
  t->add_option("--resume", tr.resume, "Continue from a checkpoint of the same stage and config")->check(CLI::ExistingFile);
  t->add_option("--stop-at", tr.stop_at, "Stop after this many completed steps and checkpoint");
  t->add_flag("--force", tr.force, "Overwrite existing outputs");
  t->add_flag("--print-default-config", tr.print_default, "Print the default config as JSON and exit");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  e->add_option("--data", ev.data, "Dataset directory")->check(CLI::ExistingDirectory);
  e->add_option("--mode", ev.mode, "hard or soft-tau");
  e->add_option("--samples", ev.samples, "Evaluate only the first N validation samples");
  e->add_option("--out", ev.out, "Output directory");
  e->add_flag("--force", ev.force, "Overwrite existing outputs");

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Train matched student arms against one shared teacher");
  a->add_option("--config", ab.config, "Training config JSON")->check(CLI::ExistingFile);
  a->add_option("--axis", ab.axis, "components, decoder, design or lambda");
  a->add_option("--teacher-ckpt", ab.teacher_ckpt, "Reuse this teacher instead of training one")->check(CLI::ExistingFile);
  a->add_option("--data", ab.data, "Dataset directory")->check(CLI::ExistingDirectory);
  a->add_option("--seeds", ab.seeds, "Comma-separated student seeds");
  a->add_option("--out", ab.out, "Output directory");
  a->add_flag("--force", ab.force, "Overwrite existing outputs");

  GradArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  c->add_option("--scope", gc.scope, "ops, prompter, qformer or end2end");
  c->add_option("--instances", gc.instances, "Random instances per check")->check(CLI::PositiveNumber);
  c->add_option("--seed", gc.seed, "Seed for the random instances");

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "Student inference latency per frame budget");
  b->add_option("--ckpt", be.ckpt, "Student checkpoint")->required()->check(CLI::ExistingFile);
  b->add_option("--frames", be.frames, "Comma-separated frame counts");
  b->add_option("--data", be.data, "Dataset directory")->check(CLI::ExistingDirectory);
  b->add_option("--timed", be.timed, "Timed batches per frame count")->check(CLI::PositiveNumber);
  b->add_option("--warmup", be.warmup, "Untimed warmup batches");
  b->add_option("--out", be.out, "Output directory");
  b->add_flag("--force", be.force, "Overwrite existing outputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*a) return cmd_ablate(ab);
    if (*c) return cmd_gradcheck(gc);
    if (*b) return cmd_bench(be);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
