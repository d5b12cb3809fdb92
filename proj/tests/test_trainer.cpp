#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "vila/trainer.hpp"

using namespace vila;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.data.num_train = 64;
  c.data.num_val = 16;
  c.data.T = 8;
  c.model.d_model = 8;
  c.model.num_queries = 2;
  c.model.embed_hidden = 4;
  c.teacher.steps = 12;
  c.teacher.batch = 4;
  c.student.steps = 10;
  c.student.batch = 4;
  c.seed = 3;
  c.student_seed = 5;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vila_trainer_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string read_all(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<std::vector<double>> snapshot(const NamedTensors& ps) {
  std::vector<std::vector<double>> out;
  for (const auto& [n, t] : ps) out.push_back(t.values());
  return out;
}

}  // namespace

TEST(AdamW, ZeroGradientOnlyDecays) {
  Tensor p = Tensor({3}, {1.0, -2.0, 0.5}, true);
  p.zero_grad();
  AdamWState st;
  adamw_step({{"p", p}}, st, 0.1, {.weight_decay = 0.0});
  EXPECT_EQ(p.values(), (std::vector<double>{1.0, -2.0, 0.5}));
  adamw_step({{"p", p}}, st, 0.1, {.weight_decay = 0.5});
  EXPECT_EQ(p.values(), (std::vector<double>{1.0 * 0.95, -2.0 * 0.95, 0.5 * 0.95}));
}

TEST(AdamW, ConstantGradientStepApproachesLrTimesSign) {
  Tensor p = Tensor({2}, {0.0, 0.0}, true);
  AdamWState st;
  const double lr = 1e-3;
  std::vector<double> before;
  for (int step = 0; step < 1000; ++step) {
    before = p.values();
    p.zero_grad();
    auto g = p.mutable_grad();
    g[0] = 3.0;
    g[1] = -0.02;
    adamw_step({{"p", p}}, st, lr, {.weight_decay = 0.0});
  }
  EXPECT_NEAR(p[0] - before[0], -lr, 1e-9);
  EXPECT_NEAR(p[1] - before[1], lr, 1e-9);
}

TEST(AdamW, NonFiniteGradientNamesTheParameter) {
  Tensor p = Tensor({1}, {1.0}, true);
  p.zero_grad();
  p.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  AdamWState st;
  try {
    adamw_step({{"student.query_tokens", p}}, st, 0.1, {});
    FAIL();
  } catch (const NonFiniteGradient& e) {
    EXPECT_NE(std::string(e.what()).find("student.query_tokens"), std::string::npos);
  }
}

TEST(Schedule, CosineEndpointsAndMidpoint) {
  EXPECT_EQ(cosine_lr(0, 100, 1.0, 0.1), 1.0);
  EXPECT_EQ(cosine_lr(100, 100, 1.0, 0.1), 0.1);
  EXPECT_NEAR(cosine_lr(50, 100, 1.0, 0.1), 0.55, 1e-15);
  EXPECT_THROW(cosine_lr(0, 0, 1.0, 0.1), std::invalid_argument);
}

TEST(Clip, GlobalNormRescale) {
  Tensor a = Tensor({1}, {0.0}, true), b = Tensor({1}, {0.0}, true);
  a.zero_grad();
  b.zero_grad();
  a.mutable_grad()[0] = 3.0;
  b.mutable_grad()[0] = 4.0;
  const NamedTensors ps{{"a", a}, {"b", b}};
  EXPECT_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
  EXPECT_NEAR(clip_grad_norm(ps, 1.0), 1.0, 1e-15);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Checkpoint ck;
  ck.stage = "student";
  ck.step = 42;
  ck.config_digest = "abc";
  ck.extra["note"] = "x";
  ck.put("w", {2, 2}, {1.0 / 3.0, -0.0, 5e-324, std::numeric_limits<double>::infinity()});
  ck.put("b", {3}, {1e300, -1e-300, 0.1});
  const std::string bytes = serialize_checkpoint(ck);
  const Checkpoint back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.stage, "student");
  EXPECT_EQ(back.step, 42u);
  EXPECT_EQ(back.extra, ck.extra);
  ASSERT_EQ(back.tensors.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.tensors[i].first, ck.tensors[i].first);
    EXPECT_EQ(back.tensors[i].second.shape, ck.tensors[i].second.shape);
    ASSERT_EQ(back.tensors[i].second.data.size(), ck.tensors[i].second.data.size());
    for (std::size_t j = 0; j < back.tensors[i].second.data.size(); ++j) {
      EXPECT_EQ(std::bit_cast<std::uint64_t>(back.tensors[i].second.data[j]),
                std::bit_cast<std::uint64_t>(ck.tensors[i].second.data[j]));
    }
  }
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 1)), std::runtime_error);
  EXPECT_THROW(deserialize_checkpoint("abc"), std::runtime_error);
}

TEST(Metrics, CsvFormatting) {
  EXPECT_EQ(std::string(metrics_header()),
            "step,split,loss_vqa,loss_distill,accuracy,keyframe_recall,selection_overlap,tau,lr,wallclock_ms");
  MetricsRow r;
  r.step = 7;
  r.split = "train";
  r.loss_vqa = 0.1;
  r.tau = 1.0;
  EXPECT_EQ(to_csv(r), "7,train,0.1,,,,,1,,");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456.789, -2.5e17}) EXPECT_EQ(std::strtod(format_double(v).c_str(), nullptr), v);
  const auto j = to_json(r);
  EXPECT_TRUE(j["loss_distill"].is_null());
  EXPECT_EQ(j["loss_vqa"].get<double>(), 0.1);
}

TEST(Config, JsonRoundTripAndUnknownFields) {
  const TrainConfig c = tiny_config();
  const nlohmann::json j = c;
  EXPECT_EQ(nlohmann::json(j.get<TrainConfig>()), j);
  nlohmann::json bad = j;
  bad["lamda"] = 1.0;
  EXPECT_THROW(bad.get<TrainConfig>(), std::invalid_argument);
  TrainConfig neg = c;
  neg.lambda_distill = -1.0;
  EXPECT_THROW(neg.validate(), std::invalid_argument);
  TrainConfig other = c;
  other.output_dir = "elsewhere";
  EXPECT_EQ(config_digest(other), config_digest(c));
  other.student.lr = 1e-2;
  EXPECT_NE(config_digest(other), config_digest(c));
  EXPECT_EQ(teacher_digest(other), teacher_digest(c));
}

TEST(Training, RerunsProduceIdenticalMetricsFiles) {
  const auto cfg = tiny_config();
  const auto ds = generate(cfg.data);
  const auto dir = temp_dir("rerun");
  for (const char* name : {"a", "b"}) {
    MetricsWriter w(dir / name);
    TrainOptions o;
    o.metrics = &w;
    const auto t = train_teacher(cfg, ds, o);
    train_student(cfg, ds, t.checkpoint, o);
  }
  const std::string a = read_all(dir / "a.csv");
  EXPECT_GT(a.size(), 100u);
  EXPECT_EQ(a, read_all(dir / "b.csv"));
  EXPECT_EQ(read_all(dir / "a.jsonl"), read_all(dir / "b.jsonl"));
  std::filesystem::remove_all(dir);
}

TEST(Training, ResumeIsBitwiseIdentical) {
  const auto cfg = tiny_config();
  const auto ds = generate(cfg.data);
  const auto full_t = train_teacher(cfg, ds);
  TrainOptions stop;
  stop.stop_at = 5;
  const auto half_t = train_teacher(cfg, ds, stop);
  EXPECT_FALSE(half_t.finished);
  const Checkpoint reloaded_t = deserialize_checkpoint(serialize_checkpoint(half_t.checkpoint));
  TrainOptions res;
  res.resume = &reloaded_t;
  const auto rest_t = train_teacher(cfg, ds, res);
  EXPECT_EQ(snapshot(rest_t.model.named()), snapshot(full_t.model.named()));
  EXPECT_EQ(serialize_checkpoint(rest_t.checkpoint), serialize_checkpoint(full_t.checkpoint));

  const auto full_s = train_student(cfg, ds, full_t.checkpoint);
  stop.stop_at = 4;
  const auto half_s = train_student(cfg, ds, full_t.checkpoint, stop);
  const Checkpoint reloaded_s = deserialize_checkpoint(serialize_checkpoint(half_s.checkpoint));
  res.resume = &reloaded_s;
  const auto rest_s = train_student(cfg, ds, full_t.checkpoint, res);
  EXPECT_EQ(snapshot(rest_s.model.named()), snapshot(full_s.model.named()));
  ASSERT_TRUE(rest_s.final_val.accuracy && full_s.final_val.accuracy);
  EXPECT_EQ(*rest_s.final_val.accuracy, *full_s.final_val.accuracy);
}

TEST(Training, DigestMismatchesAreRejected) {
  const auto cfg = tiny_config();
  const auto ds = generate(cfg.data);
  TrainOptions stop;
  stop.stop_at = 3;
  const auto t = train_teacher(cfg, ds, stop);
  TrainConfig changed = cfg;
  changed.teacher.lr = 1e-2;
  TrainOptions res;
  res.resume = &t.checkpoint;
  EXPECT_THROW(train_teacher(changed, ds, res), std::invalid_argument);
  try {
    train_student(changed, ds, t.checkpoint);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("config digest mismatch"), std::string::npos);
  }
  Checkpoint wrong = t.checkpoint;
  wrong.stage = "student";
  EXPECT_THROW(train_student(cfg, ds, wrong), std::invalid_argument);
}

TEST(Training, FrozenSideNeverReceivesGradient) {
  auto cfg = tiny_config();
  cfg.student.steps = 20;
  const auto ds = generate(cfg.data);
  const auto t = train_teacher(cfg, ds);
  const VilaModel before = model_from_checkpoint(t.checkpoint);
  std::size_t observed = 0;
  TrainOptions o;
  o.on_step = [&](std::size_t, const VilaModel& m) {
    NamedTensors frozen{{"visual.projection", m.visual.projection}};
    append_named(frozen, "", m.teacher_side());
    for (const auto& [n, p] : frozen) {
      for (double g : p.grad()) ASSERT_EQ(g, 0.0) << n;
    }
    ++observed;
  };
  const auto s = train_student(cfg, ds, t.checkpoint, o);
  EXPECT_EQ(observed, 20u);
  EXPECT_EQ(s.audited_steps, 20u);
  EXPECT_EQ(snapshot(s.model.teacher_side()), snapshot(before.teacher_side()));
  EXPECT_EQ(s.model.visual.projection.values(), before.visual.projection.values());
}

TEST(Training, AuditFlagsStrayGradient) {
  Tensor p = Tensor({2}, {1.0, 2.0}, true);
  p.zero_grad();
  p.mutable_grad()[1] = 1e-30;
  EXPECT_THROW(detail::check_frozen({{"head.score", p}}, 3), FrozenGradientError);
}

TEST(Training, UnfrozenAnswererDoesTrain) {
  auto cfg = tiny_config();
  cfg.unfreeze_answerer = true;
  const auto ds = generate(cfg.data);
  const auto t = train_teacher(cfg, ds);
  const VilaModel before = model_from_checkpoint(t.checkpoint);
  const auto s = train_student(cfg, ds, t.checkpoint);
  EXPECT_NE(s.model.head.score.values(), before.head.score.values());
  EXPECT_EQ(snapshot(s.model.teacher.named()), snapshot(before.teacher.named()));
}

TEST(Training, AblationArmsShareTheTeacher) {
  const auto cfg = tiny_config();
  for (auto axis : {AblationAxis::Components, AblationAxis::Decoder, AblationAxis::Design, AblationAxis::Lambda}) {
    for (const auto& a : ablation_arms(cfg, axis)) EXPECT_EQ(teacher_digest(a.cfg), teacher_digest(cfg)) << a.name;
  }
  const auto comps = ablation_arms(cfg, AblationAxis::Components);
  ASSERT_EQ(comps.size(), 4u);
  EXPECT_EQ(comps[0].name, "base");
  EXPECT_FALSE(comps[0].cfg.use_prompter);
  EXPECT_EQ(comps[0].cfg.lambda_distill, 0.0);
  EXPECT_EQ(comps[3].name, "base+QFormer-Distiller+Frame-Prompter");
  EXPECT_EQ(ablation_arms(cfg, AblationAxis::Lambda).size(), 4u);
}

TEST(Latency, BenchReportsEachFrameCount) {
  const auto cfg = tiny_config();
  const auto ds = generate(cfg.data);
  const auto t = train_teacher(cfg, ds);
  const auto s = train_student(cfg, ds, t.checkpoint);
  const auto rows = bench_latency(s.model, ds.val, {4, 8}, {.batch = 4, .warmup = 2, .timed = 10});
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_GT(r.median_ms, 0.0);
    EXPECT_GE(r.p95_ms, r.median_ms);
    EXPECT_EQ(r.timed_batches, 10u);
  }
  EXPECT_THROW(bench_latency(s.model, ds.val, {9}), std::invalid_argument);
}
