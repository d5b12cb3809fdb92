#include <gtest/gtest.h>

#include "vila/grad_check.hpp"
#include "vila/optim.hpp"
#include "vila/qformer.hpp"

using namespace vila;

namespace {

Tensor randn(const Shape& s, Rng& rng, double sd = 1.0) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = sd * rng.normal();
  return Tensor(s, std::move(v));
}

QFormerConfig small_cfg() {
  QFormerConfig c;
  c.d_model = 6;
  c.num_heads = 2;
  c.num_queries = 3;
  c.channels = 4;
  c.patches = 2;
  c.frame_budget = 4;
  return c;
}

}  // namespace

TEST(QFormer, OutputShapeIndependentOfFrameCount) {
  Rng rng(1);
  const auto p = QFormerParams::init(small_cfg(), rng);
  const Tensor text = randn({2, 5, 6}, rng);
  for (std::size_t frames : {1, 2, 4}) {
    EXPECT_EQ(qformer_forward(p, randn({2, frames * 2, 6}, rng), text).shape(), (Shape{2, 5, 6}));
  }
}

TEST(QFormer, SingleQueryClosedForm) {
  // One query, one layer, identity projections: the query row attends over
  // [q; v1..vn] and the text then attends over that single row, so every
  // text position returns it unchanged.
  QFormerConfig c = small_cfg();
  c.num_queries = 1;
  c.num_heads = 1;
  c.d_model = 3;
  Rng rng(2);
  auto p = QFormerParams::init(c, rng);
  for (auto* a : {&p.self_attn[0], &p.cross_attn}) {
    a->wq = identity_matrix(3);
    a->wk = identity_matrix(3);
    a->wv = identity_matrix(3);
    a->wo = identity_matrix(3);
  }
  const Tensor visual = randn({1, 2, 3}, rng);
  const Tensor q = p.query_tokens;
  std::vector<std::vector<double>> rows{{q[0], q[1], q[2]}, {visual[0], visual[1], visual[2]}, {visual[3], visual[4], visual[5]}};
  std::vector<double> s(3);
  for (int k = 0; k < 3; ++k) s[k] = (q[0] * rows[k][0] + q[1] * rows[k][1] + q[2] * rows[k][2]) / std::sqrt(3.0);
  const double m = *std::max_element(s.begin(), s.end());
  double z = 0.0;
  for (auto& x : s) z += x = std::exp(x - m);
  std::vector<double> want(3, 0.0);
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < 3; ++j) want[j] += s[k] / z * rows[k][j];
  const Tensor out = qformer_forward(p, visual, randn({1, 4, 3}, rng));
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out[t * 3 + j], want[j], 1e-12);
}

TEST(QFormer, VisualTokenOrderDoesNotMatter) {
  Rng rng(3);
  const auto p = QFormerParams::init(small_cfg(), rng);
  const Tensor v = randn({1, 8, 6}, rng), text = randn({1, 2, 6}, rng);
  const Tensor a = qformer_forward(p, v, text);
  const Tensor b = qformer_forward(p, index_select(v, 1, {5, 2, 7, 0, 1, 6, 3, 4}), text);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(QFormer, QueryGradientMatchesFiniteDifferences) {
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    auto c = small_cfg();
    c.depth = 2;
    const auto p = QFormerParams::init(c, rng);
    const Tensor v = randn({2, 6, 6}, rng), text = randn({2, 3, 6}, rng), probe = randn({2, 3, 6}, rng);
    const auto rep =
        grad_check([&](const Tensor&) { return sum(mul(qformer_forward(p, v, text), probe)); }, p.query_tokens,
                   {.eps = 1e-4, .tol = 1e-4});
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  }
}

TEST(QFormer, FrameBudgetIsEnforced) {
  Rng rng(5);
  const auto p = QFormerParams::init(small_cfg(), rng);
  try {
    qformer_forward(p, randn({1, 10, 6}, rng), randn({1, 2, 6}, rng));
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("frame budget exceeded"), std::string::npos);
  }
  // a key mask covers the full sequence and lifts the budget check
  const Tensor w = Tensor::full({1, 10}, 1.0);
  EXPECT_NO_THROW(qformer_forward(p, randn({1, 10, 6}, rng), randn({1, 2, 6}, rng), &w));
}

TEST(QFormer, TeacherAndStudentInstancesAreStructurallySymmetric) {
  Rng rng(6);
  auto tc = small_cfg();
  tc.frame_budget = 32;
  auto sc = small_cfg();
  sc.frame_budget = 4;
  const auto t = QFormerParams::init(tc, rng), s = QFormerParams::init(sc, rng);
  const auto tn = t.named(), sn = s.named();
  ASSERT_EQ(tn.size(), sn.size());
  for (std::size_t i = 0; i < tn.size(); ++i) {
    EXPECT_EQ(tn[i].first, sn[i].first);
    EXPECT_EQ(tn[i].second.shape(), sn[i].second.shape());
  }
}

TEST(Distill, IdentityDecoderReducesToLayerNorm) {
  Rng rng(7);
  const auto dec = DistillDecoderParams::init(DecoderVariant::FC_LN, 5, 5, rng);
  const Tensor x = randn({2, 3, 5}, rng);
  const Tensor y = distill_decode(dec, x);
  const Tensor want = layer_norm(x, Tensor::full({5}, 1.0), Tensor::zeros({5}));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
}

TEST(Distill, VariantLayouts) {
  Rng rng(8);
  EXPECT_EQ(DistillDecoderParams::init(DecoderVariant::FC, 4, 4, rng).decoder.layers.size(), 1u);
  EXPECT_EQ(DistillDecoderParams::init(DecoderVariant::FC_LN, 4, 4, rng).decoder.layers.size(), 2u);
  const auto deep = DistillDecoderParams::init(DecoderVariant::FC_LN_GELU_FC, 4, 6, rng);
  ASSERT_EQ(deep.decoder.layers.size(), 4u);
  EXPECT_EQ(deep.decoder.layers[2].kind, LayerKind::Gelu);
  EXPECT_EQ(distill_decode(deep, randn({1, 2, 4}, rng)).shape(), (Shape{1, 2, 6}));
  for (auto v : {DecoderVariant::FC, DecoderVariant::FC_LN, DecoderVariant::FC_LN_GELU_FC}) {
    EXPECT_EQ(decoder_from_string(to_string(v)), v);
  }
  EXPECT_THROW(decoder_from_string("MLP"), std::invalid_argument);
}

TEST(Distill, ZeroLossWhenDecodedMatchesTeacher) {
  Rng rng(9);
  const auto dec = DistillDecoderParams::init(DecoderVariant::FC, 4, 4, rng);
  const Tensor x = randn({2, 3, 4}, rng);
  EXPECT_EQ(distill_loss(dec, x, x.clone()).item(), 0.0);
  EXPECT_THROW(distill_loss(dec, x, randn({2, 3, 5}, rng)), DimensionError);
}

TEST(Distill, TeacherReceivesNoGradient) {
  Rng rng(10);
  const auto dec = DistillDecoderParams::init(DecoderVariant::FC_LN, 4, 4, rng);
  Tensor teacher = randn({2, 3, 4}, rng).set_requires_grad(true);
  Tensor student = randn({2, 3, 4}, rng).set_requires_grad(true);
  backward(distill_loss(dec, student, teacher));
  for (double g : teacher.grad()) EXPECT_EQ(g, 0.0);
  double norm = 0.0;
  for (double g : student.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Distill, FittingAFixedTargetDecreasesMonotonically) {
  Rng rng(11);
  const auto dec = DistillDecoderParams::init(DecoderVariant::FC_LN, 6, 6, rng);
  const Tensor student = randn({4, 3, 6}, rng);
  const Tensor target = randn({4, 3, 6}, rng);
  AdamWState st;
  double prev = 1e300;
  for (int step = 0; step < 200; ++step) {
    for (const auto& [n, t] : dec.named()) Tensor(t).zero_grad();
    reset_graph();
    const Tensor loss = distill_loss(dec, student, target);
    ASSERT_LT(loss.item(), prev) << "step " << step;
    prev = loss.item();
    backward(loss);
    adamw_step(dec.named(), st, 1e-3, {.weight_decay = 0.0});
  }
}

TEST(SelectionOverlap, Examples) {
  EXPECT_DOUBLE_EQ(selection_overlap({{1, 2, 3, 4}}, {{1, 2, 3, 4}}), 1.0);
  EXPECT_DOUBLE_EQ(selection_overlap({{1, 2, 3, 4}}, {{5, 6, 7, 8}}), 0.0);
  EXPECT_DOUBLE_EQ(selection_overlap({{1, 2, 3, 4}}, {{1, 2, 9, 10, 11, 12, 13, 14}}), 0.5);
  // normalized by the first argument
  EXPECT_DOUBLE_EQ(selection_overlap({{1, 2}}, {{1, 2, 3, 4}}), 1.0);
  EXPECT_DOUBLE_EQ(selection_overlap({{1, 2}, {3, 4}}, {{1, 5}, {6, 7}}), 0.25);
  EXPECT_THROW(selection_overlap({{}}, {{1}}), std::invalid_argument);
  EXPECT_THROW(selection_overlap({{1}}, {{1}, {2}}), DimensionError);
}
