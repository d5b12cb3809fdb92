#include <gtest/gtest.h>

#include <cmath>

#include "vila/grad_check.hpp"
#include "vila/surrogate.hpp"

using namespace vila;

namespace {

Tensor randn(const Shape& s, Rng& rng, double sd = 1.0) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = sd * rng.normal();
  return Tensor(s, std::move(v));
}

}  // namespace

TEST(VisualEncoder, ZeroInLinearAndDeterministic) {
  const auto a = SurrogateVisualEncoder::make(16, 8, 4, 7), b = SurrogateVisualEncoder::make(16, 8, 4, 7);
  EXPECT_EQ(a.projection.values(), b.projection.values());
  EXPECT_NE(a.projection.values(), SurrogateVisualEncoder::make(16, 8, 4, 8).projection.values());
  const Tensor z = encode_video(Tensor::zeros({1, 2, 4, 16}), a);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
  Rng rng(1);
  const Tensor x = randn({1, 2, 4, 16}, rng), y = randn({1, 2, 4, 16}, rng);
  const Tensor lhs = encode_video(add(scale(x, 2.0), y), a);
  const Tensor rhs = add(scale(encode_video(x, a), 2.0), encode_video(y, a));
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-12);
  EXPECT_THROW(encode_video(Tensor::zeros({1, 2, 3, 16}), a), DimensionError);
}

TEST(VisualEncoder, IsFrozen) {
  const auto enc = SurrogateVisualEncoder::make(16, 8, 4, 7);
  EXPECT_FALSE(enc.projection.requires_grad());
  Tensor x = Tensor::full({1, 1, 4, 16}, 0.5).set_requires_grad(true);
  backward(sum(encode_video(x, enc)));
  EXPECT_FALSE(enc.projection.has_grad());
}

TEST(TextEncoder, ShapesAndVocabularyCheck) {
  Rng rng(2);
  const auto t = SurrogateTextEncoder::make(10, 4, 6, rng);
  EXPECT_EQ(encode_text({{1, 2}, {3, 4}}, t).shape(), (Shape{2, 2, 6}));
  EXPECT_THROW(encode_text({{1, 10}}, t), std::out_of_range);
  EXPECT_THROW(encode_text({{1, 2, 3, 4, 5}}, t), DimensionError);
  EXPECT_EQ(encode_choices({{{1}, {2}, {3}}}, t).shape(), (Shape{1, 3, 6}));
}

TEST(AnswerHead, IdenticalChoicesScoreEqually) {
  Rng rng(3);
  const auto t = SurrogateTextEncoder::make(10, 4, 6, rng);
  const auto head = AnswerHead::make(6, rng);
  const Tensor logits = score_answers(randn({1, 2, 6}, rng), encode_choices({{{5}, {5}, {5}}}, t), head);
  EXPECT_EQ(logits[0], logits[1]);
  EXPECT_EQ(logits[1], logits[2]);
}

TEST(AnswerHead, PicksTheAlignedChoice) {
  AnswerHead head{identity_matrix(3)};
  const Tensor x({1, 1, 3}, {0, 1, 0});
  const Tensor choices({1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Tensor logits = score_answers(x, choices, head);
  EXPECT_EQ(logits[0], 0.0);
  EXPECT_EQ(logits[1], 1.0);
  EXPECT_EQ(logits[2], 0.0);
}

TEST(AnswerHead, PermutingChoicesPermutesLogits) {
  Rng rng(4);
  const auto head = AnswerHead::make(5, rng);
  const Tensor x = randn({2, 3, 5}, rng), c = randn({2, 4, 5}, rng);
  const Tensor a = score_answers(x, c, head);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  const Tensor b = score_answers(x, index_select(c, 1, perm), head);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(b[r * 4 + i], a[r * 4 + perm[i]], 1e-12);
}

TEST(AnswerHead, RejectsSingleChoice) {
  Rng rng(5);
  EXPECT_THROW(score_answers(randn({1, 2, 3}, rng), randn({1, 1, 3}, rng), AnswerHead::make(3, rng)),
               std::invalid_argument);
}

TEST(AnswerHead, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const auto head = AnswerHead::make(4, rng);
    const Tensor x = randn({2, 3, 4}, rng), c = randn({2, 3, 4}, rng);
    auto rep = grad_check([&](const Tensor&) { return vqa_loss(score_answers(x, c, head), {2, 0}); }, head.score);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
    rep = grad_check([&](const Tensor& v) { return vqa_loss(score_answers(v, c, head), {1, 1}, VqaLossKind::MseOneHot); },
                     x);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  }
}

TEST(VqaLoss, UniformLogitsGiveLogA) {
  const Tensor logits = Tensor::zeros({3, 5});
  EXPECT_NEAR(vqa_loss(logits, {0, 4, 2}).item(), std::log(5.0), 1e-12);
}

TEST(VqaLoss, CrossEntropyKindDelegates) {
  Rng rng(7);
  const Tensor logits = randn({4, 3}, rng);
  const std::vector<std::size_t> y{2, 0, 1, 1};
  EXPECT_EQ(vqa_loss(logits, y, VqaLossKind::CrossEntropy).item(), cross_entropy(logits, y).item());
  EXPECT_EQ(vqa_loss_from_string("mse_onehot"), VqaLossKind::MseOneHot);
  EXPECT_THROW(vqa_loss_from_string("hinge"), std::invalid_argument);
}

TEST(VqaLoss, MseOneHotClosedForm) {
  const Tensor logits = Tensor::zeros({1, 4});
  // softmax = 1/4 each; target (0, 1, 0, 0)
  const double want = (3 * 0.0625 + 0.5625) / 4.0;
  EXPECT_NEAR(vqa_loss(logits, {1}, VqaLossKind::MseOneHot).item(), want, 1e-12);
}
