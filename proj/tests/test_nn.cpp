#include <gtest/gtest.h>

#include <numeric>

#include "vila/grad_check.hpp"
#include "vila/nn.hpp"

using namespace vila;

namespace {

Tensor randn(const Shape& s, Rng& rng, double sd = 1.0) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = sd * rng.normal();
  return Tensor(s, std::move(v));
}

AttentionParams identity_attention(std::size_t d, std::size_t heads = 1) {
  AttentionParams p;
  p.d_model = d;
  p.num_heads = heads;
  p.wq = identity_matrix(d);
  p.wk = identity_matrix(d);
  p.wv = identity_matrix(d);
  p.wo = identity_matrix(d);
  return p;
}

}  // namespace

TEST(Attention, SingleKeyReturnsItsProjectedValue) {
  Rng rng(1);
  const auto p = AttentionParams::random(4, 1, rng);
  const Tensor kv = randn({1, 1, 4}, rng);
  const Tensor want = linear(linear(kv, p.wv), p.wo);
  for (int trial = 0; trial < 3; ++trial) {
    const Tensor q = randn({1, 3, 4}, rng, 5.0);
    const auto r = attend(p, q, kv);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.output[i * 4 + j], want[j], 1e-12);
  }
}

TEST(Attention, IdenticalKeysGiveUniformWeights) {
  Rng rng(2);
  const auto p = AttentionParams::random(4, 2, rng);
  const Tensor row = randn({1, 1, 4}, rng);
  const Tensor kv = concat({row, row, row, row, row}, 1);
  const auto r = attend(p, randn({1, 2, 4}, rng), kv);
  for (double w : r.weights.data()) EXPECT_NEAR(w, 0.2, 1e-12);
}

TEST(Attention, QueryProjectionGradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = AttentionParams::random(6, 2, rng);
    const Tensor q = randn({2, 3, 6}, rng), kv = randn({2, 5, 6}, rng), probe = randn({2, 3, 6}, rng);
    const auto rep = grad_check([&](const Tensor&) { return sum(mul(cross_attention(p, q, kv), probe)); }, p.wq);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  }
}

TEST(Attention, OutputStaysInConvexHullOfValues) {
  Rng rng(4);
  const auto p = identity_attention(3);
  const Tensor kv = randn({1, 6, 3}, rng);
  const auto r = attend(p, randn({1, 4, 3}, rng, 3.0), kv);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 6; ++k) {
      EXPECT_GE(r.weights[i * 6 + k], 0.0);
      s += r.weights[i * 6 + k];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    for (std::size_t j = 0; j < 3; ++j) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t k = 0; k < 6; ++k) {
        lo = std::min(lo, kv[k * 3 + j]);
        hi = std::max(hi, kv[k * 3 + j]);
      }
      EXPECT_GE(r.output[i * 3 + j], lo - 1e-12);
      EXPECT_LE(r.output[i * 3 + j], hi + 1e-12);
    }
  }
}

TEST(Attention, MaskedKeysCanChangeFreely) {
  Rng rng(5);
  const auto p = AttentionParams::random(4, 2, rng);
  const Tensor q = randn({1, 2, 4}, rng);
  Tensor kv = randn({1, 5, 4}, rng);
  const Tensor w({1, 5}, {1, 0, 1, 0, 0.5});
  const Tensor before = cross_attention(p, q, kv, &w);
  auto data = kv.mutable_data();
  for (std::size_t j = 0; j < 4; ++j) {
    data[1 * 4 + j] += 100.0 * rng.normal();
    data[3 * 4 + j] -= 50.0;
  }
  const Tensor after = cross_attention(p, q, kv, &w);
  for (std::size_t i = 0; i < before.numel(); ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(Attention, AllOnesMaskEqualsUnmasked) {
  Rng rng(6);
  const auto p = AttentionParams::random(4, 1, rng);
  const Tensor q = randn({2, 2, 4}, rng), kv = randn({2, 3, 4}, rng);
  const Tensor ones = Tensor::full({2, 3}, 1.0);
  const Tensor a = cross_attention(p, q, kv), b = cross_attention(p, q, kv, &ones);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(Attention, KeyPermutationInvarianceAndQueryEquivariance) {
  Rng rng(7);
  const auto p = AttentionParams::random(4, 2, rng);
  const Tensor q = randn({1, 3, 4}, rng), kv = randn({1, 5, 4}, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 2, 1};
  const Tensor a = cross_attention(p, q, kv);
  const Tensor b = cross_attention(p, q, index_select(kv, 1, perm));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  const std::vector<std::size_t> qperm{2, 0, 1};
  const Tensor c = cross_attention(p, index_select(q, 1, qperm), kv);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(c[i * 4 + j], a[qperm[i] * 4 + j], 1e-12);
}

TEST(Attention, RejectsBadHeadCountAndWidths) {
  Rng rng(8);
  EXPECT_THROW(AttentionParams::random(6, 4, rng), std::invalid_argument);
  const auto p = AttentionParams::random(4, 1, rng);
  EXPECT_THROW(attend(p, randn({1, 2, 3}, rng), randn({1, 2, 4}, rng)), DimensionError);
  const Tensor bad_mask = Tensor::full({1, 3}, 1.0);
  EXPECT_THROW(attend(p, randn({1, 2, 4}, rng), randn({1, 2, 4}, rng), &bad_mask), DimensionError);
}

TEST(Mlp, FcThenLayerNormClosedForm) {
  MlpParams m;
  m.fc(Tensor({2, 3}, {1, 0, 1, 0, 1, 1}), Tensor({3}, {0, 0, 0})).layer_norm(3);
  // x = (1, 3) -> (1, 3, 4); mean 8/3, var 14/9
  const Tensor y = mlp_apply(m, Tensor({1, 2}, {1, 3}));
  const double mu = 8.0 / 3.0, sd = std::sqrt(14.0 / 9.0 + 1e-5);
  EXPECT_NEAR(y[0], (1 - mu) / sd, 1e-12);
  EXPECT_NEAR(y[1], (3 - mu) / sd, 1e-12);
  EXPECT_NEAR(y[2], (4 - mu) / sd, 1e-12);
}

TEST(Mlp, ReluGeluStackAndNames) {
  Rng rng(9);
  MlpParams m;
  m.fc_random(3, 4, rng).relu().fc_random(4, 2, rng, false).gelu();
  const auto names = m.named();
  ASSERT_EQ(names.size(), 3u);
  EXPECT_EQ(names[0].first, "0.weight");
  EXPECT_EQ(names[1].first, "0.bias");
  EXPECT_EQ(names[2].first, "2.weight");
  EXPECT_EQ(mlp_apply(m, randn({5, 3}, rng)).shape(), (Shape{5, 2}));
}

TEST(Mlp, WidthMismatchIsReported) {
  Rng rng(10);
  MlpParams m;
  m.fc_random(3, 4, rng).fc_random(5, 2, rng);
  EXPECT_THROW(m.validate(), DimensionError);
  MlpParams ok;
  ok.fc_random(3, 4, rng);
  EXPECT_THROW(mlp_apply(ok, randn({2, 5}, rng)), DimensionError);
}
