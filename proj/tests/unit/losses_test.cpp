#include <gtest/gtest.h>

#include <cmath>

#include "alphanet/losses.hpp"
#include "alphanet/prng.hpp"

using namespace alphanet;

namespace {

Tensor<double> random_cosines(std::uint64_t seed, std::size_t n, std::size_t k, double lo = -1, double hi = 1) {
  PrngStream s(seed, "cos");
  Tensor<double> c({n, k});
  for (auto& v : c.data()) v = lo + (hi - lo) * s.uniform();
  return c;
}

// -log(e^{z_y} / sum_j e^{z_j}) computed without any shifting, for small logits.
double direct_xent(const std::vector<double>& z, std::size_t y) {
  double denom = 0;
  for (double v : z) denom += std::exp(v);
  return -std::log(std::exp(z[y]) / denom);
}

}  // namespace

TEST(SoftmaxCe, UniformLogitsGiveLogK) {
  const Tensor<double> z({2, 5}, 0.3);
  const std::vector<int> y{1, 4};
  const auto r = softmax_ce(z, y);
  EXPECT_NEAR(r.loss, std::log(5.0), 1e-15);
  // (softmax - onehot) / N
  EXPECT_NEAR(r.grad.at(0, 0), 0.2 / 2, 1e-15);
  EXPECT_NEAR(r.grad.at(0, 1), (0.2 - 1) / 2, 1e-15);
}

TEST(SoftmaxCe, MatchesDirectFormulaAndIsShiftInvariant) {
  const auto z = random_cosines(1, 4, 6, -3, 3);
  const std::vector<int> y{0, 5, 2, 2};
  double want = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<double> row(z.ptr() + i * 6, z.ptr() + i * 6 + 6);
    want += direct_xent(row, std::size_t(y[i]));
  }
  EXPECT_NEAR(softmax_ce(z, y).loss, want / 4, 1e-13);
  Tensor<double> shifted = z;
  for (auto& v : shifted.data()) v += 500.0;
  EXPECT_NEAR(softmax_ce(shifted, y).loss, want / 4, 1e-12);
  // Gradient rows sum to zero.
  const auto g = softmax_ce(z, y).grad;
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 6; ++j) s += g.at(i, j);
    EXPECT_NEAR(s, 0.0, 1e-16);
  }
}

TEST(SoftmaxCe, RejectsBadLabels) {
  const Tensor<double> z({2, 3});
  EXPECT_THROW(softmax_ce(z, std::vector<int>{0, 3}), ConfigError);
  EXPECT_THROW(softmax_ce(z, std::vector<int>{0, -1}), ConfigError);
  EXPECT_THROW(softmax_ce(z, std::vector<int>{0}), ShapeError);
}

TEST(AmSoftmax, ReducesToSoftmaxCeWithoutMarginAndUnitScale) {
  const auto c = random_cosines(2, 8, 7);
  const std::vector<int> y{0, 1, 2, 3, 4, 5, 6, 0};
  const auto a = am_softmax(c, y, 1.0, 0.0);
  const auto b = softmax_ce(c, y);
  EXPECT_LT(std::abs(a.loss - b.loss), 1e-12);
  EXPECT_LT(max_abs_diff(a.grad, b.grad), 1e-12);
}

TEST(AmSoftmax, EqualsCrossEntropyOnMarginShiftedScaledLogits) {
  const auto c = random_cosines(3, 5, 4);
  const std::vector<int> y{3, 2, 1, 0, 3};
  const double s = 30, m = 0.35;
  double want = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> z(4);
    for (std::size_t j = 0; j < 4; ++j) z[j] = s * c.at(i, j);
    z[std::size_t(y[i])] -= s * m;
    double top = *std::max_element(z.begin(), z.end()), denom = 0;
    for (double v : z) denom += std::exp(v - top);
    want += std::log(denom) + top - z[std::size_t(y[i])];
  }
  EXPECT_NEAR(am_softmax(c, y, s, m).loss, want / 5, 1e-12);
}

TEST(AmSoftmaxLinear, MatchesAmSoftmaxWhenEveryPsiIsPositive) {
  // Target cosines above the margin put every sample on the log branch.
  Tensor<double> c = random_cosines(4, 6, 5, -1, 0.3);
  const std::vector<int> y{0, 1, 2, 3, 4, 0};
  for (std::size_t i = 0; i < 6; ++i) c.at(i, std::size_t(y[i])) = 0.5 + 0.08 * double(i);
  for (auto mode : {LinearMode::fixed, LinearMode::calibrated}) {
    LossConfig cfg;
    cfg.linear_mode = mode;
    cfg.offset = 0.0;
    const auto a = am_softmax_linear(c, y, cfg);
    const auto b = am_softmax(c, y, cfg.scale, cfg.margin);
    EXPECT_LT(std::abs(a.loss - b.loss), 1e-12);
    EXPECT_LT(max_abs_diff(a.grad, b.grad), 1e-12);
  }
}

TEST(AmSoftmaxLinear, FixedBranchIsAffineInPsi) {
  LossConfig cfg;
  cfg.linear_mode = LinearMode::fixed;
  cfg.slope = -2.0;
  cfg.offset = 0.5;
  const Tensor<double> c({1, 3}, {0.1, 0.9, -0.2});  // psi = 0.1 - 0.35 = -0.25
  const auto r = am_softmax_linear(c, std::vector<int>{0}, cfg);
  EXPECT_NEAR(r.loss, -2.0 * -0.25 + 0.5, 1e-15);
  EXPECT_EQ(r.grad, Tensor<double>({1, 3}, {-2.0, 0.0, 0.0}));
  cfg.slope = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(AmSoftmaxLinear, CalibratedModeIsContinuousAcrossZero) {
  LossConfig cfg;
  const double m = cfg.margin;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor<double> c = random_cosines(10 + seed, 1, 6);
    const std::vector<int> y{2};
    auto at = [&](double psi) {
      c.at(0, 2) = psi + m;
      return am_softmax_linear(c, y, cfg);
    };
    const double eps = 1e-9;
    const auto below = at(-eps), above = at(eps), zero = at(0.0);
    EXPECT_LT(std::abs(above.loss - below.loss), 1e-4);
    EXPECT_LT(std::abs(above.loss - zero.loss), 1e-4);
    // Gradients agree too: the branch is tangent at the switch.
    EXPECT_LT(max_abs_diff(above.grad, below.grad), 1e-4);
  }
}

TEST(AmSoftmaxLinear, LossGrowsWithMarginViolation) {
  LossConfig cfg;
  Tensor<double> c({1, 3}, {0.0, 0.2, -0.1});
  double prev = -1e9;
  for (double t = 0.34; t >= -0.9; t -= 0.05) {
    c.at(0, 0) = t;
    const double l = am_softmax_linear(c, std::vector<int>{0}, cfg).loss;
    EXPECT_GT(l, prev);
    prev = l;
  }
}

TEST(CosineLogits, AreBoundedAndScaleInvariant) {
  PrngStream s(5, "feat");
  const auto f = prng_normal<double>(s, {4, 6});
  const auto w = prng_normal<double>(s, {3, 6});
  const auto c = cosine_logits(f, w);
  for (double v : c.cos.data()) {
    EXPECT_LE(v, 1.0 + 1e-12);
    EXPECT_GE(v, -1.0 - 1e-12);
  }
  const auto c2 = cosine_logits(7.5 * f, 0.25 * w);
  EXPECT_LT(max_abs_diff(c.cos, c2.cos), 1e-14);
  EXPECT_THROW(cosine_logits(f, Tensor<double>({3, 6})), DomainError);
  Tensor<double> bad = f;
  bad[0] = std::nan("");
  const auto cb = cosine_logits(bad, w);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_TRUE(std::isnan(cb.cos.at(0, j)));
    EXPECT_FALSE(std::isnan(cb.cos.at(1, j)));
  }
}

TEST(CosineLogits, DeadFeatureRowScoresZeroWithZeroGradient) {
  PrngStream s(6, "feat");
  auto f = prng_normal<double>(s, {2, 4});
  const auto w = prng_normal<double>(s, {3, 4});
  for (std::size_t t = 0; t < 4; ++t) f.at(1, t) = 0.0;
  const auto c = cosine_logits(f, w);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(c.cos.at(1, j), 0.0);
  const auto g = cosine_logits_backward(c, Tensor<double>({2, 3}, 1.0));
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(g.features.at(1, t), 0.0);
  // The live row and the weights are unaffected by the dead one.
  Tensor<double> live({1, 4});
  for (std::size_t t = 0; t < 4; ++t) live[t] = f.at(0, t);
  const auto c1 = cosine_logits(live, w);
  const auto g1 = cosine_logits_backward(c1, Tensor<double>({1, 3}, 1.0));
  EXPECT_LT(max_abs_diff(g1.weights, g.weights), 1e-15);
}

TEST(LossConfig, ParsesAndValidates) {
  EXPECT_EQ(parse_loss_kind("am_softmax_linear"), LossKind::am_softmax_linear);
  EXPECT_THROW(parse_loss_kind("hinge"), ConfigError);
  LossConfig cfg;
  cfg.scale = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.scale = 30;
  cfg.margin = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
