#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "depthot/losses.hpp"
#include "oracles.hpp"

using namespace depthot;

namespace {

Tensor positive_map(std::size_t h, std::size_t w, std::mt19937_64& rng) { return Tensor::uniform(Shape{h, w}, 0.5, 9.0, rng); }

// Scalar-loop reference for the composite loss with replicate-padded central differences.
LossBreakdown composite_oracle(const Tensor& p, const Tensor& g) {
  const std::size_t h = p.extent(0), w = p.extent(1);
  const auto at = [&](const Tensor& t, long y, long x) {
    y = std::clamp<long>(y, 0, static_cast<long>(h) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(w) - 1);
    return t.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  };
  const auto dx = [&](const Tensor& t, long y, long x) { return 0.5 * (at(t, y, x + 1) - at(t, y, x - 1)); };
  const auto dy = [&](const Tensor& t, long y, long x) { return 0.5 * (at(t, y + 1, x) - at(t, y - 1, x)); };
  const auto F = [](double v) { return std::log(std::abs(v) + 0.5); };
  LossBreakdown r;
  for (long y = 0; y < static_cast<long>(h); ++y) {
    for (long x = 0; x < static_cast<long>(w); ++x) {
      r.depth_term += F(at(p, y, x) - at(g, y, x));
      r.grad_term += F(dx(p, y, x) - dx(g, y, x)) + F(dy(p, y, x) - dy(g, y, x));
      const double px = dx(p, y, x), py = dy(p, y, x), gx = dx(g, y, x), gy = dy(g, y, x);
      r.normal_term += 1.0 - (px * gx + py * gy + 1.0) / std::sqrt((px * px + py * py + 1) * (gx * gx + gy * gy + 1));
    }
  }
  const double n = static_cast<double>(h * w);
  r.depth_term /= n;
  r.grad_term /= n;
  r.normal_term /= n;
  r.total = r.depth_term + r.grad_term + r.normal_term;
  return r;
}

}  // namespace

TEST(CompositeLoss, IdentityIsExactlyThreeLnHalf) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 10; ++rep) {
    const Tensor g = positive_map(5 + rep, 7, rng);
    const LossBreakdown r = composite_loss(g, g);
    EXPECT_EQ(r.depth_term, std::log(0.5));
    EXPECT_EQ(r.grad_term, 2.0 * std::log(0.5));
    EXPECT_EQ(r.normal_term, 0.0);
    EXPECT_EQ(r.total, 3.0 * std::log(0.5));
  }
}

TEST(CompositeLoss, ConstantOffsetOfHalf) {
  std::mt19937_64 rng(2);
  const Tensor g = positive_map(6, 6, rng);
  Tensor p = g;
  for (double& v : p.data()) v += 0.5;
  const LossBreakdown r = composite_loss(p, g);
  EXPECT_NEAR(r.depth_term, 0.0, 1e-15);
  EXPECT_NEAR(r.grad_term, 2.0 * std::log(0.5), 1e-12);
  EXPECT_NEAR(r.normal_term, 0.0, 1e-12);
}

TEST(CompositeLoss, MatchesScalarOracle) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 5; ++rep) {
    const Tensor p = positive_map(5, 8, rng), g = positive_map(5, 8, rng);
    const LossBreakdown r = composite_loss(p, g), ref = composite_oracle(p, g);
    EXPECT_NEAR(r.depth_term, ref.depth_term, 1e-12);
    EXPECT_NEAR(r.grad_term, ref.grad_term, 1e-12);
    EXPECT_NEAR(r.normal_term, ref.normal_term, 1e-12);
    EXPECT_NEAR(r.total, ref.total, 1e-12);
  }
}

TEST(CompositeLoss, MaskRestrictsTheMean) {
  std::mt19937_64 rng(4);
  const Tensor g = positive_map(4, 4, rng);
  Tensor p = g, mask(Shape{4, 4}, 1.0);
  p.at(0, 0) += 10.0;
  mask.at(0, 0) = 0.0;
  EXPECT_EQ(composite_loss(p, g, mask).depth_term, std::log(0.5));
  EXPECT_GT(composite_loss(p, g).depth_term, std::log(0.5));
}

TEST(CompositeLoss, Rejections) {
  const Tensor g(Shape{3, 3}, 1.0);
  EXPECT_THROW(composite_loss(g, Tensor(Shape{3, 4}, 1.0)), ShapeError);
  EXPECT_THROW(composite_loss(g, Tensor(Shape{3, 3}, 0.0)), std::domain_error);
  EXPECT_THROW(composite_loss(g, g, Tensor(Shape{3, 3}, 0.0)), std::invalid_argument);
  EXPECT_THROW(composite_loss(g, g, Tensor(Shape{3, 3}, 0.5)), std::invalid_argument);
}

TEST(CompositeLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const Tensor p = positive_map(5, 5, rng), g = positive_map(5, 5, rng);
  Tape t;
  const Var x = t.param(p);
  t.backward(composite_loss(x, t.constant(g)).total);
  const auto f = [&](const Tensor& at) { return composite_loss(at, g).total; };
  EXPECT_LT(oracle::max_rel_error(t.grad(x).values(), oracle::numeric_gradient(f, p), 1e-6), 1e-5);
}

TEST(SiLoss, UniformLogOffsetIsHalfSquare) {
  std::mt19937_64 rng(6);
  for (double c : {-1.0, -0.3, 0.0, 0.25, 2.0}) {
    const Tensor g = positive_map(4, 6, rng);
    Tensor p = g;
    for (double& v : p.data()) v *= std::exp(c);
    EXPECT_NEAR(si_loss(p, g), c * c / 2.0, 1e-12);
  }
}

TEST(SiLoss, MatchesDefinition) {
  std::mt19937_64 rng(7);
  const Tensor p = positive_map(3, 5, rng), g = positive_map(3, 5, rng);
  double s = 0, s2 = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = std::log(p[i]) - std::log(g[i]);
    s += d;
    s2 += d * d;
  }
  EXPECT_NEAR(si_loss(p, g), s2 / 15.0 - s * s / (2.0 * 15 * 15), 1e-13);
  EXPECT_THROW(si_loss(p, Tensor(Shape{5, 3}, 1.0)), ShapeError);
}

TEST(Evaluate, IdentityIsPerfect) {
  std::mt19937_64 rng(8);
  const Tensor g = positive_map(6, 6, rng);
  const MetricReport r = evaluate(g, g);
  EXPECT_EQ(r.values(), (std::vector<double>{0, 0, 0, 1, 1, 1, 0}));
}

TEST(Evaluate, UniformScaleExample) {
  const Tensor g = Tensor::vector({1, 2, 4, 8});
  Tensor p = g;
  for (double& v : p.data()) v *= 1.25;
  const MetricReport r = evaluate(p, g);
  EXPECT_DOUBLE_EQ(r.abs_rel, 0.25);
  EXPECT_DOUBLE_EQ(r.log10, std::log10(1.25));
  EXPECT_EQ(r.delta1, 1.0);  // ratio exactly 1.25 counts
  EXPECT_NEAR(r.rms, std::sqrt((0.0625 + 0.25 + 1 + 4) / 4), 1e-15);
  EXPECT_EQ(r.rmse, r.rms);
}

TEST(Evaluate, MatchesOracle) {
  std::mt19937_64 rng(9);
  const Tensor p = positive_map(7, 7, rng), g = positive_map(7, 7, rng);
  double ar = 0, se = 0, lg = 0, d[3] = {0, 0, 0};
  for (std::size_t i = 0; i < p.size(); ++i) {
    ar += std::abs(p[i] - g[i]) / g[i];
    se += (p[i] - g[i]) * (p[i] - g[i]);
    lg += std::abs(std::log10(p[i] / g[i]));
    const double ratio = std::max(p[i] / g[i], g[i] / p[i]);
    for (int k = 0; k < 3; ++k) d[k] += ratio < std::pow(1.25, k + 1);
  }
  const MetricReport r = evaluate(p, g);
  EXPECT_NEAR(r.abs_rel, ar / 49, 1e-14);
  EXPECT_NEAR(r.rms, std::sqrt(se / 49), 1e-14);
  EXPECT_NEAR(r.log10, lg / 49, 1e-14);
  EXPECT_DOUBLE_EQ(r.delta1, d[0] / 49);
  EXPECT_DOUBLE_EQ(r.delta2, d[1] / 49);
  EXPECT_DOUBLE_EQ(r.delta3, d[2] / 49);
}

TEST(Evaluate, DeltasAreNested) {
  std::mt19937_64 rng(10);
  for (int rep = 0; rep < 20; ++rep) {
    const MetricReport r = evaluate(positive_map(5, 5, rng), positive_map(5, 5, rng));
    EXPECT_LE(r.delta1, r.delta2);
    EXPECT_LE(r.delta2, r.delta3);
    EXPECT_GE(r.delta1, 0.0);
    EXPECT_LE(r.delta3, 1.0);
  }
}

TEST(Evaluate, MaskAndRejections) {
  const Tensor g = Tensor::vector({1, 2, 3}), p = Tensor::vector({1, 2, 30});
  EXPECT_EQ(evaluate(p, g, Tensor::vector({1, 1, 0})).abs_rel, 0.0);
  EXPECT_THROW(evaluate(p, g, Tensor::vector({0, 0, 0})), std::invalid_argument);
  EXPECT_THROW(evaluate(p, Tensor::vector({1, 0, 3})), std::domain_error);
  EXPECT_THROW(evaluate(Tensor::vector({1, -2, 3}), g), std::domain_error);
  EXPECT_THROW(evaluate(p, Tensor::vector({1, 2})), ShapeError);
}

TEST(Evaluate, CsvLayout) {
  const Tensor g = Tensor::vector({1, 2});
  EXPECT_EQ(evaluate(g, g).to_csv(), "abs_rel,rms,log10,delta1,delta2,delta3,rmse\n0,0,0,1,1,1,0\n");
}

TEST(Rmse, Example) {
  EXPECT_DOUBLE_EQ(rmse(Tensor::vector({0, 0}), Tensor::vector({3, 4})), std::sqrt(12.5));
}
