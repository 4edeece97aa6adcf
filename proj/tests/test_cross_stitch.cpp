#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "support.hpp"
#include "xstitch/cross_stitch.hpp"
#include "xstitch/gradcheck.hpp"

namespace xstitch {
namespace {

using testing::Gen;
using testing::kSeeds;

CrossStitchUnit<double> per_map(double aa, double ab, double ba, double bb) {
  AlphaMatrix<double> m;
  m << aa, ab, ba, bb;
  return {Granularity::per_map, {m}, "site", 1.0};
}

Tensor<double> scalar_map(double v) { return Tensor<double>::constant({1, 1}, v); }

TEST(CrossStitchForward, IdentityPreservesStreams) {
  Tensor<double> xa(Shape{1, 2}), xb(Shape{1, 2});
  xa[0] = 1, xa[1] = 2, xb[0] = 3, xb[1] = 4;
  const auto out = cross_stitch_forward(xa, xb, per_map(1, 0, 0, 1));
  EXPECT_EQ(out.a, xa);
  EXPECT_EQ(out.b, xb);
}

TEST(CrossStitchForward, HandEvaluatedMix) {
  const auto out = cross_stitch_forward(scalar_map(2.0), scalar_map(4.0), per_map(0.7, 0.3, 0.3, 0.7));
  EXPECT_NEAR(out.a[0], 2.6, 1e-15);
  EXPECT_NEAR(out.b[0], 3.4, 1e-15);
}

TEST(CrossStitchForward, ConvexMixOfEqualInputsIsIdentity) {
  for (int s = 0; s < kSeeds; ++s) {
    Gen gen(10 + s);
    const double same = gen.uniform(0.0, 1.0);
    const auto x = gen.tensor<double>(gen.activation_shape());
    const auto out = cross_stitch_forward(x, x, per_map(same, 1.0 - same, 1.0 - same, same));
    for (Index i = 0; i < x.size(); ++i) {
      EXPECT_NEAR(out.a[i], x[i], 1e-15);
      EXPECT_NEAR(out.b[i], x[i], 1e-15);
    }
  }
}

TEST(CrossStitchForward, RejectsMismatchedShapesAndAlphaCounts) {
  Gen gen(1);
  const auto x = gen.tensor<double>({2, 3, 2, 2});
  EXPECT_THROW(cross_stitch_forward(x, gen.tensor<double>({2, 3, 2, 1}), gen.unit<double>(Granularity::per_map, 3)),
               ShapeError);
  EXPECT_THROW(cross_stitch_forward(x, x, gen.unit<double>(Granularity::per_channel, 2)), ShapeError);
  auto two = gen.unit<double>(Granularity::per_map, 1);
  two.alphas.push_back(two.alphas.front());
  EXPECT_THROW(cross_stitch_forward(x, x, two), ShapeError);
  EXPECT_THROW(cross_stitch_backward(x, x, x, gen.tensor<double>({2, 3, 4}), gen.unit<double>(Granularity::per_map, 3)),
               ShapeError);
}

TEST(CrossStitchBackward, IdentityCase) {
  const auto g = cross_stitch_backward(scalar_map(2), scalar_map(3), scalar_map(1), scalar_map(1), per_map(1, 0, 0, 1));
  EXPECT_EQ(g.a[0], 1.0);
  EXPECT_EQ(g.b[0], 1.0);
  ASSERT_EQ(g.alphas.size(), 1U);
  EXPECT_EQ(g.alphas[0](0, 0), 2.0);  // gA~ * xA
  EXPECT_EQ(g.alphas[0](1, 0), 2.0);  // gB~ * xA
  EXPECT_EQ(g.alphas[0](0, 1), 3.0);  // gA~ * xB
  EXPECT_EQ(g.alphas[0](1, 1), 3.0);  // gB~ * xB
}

TEST(CrossStitchBackward, InputGradientsUseTransposedMatrix) {
  const auto g =
      cross_stitch_backward(scalar_map(2), scalar_map(3), scalar_map(5), scalar_map(7), per_map(0.6, 0.2, 0.3, 0.9));
  EXPECT_NEAR(g.a[0], 0.6 * 5 + 0.3 * 7, 1e-15);
  EXPECT_NEAR(g.b[0], 0.2 * 5 + 0.9 * 7, 1e-15);
}

TEST(CrossStitchProperties, Linearity) {
  for (int s = 0; s < kSeeds; ++s) {
    Gen gen(100 + s);
    const auto shape = gen.activation_shape();
    const auto g = gen.coin() ? Granularity::per_map : Granularity::per_channel;
    const auto unit = gen.unit<double>(g, shape[1]);
    const auto xa = gen.tensor<double>(shape), xb = gen.tensor<double>(shape);
    const auto ya = gen.tensor<double>(shape), yb = gen.tensor<double>(shape);
    const double a = gen.uniform(-2, 2), b = gen.uniform(-2, 2);
    Tensor<double> ca(shape), cb(shape);
    ca.data() = a * xa.data() + b * ya.data();
    cb.data() = a * xb.data() + b * yb.data();
    const auto mixed = cross_stitch_forward(ca, cb, unit);
    const auto fx = cross_stitch_forward(xa, xb, unit);
    const auto fy = cross_stitch_forward(ya, yb, unit);
    for (Index i = 0; i < ca.size(); ++i) {
      EXPECT_NEAR(mixed.a[i], a * fx.a[i] + b * fy.a[i], 1e-14);
      EXPECT_NEAR(mixed.b[i], a * fx.b[i] + b * fy.b[i], 1e-14);
    }
  }
}

TEST(CrossStitchProperties, ZeroOffDiagonalsDecouple) {
  for (int s = 0; s < kSeeds; ++s) {
    Gen gen(200 + s);
    const auto shape = gen.activation_shape();
    auto unit = gen.unit<double>(gen.coin() ? Granularity::per_map : Granularity::per_channel, shape[1]);
    for (auto& m : unit.alphas) m(0, 1) = m(1, 0) = 0.0;
    const auto xa = gen.tensor<double>(shape), ga = gen.tensor<double>(shape);
    const auto out1 = cross_stitch_forward(xa, gen.tensor<double>(shape), unit);
    const auto out2 = cross_stitch_forward(xa, gen.tensor<double>(shape), unit);
    EXPECT_EQ(out1.a, out2.a);
    const auto g1 = cross_stitch_backward(xa, xa, ga, gen.tensor<double>(shape), unit);
    const auto g2 = cross_stitch_backward(xa, xa, ga, gen.tensor<double>(shape), unit);
    EXPECT_EQ(g1.a, g2.a);
  }
}

TEST(CrossStitchProperties, PerMapEquivalence) {
  for (int s = 0; s < kSeeds; ++s) {
    Gen gen(300 + s);
    const auto shape = gen.activation_shape();
    const auto shared = gen.unit<double>(Granularity::per_map, shape[1]);
    CrossStitchUnit<double> per_channel{Granularity::per_channel,
                                        std::vector<AlphaMatrix<double>>(static_cast<std::size_t>(shape[1]),
                                                                         shared.alphas.front()),
                                        "site", 1.0};
    const auto xa = gen.tensor<double>(shape), xb = gen.tensor<double>(shape);
    const auto ga = gen.tensor<double>(shape), gb = gen.tensor<double>(shape);
    const auto fm = cross_stitch_forward(xa, xb, shared);
    const auto fc = cross_stitch_forward(xa, xb, per_channel);
    EXPECT_EQ(fm.a, fc.a);
    EXPECT_EQ(fm.b, fc.b);
    const auto bm = cross_stitch_backward(xa, xb, ga, gb, shared);
    const auto bc = cross_stitch_backward(xa, xb, ga, gb, per_channel);
    EXPECT_EQ(bm.a, bc.a);
    EXPECT_EQ(bm.b, bc.b);
    AlphaMatrix<double> summed = AlphaMatrix<double>::Zero();
    for (const auto& m : bc.alphas) summed += m;
    EXPECT_LT((summed - bm.alphas.front()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(CrossStitchProperties, ShapePreserved) {
  for (int s = 0; s < kSeeds; ++s) {
    Gen gen(400 + s);
    const auto shape = gen.activation_shape();
    const auto unit = gen.unit<double>(Granularity::per_channel, shape[1]);
    const auto out = cross_stitch_forward(gen.tensor<double>(shape), gen.tensor<double>(shape), unit);
    EXPECT_EQ(out.a.shape(), shape);
    EXPECT_EQ(out.b.shape(), shape);
  }
}

// L = sum(rA * x~A) + sum(rB * x~B), differenced in long double.
double stitch_gradient_error(Granularity granularity, Gen& gen) {
  const auto shape = gen.activation_shape();
  const auto unit = gen.unit<double>(granularity, shape[1]);
  const auto xa = gen.tensor<double>(shape), xb = gen.tensor<double>(shape);
  const auto ra = gen.tensor<double>(shape), rb = gen.tensor<double>(shape);
  const auto g = cross_stitch_backward(xa, xb, ra, rb, unit);

  auto ul = unit.cast<long double>();
  auto al = xa.cast<long double>(), bl = xb.cast<long double>();
  const auto ral = ra.cast<long double>(), rbl = rb.cast<long double>();
  const auto probe = [&] {
    const auto out = cross_stitch_forward(al, bl, ul);
    return (out.a.data().array() * ral.data().array()).sum() + (out.b.data().array() * rbl.data().array()).sum();
  };
  const long double eps = 1e-6L;
  double worst = 0.0;
  const auto diff = [&](long double& t, double analytic) {
    const long double saved = t;
    t = saved + eps;
    const long double up = probe();
    t = saved - eps;
    const long double down = probe();
    t = saved;
    worst = std::max(worst, relative_error(analytic, static_cast<double>((up - down) / (2 * eps))));
  };
  for (Index k = 0; k < al.size(); ++k) diff(al[k], g.a[k]);
  for (Index k = 0; k < bl.size(); ++k) diff(bl[k], g.b[k]);
  for (std::size_t m = 0; m < ul.alphas.size(); ++m) {
    for (Index i = 0; i < 2; ++i) {
      for (Index j = 0; j < 2; ++j) diff(ul.alphas[m](i, j), g.alphas[m](i, j));
    }
  }
  return worst;
}

TEST(CrossStitchGradients, PerChannelMatchesFiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    Gen gen(500 + s);
    EXPECT_LT(stitch_gradient_error(Granularity::per_channel, gen), 1e-6) << "seed " << s;
  }
}

TEST(CrossStitchGradients, PerMapMatchesFiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    Gen gen(600 + s);
    EXPECT_LT(stitch_gradient_error(Granularity::per_map, gen), 1e-6) << "seed " << s;
  }
}

TEST(Granularity, ParsesAndPrints) {
  EXPECT_EQ(parse_granularity("per_channel"), Granularity::per_channel);
  EXPECT_EQ(parse_granularity(to_string(Granularity::per_map)), Granularity::per_map);
  EXPECT_THROW(parse_granularity("per_pixel"), ConfigError);
}

}  // namespace
}  // namespace xstitch
