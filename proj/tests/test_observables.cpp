#include "fastslow/observables.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace fastslow;
using namespace fastslow::flow;
using namespace fastslow::observables;

namespace {

FlowState start(std::uint64_t seed = 1) {
  return member_state(FlowSpec::lorenz(), seed, 0, InvariantSampling{});
}

// Centered y1 (zero mean by the x/y reflection symmetry of Lorenz).
Observable cy1() { return coordinate(0).as_centered(); }
Observable cy2() { return coordinate(1).as_centered(); }

Observable y1_cubed() { return polynomial({{1.0, {3, 0, 0}}}, "y1^3"); }

}  // namespace

TEST(Center, ConstantBecomesZero) {
  const auto cal = sample_invariant(FlowSpec::lorenz(), 2, 20.0, 50, 1.0);
  const auto c = center(constant(3.5), cal);
  EXPECT_TRUE(c.centered());
  for (const auto& s : cal) EXPECT_EQ(c.scalar(s.point), 0.0);
}

TEST(Center, Idempotent) {
  const auto cal = sample_invariant(FlowSpec::lorenz(), 2, 20.0, 200, 1.0);
  const auto once = center(coordinate(2), cal);
  const auto twice = center(once, cal);
  EXPECT_EQ(once.mean()[0], twice.mean()[0]);
  EXPECT_EQ(once.scalar(cal[17].point), twice.scalar(cal[17].point));
}

TEST(Center, EmptyCalibrationThrows) {
  EXPECT_THROW(center(coordinate(0), {}), InvalidArgument);
}

TEST(Center, LorenzY1MeanNearZeroThenExactlyZero) {
  const auto cal = sample_invariant(FlowSpec::lorenz(), 9, 100.0, 10000, 1.0);
  const auto c = center(coordinate(0), cal);
  EXPECT_NEAR(c.mean()[0], 0.0, 0.5);
  double m = 0.0;
  for (const auto& s : cal) m += c.scalar(s.point);
  EXPECT_NEAR(m / static_cast<double>(cal.size()), 0.0, 1e-12);
}

TEST(Library, StackAndCombine) {
  Point y(3);
  y << 1.0, -2.0, 3.0;
  const auto s = stack({coordinate(0), coordinate(2, 2.0)});
  ASSERT_EQ(s.arity(), 2);
  EXPECT_EQ(s(y)[0], 1.0);
  EXPECT_EQ(s(y)[1], 6.0);
  EXPECT_FALSE(s.centered());
  EXPECT_TRUE(stack({cy1(), cy2()}).centered());
  EXPECT_EQ(combine(2.0, coordinate(0), coordinate(1)).scalar(y), 0.0);
  EXPECT_EQ(y1_cubed().scalar(y), 1.0);
  const auto p = polynomial({{2.0, {1, 2, 0}}, {-1.0, {0, 0, 1}}});
  EXPECT_EQ(p.scalar(y), 2.0 * 4.0 - 3.0);
}

TEST(Birkhoff, EmptyWindowIsZero) {
  EXPECT_EQ(birkhoff_integral(FlowSpec::lorenz(), cy1(), start(), 1.0, 1.0, 0.01).norm(), 0.0);
}

TEST(Birkhoff, ConstantIntegratesToLength) {
  EXPECT_NEAR(birkhoff_integral(FlowSpec::lorenz(), constant(1.0), start(), 0.3, 2.75, 0.01)[0],
              2.45, 1e-12);
}

TEST(Birkhoff, RotationClosedForm) {
  // On the unit circle y1 = cos t, so int_0^t y1 = sin t.
  Point y0(2);
  y0 << 1.0, 0.0;
  const auto I = birkhoff_integral(FlowSpec::rotation_test(), coordinate(0), {y0, 0.0}, 0.0, 1.0, 1e-3);
  EXPECT_NEAR(I[0], std::sin(1.0), 1e-6);
}

TEST(Birkhoff, Additive) {
  const auto spec = FlowSpec::lorenz();
  const auto y0 = start();
  const double dt = 0.01;
  const auto a = birkhoff_integral(spec, cy1(), y0, 0.0, 1.5, dt);
  const auto b = birkhoff_integral(spec, cy1(), y0, 1.5, 4.0, dt);
  const auto ab = birkhoff_integral(spec, cy1(), y0, 0.0, 4.0, dt);
  EXPECT_NEAR((a + b - ab).norm(), 0.0, 1e-10);
}

TEST(Birkhoff, Linear) {
  const auto spec = FlowSpec::lorenz();
  const auto y0 = start();
  const auto a = birkhoff_integral(spec, cy1(), y0, 0.0, 3.0, 0.01)[0];
  const auto b = birkhoff_integral(spec, cy2(), y0, 0.0, 3.0, 0.01)[0];
  const auto ab = birkhoff_integral(spec, combine(-2.0, cy1(), cy2()), y0, 0.0, 3.0, 0.01)[0];
  EXPECT_NEAR(ab, -2.0 * a + b, 1e-10 * (std::abs(a) + std::abs(b) + 1.0));
}

TEST(Iterated, EmptyWindowIsZero) {
  EXPECT_EQ(iterated_integral(FlowSpec::lorenz(), cy1(), cy2(), start(), 2.0, 2.0, 0.01).norm(), 0.0);
}

TEST(Iterated, ProductRule) {
  const auto spec = FlowSpec::lorenz();
  const auto y0 = start();
  const auto v = stack({cy1(), cy2()});
  const auto w = y1_cubed();
  const Mat Svw = iterated_integral(spec, v, w, y0, 0.5, 3.0, 0.01);
  const Mat Swv = iterated_integral(spec, w, v, y0, 0.5, 3.0, 0.01);
  const Vec iv = birkhoff_integral(spec, v, y0, 0.5, 3.0, 0.01);
  const Vec iw = birkhoff_integral(spec, w, y0, 0.5, 3.0, 0.01);
  const Mat outer = iv * iw.transpose();
  EXPECT_LE((Svw + Swv.transpose() - outer).cwiseAbs().maxCoeff(), 1e-8 * (1.0 + outer.norm()));
}

TEST(Iterated, MatchesBruteForceDoubleSum) {
  const auto spec = FlowSpec::lorenz();
  const auto y0 = start(4);
  const double dt = 1e-3, T = 2.0;
  const auto o = evolve(spec, y0, T, dt);
  const std::size_t N = o.size() - 1;
  // S = sum_j w(r_j) dt * sum_{i<j} v(r_i) dt, with midpoint samples.
  std::vector<double> vm(N), wm(N);
  for (std::size_t k = 0; k < N; ++k) {
    Point mid = 0.5 * (o.points[k] + o.points[k + 1]);
    vm[k] = mid[0];
    wm[k] = mid[1];
  }
  double brute = 0.0;
  for (std::size_t j = 0; j < N; ++j) {
    double inner = 0.0;
    for (std::size_t i = 0; i < j; ++i) inner += vm[i] * dt;
    inner += 0.5 * vm[j] * dt;
    brute += inner * wm[j] * dt;
  }
  const double fast = iterated_integral(spec, cy1(), cy2(), y0, 0.0, T, dt)(0, 0);
  EXPECT_NEAR(fast, brute, 1e-3 * (1.0 + std::abs(brute)));
}

TEST(Iterated, ChenIdentity) {
  const auto spec = FlowSpec::lorenz();
  const auto y0 = start();
  const double dt = 0.01, s = 0.2, t = 1.7, u = 3.1;
  const auto v = cy1(), w = y1_cubed();
  const Mat Ssu = iterated_integral(spec, v, w, y0, s, u, dt);
  const Mat Sst = iterated_integral(spec, v, w, y0, s, t, dt);
  const Mat Stu = iterated_integral(spec, v, w, y0, t, u, dt);
  const Vec vst = birkhoff_integral(spec, v, y0, s, t, dt);
  const Vec wtu = birkhoff_integral(spec, w, y0, t, u, dt);
  const Mat rhs = Sst + Stu + vst * wtu.transpose();
  EXPECT_LE((Ssu - rhs).cwiseAbs().maxCoeff(), 1e-8 * (1.0 + Ssu.norm()));
}

TEST(Iterated, Bilinear) {
  const auto spec = FlowSpec::lorenz();
  const auto y0 = start();
  auto S = [&](const Observable& a, const Observable& b) {
    return iterated_integral(spec, a, b, y0, 0.0, 2.0, 0.01)(0, 0);
  };
  const double lhs = S(combine(3.0, cy1(), cy2()), cy1());
  const double rhs = 3.0 * S(cy1(), cy1()) + S(cy2(), cy1());
  EXPECT_NEAR(lhs, rhs, 1e-9 * (1.0 + std::abs(rhs)));
}

TEST(Wip, StartsAtZeroAndMatchesDefinition) {
  const auto spec = FlowSpec::lorenz();
  const auto y0 = start();
  const double n = 50.0, dt = 0.01;
  const auto p = wip_path(spec, cy1(), y0, n, uniform_grid(1.0, 11), dt);
  ASSERT_EQ(p.W.values.size(), 11u);
  ASSERT_EQ(p.WW_steps.size(), 10u);
  EXPECT_EQ(p.W.values.front().norm(), 0.0);
  EXPECT_EQ(p.WW.values.front().norm(), 0.0);
  const Mat S = iterated_integral(spec, cy1(), cy1(), y0, 0.0, n, dt);
  EXPECT_NEAR(p.WW.values.back()(0, 0), S(0, 0) / n, 1e-10 * (1.0 + std::abs(S(0, 0) / n)));
  const Vec I = birkhoff_integral(spec, cy1(), y0, 0.0, n, dt);
  EXPECT_NEAR(p.W.values.back()(0, 0), I[0] / std::sqrt(n), 1e-10);
}

TEST(Wip, StepIncrementsSatisfyChen) {
  const auto p = wip_path(FlowSpec::lorenz(), stack({cy1(), cy2()}), start(), 40.0, uniform_grid(1.0, 9), 0.01);
  for (std::size_t k = 0; k + 1 < p.W.values.size(); ++k) {
    const Mat& Ws = p.W.values[k];
    const Mat dW = p.W.values[k + 1] - Ws;
    const Mat inc = p.WW.values[k + 1] - p.WW.values[k] - Ws * dW.transpose();
    EXPECT_LE((inc - p.WW_steps[k]).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Wip, RequiresCenteredObservable) {
  EXPECT_THROW(wip_path(FlowSpec::lorenz(), coordinate(0), start(), 10.0, uniform_grid(1.0, 3), 0.01),
               InvalidArgument);
}

TEST(WipEps, IntegerInverseSquareMatchesExactly) {
  const auto spec = FlowSpec::lorenz();
  const auto grid = uniform_grid(1.0, 6);
  for (double eps : {0.5, 0.25, 0.1}) {
    const auto a = wip_path_eps(spec, cy1(), start(), eps, grid, 0.01);
    const auto b = wip_path(spec, cy1(), start(), std::round(1.0 / (eps * eps)), grid, 0.01);
    for (std::size_t k = 0; k < grid.size(); ++k) {
      EXPECT_NEAR(a.W.values[k](0, 0), b.W.values[k](0, 0), 1e-10);
      EXPECT_NEAR(a.WW.values[k](0, 0), b.WW.values[k](0, 0), 1e-9);
    }
  }
}

TEST(WipEps, RemainderBound) {
  // |W^eps - W_{v,n}| <= |eps n^{1/2} - 1| |W_{v,n}| + eps t sup|v|, n = [eps^-2].
  const auto spec = FlowSpec::lorenz();
  const auto y0 = start(6);
  const auto grid = uniform_grid(1.0, 21);
  for (double eps : {0.3, 0.15, 0.07}) {
    const double n = std::floor(1.0 / (eps * eps));
    const auto a = wip_path_eps(spec, cy1(), y0, eps, grid, 0.001);
    const auto b = wip_path(spec, cy1(), y0, n, grid, 0.001);
    const auto o = evolve(spec, y0, 1.0 / (eps * eps), 0.001);
    double sup = 0.0;
    for (const auto& p : o.points) sup = std::max(sup, std::abs(p[0]));
    for (std::size_t k = 0; k < grid.size(); ++k) {
      const double Wn = b.W.values[k](0, 0);
      const double bound = std::abs(eps * std::sqrt(n) - 1.0) * std::abs(Wn) + eps * grid[k] * sup;
      EXPECT_LE(std::abs(a.W.values[k](0, 0) - Wn), bound + 1e-9) << "eps=" << eps << " k=" << k;
    }
  }
}

TEST(Wip, VarianceStableUnderDoublingN) {
  // Var W_{v,n}(1) -> 2 B(v,v); compare n = 100 and n = 200 over an ensemble.
  const auto spec = FlowSpec::lorenz();
  const InvariantSampling how{20.0, 1.0, 0.01, 1.0};
  const std::uint32_t members = 300;
  auto sample = [&](double n) {
    std::vector<double> sq;
    for (std::uint32_t m = 0; m < members; ++m) {
      const auto y0 = member_state(spec, 21, m, how);
      const auto I = birkhoff_integral(spec, cy1(), y0, 0.0, n, 0.01)[0] / std::sqrt(n);
      sq.push_back(I * I);
    }
    return batch_means(sq);
  };
  const auto a = sample(100.0), b = sample(200.0);
  EXPECT_GT(a.mean, 0.0);
  EXPECT_LE(std::abs(a.mean - b.mean), 3.0 * std::hypot(a.std_error, b.std_error));
}
