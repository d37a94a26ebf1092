#include "fastslow/flow.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace fastslow;
using namespace fastslow::flow;

namespace {

Point pt(std::initializer_list<double> xs) {
  Point p(static_cast<Eigen::Index>(xs.size()));
  int i = 0;
  for (double x : xs) p[i++] = x;
  return p;
}

FlowState on_attractor(std::uint64_t seed = 1) {
  return member_state(FlowSpec::lorenz(), seed, 0, InvariantSampling{});
}

constexpr double kTwoPi = 2.0 * std::numbers::pi;

}  // namespace

TEST(StepFlow, RotationMatchesClosedForm) {
  const auto spec = FlowSpec::rotation_test();
  for (double dt : {0.1, 0.05}) {
    const auto s = step_flow(spec, {pt({1.0, 0.0}), 0.0}, dt);
    EXPECT_NEAR(s.point[0], std::cos(dt), std::pow(dt, 5));
    EXPECT_NEAR(s.point[1], std::sin(dt), std::pow(dt, 5));
    EXPECT_DOUBLE_EQ(s.time, dt);
  }
}

TEST(StepFlow, HalfStepsAgreeToFifthOrder) {
  const auto spec = FlowSpec::lorenz();
  const auto y0 = on_attractor();
  auto defect = [&](double dt) {
    const auto full = step_flow(spec, y0, dt);
    const auto half = step_flow(spec, step_flow(spec, y0, dt / 2), dt / 2);
    return (full.point - half.point).norm();
  };
  const double ratio = defect(0.01) / defect(0.005);
  EXPECT_GT(ratio, 24.0);  // 2^5 = 32 asymptotically
  EXPECT_LT(ratio, 40.0);
}

TEST(StepFlow, DivergenceReportsTime) {
  const auto blowup = FlowSpec::custom(
      "blowup", 1, [](const Point& y, Point& out) { out[0] = y[0] * y[0]; }, pt({1.0}));
  FlowState s{pt({1.0}), 0.0};
  try {
    for (int i = 0; i < 1000; ++i) s = step_flow(blowup, s, 0.01);
    FAIL() << "expected divergence";
  } catch (const IntegrationDiverged& e) {
    EXPECT_GT(e.time(), 0.5);
    EXPECT_LT(e.time(), 1.5);
  }
}

TEST(StepFlow, LorenzOrbitStaysBoundedAndMatchesFineReference) {
  const auto spec = FlowSpec::lorenz();
  FlowState s{pt({0.0, 1.0, 1.05}), 0.0};
  for (int i = 0; i < 100000; ++i) {
    s = step_flow(spec, s, 1e-3);
    ASSERT_LT(s.point.norm(), 100.0);
  }
  // Short-horizon agreement with a 10x finer integration.
  FlowState a{pt({0.0, 1.0, 1.05}), 0.0}, b = a;
  for (int i = 0; i < 1000; ++i) a = step_flow(spec, a, 1e-3);
  for (int i = 0; i < 10000; ++i) b = step_flow(spec, b, 1e-4);
  EXPECT_LT((a.point - b.point).norm(), 1e-8);
}

TEST(StepFlow, Deterministic) {
  const auto spec = FlowSpec::lorenz();
  const auto y0 = on_attractor(3);
  const auto a = evolve(spec, y0, 5.0, 0.01);
  const auto b = evolve(spec, y0, 5.0, 0.01);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.grid[i], b.grid[i]);
    EXPECT_TRUE((a.points[i].array() == b.points[i].array()).all());
  }
}

TEST(Evolve, SingleStepHorizon) {
  const auto o = evolve(FlowSpec::rotation_test(), {pt({1.0, 0.0}), 2.0}, 0.1, 0.1);
  ASSERT_EQ(o.size(), 2u);
  EXPECT_EQ(o.grid.front(), 2.0);
  EXPECT_EQ(o.points.front()[0], 1.0);
  EXPECT_NEAR(o.grid.back(), 2.1, 1e-15);
}

TEST(Evolve, FinalPartialStepLandsOnHorizon) {
  const auto o = evolve(FlowSpec::rotation_test(), {pt({1.0, 0.0}), 0.0}, 0.25, 0.1);
  ASSERT_EQ(o.size(), 4u);
  EXPECT_NEAR(o.grid.back(), 0.25, 1e-15);
  EXPECT_NEAR(o.points.back()[0], std::cos(0.25), 1e-6);
}

TEST(Evolve, RotationIsPeriodic) {
  const auto o = evolve(FlowSpec::rotation_test(), {pt({1.0, 0.0}), 0.0}, kTwoPi, 1e-4);
  EXPECT_NEAR(o.points.back()[0], 1.0, 1e-6);
  EXPECT_NEAR(o.points.back()[1], 0.0, 1e-6);
}

TEST(Evolve, IntegratorOrderOnRotation) {
  // Max error over one period under step halving; observed order >= 3.8.
  auto max_err = [](double dt) {
    const auto o = evolve(FlowSpec::rotation_test(), {pt({1.0, 0.0}), 0.0}, kTwoPi, dt);
    double e = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i)
      e = std::max(e, std::hypot(o.points[i][0] - std::cos(o.grid[i]),
                                 o.points[i][1] - std::sin(o.grid[i])));
    return e;
  };
  const double order = std::log2(max_err(0.1) / max_err(0.05));
  EXPECT_GE(order, 3.8);
}

TEST(Evolve, LorenzTimeAverageOfZ) {
  // Long-run mean of y3 at classical parameters is 23.55 (computed offline
  // with an independent fine-step integrator over 1e5 time units).
  const auto o = evolve(FlowSpec::lorenz(), on_attractor(), 50.0, 1e-3);
  double s = 0.0;
  for (std::size_t i = 1; i < o.size(); ++i)
    s += 0.5 * (o.points[i][2] + o.points[i - 1][2]) * (o.grid[i] - o.grid[i - 1]);
  EXPECT_NEAR(s / 50.0, 23.55, 1.0);
}

TEST(SampleInvariant, SingleSampleAtBurnIn) {
  const auto s = sample_invariant(FlowSpec::lorenz(), 7, 10.0, 1, 1.0);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(s[0].time, 10.0, 1e-12);
}

TEST(SampleInvariant, SeedsGiveDifferentSamples) {
  const auto a = sample_invariant(FlowSpec::lorenz(), 1, 50.0, 3, 1.0);
  const auto b = sample_invariant(FlowSpec::lorenz(), 2, 50.0, 3, 1.0);
  for (int i = 0; i < 3; ++i) EXPECT_GT((a[i].point - b[i].point).norm(), 1e-3);
  const auto c = sample_invariant(FlowSpec::lorenz(), 1, 50.0, 3, 1.0);
  for (int i = 0; i < 3; ++i) EXPECT_TRUE((a[i].point.array() == c[i].point.array()).all());
}

TEST(SampleInvariant, LorenzMeanOfY1IsZeroBySymmetry) {
  const auto s = sample_invariant(FlowSpec::lorenz(), 11, 100.0, 10000, 1.0);
  double mean = 0.0;
  for (const auto& st : s) mean += st.point[0];
  mean /= static_cast<double>(s.size());
  EXPECT_NEAR(mean, 0.0, 0.5);
}

TEST(SampleInvariant, DisjointSegmentsAgree) {
  // Ergodic stability: time averages of y3 over two disjoint segments agree
  // within 3 combined batch-mean standard errors.
  const auto s = sample_invariant(FlowSpec::lorenz(), 5, 100.0, 8000, 0.5);
  auto segment = [&](std::size_t from) {
    std::vector<double> batches;
    for (std::size_t b = 0; b < 40; ++b) {
      double m = 0.0;
      for (std::size_t i = 0; i < 100; ++i) m += s[from + b * 100 + i].point[2];
      batches.push_back(m / 100.0);
    }
    return batch_means(batches);
  };
  const auto a = segment(0), b = segment(4000);
  EXPECT_LE(std::abs(a.mean - b.mean), 3.0 * std::hypot(a.std_error, b.std_error));
}

TEST(Poincare, RotationReturnTimeIsPeriod) {
  SectionSpec sec{pt({0.0, 1.0}), 0.0, Direction::upward, 0.1};
  const auto r = poincare_returns(FlowSpec::rotation_test(), sec, {pt({1.0, 0.0}), 0.0}, 3,
                                  {0.001, 100.0, 1e-10});
  ASSERT_EQ(r.size(), 3u);
  for (const auto& s : r) EXPECT_NEAR(s.return_time, kTwoPi, 1e-6);
}

TEST(Poincare, SamplesChainAndLieOnSection) {
  const double rho = 28.0;
  SectionSpec sec{pt({0.0, 0.0, 1.0}), rho - 1.0, Direction::downward, 0.05};
  const auto r = poincare_returns(FlowSpec::lorenz(), sec, on_attractor(), 50);
  ASSERT_EQ(r.size(), 50u);
  for (std::size_t k = 0; k < r.size(); ++k) {
    const auto& s = r[k];
    EXPECT_LE(std::abs(sec.value(s.base_point)), 1e-8 * sec.normal.norm());
    EXPECT_LE(std::abs(sec.value(s.intra_orbit.points.back())), 1e-8 * sec.normal.norm());
    EXPECT_GE(s.return_time, sec.min_return_time);
    EXPECT_NEAR(s.intra_orbit.grid.back(), s.return_time, 1e-9);
    // Downward: the field points against the normal at the crossing.
    Point f;
    FlowSpec::lorenz().field(s.base_point, f);
    EXPECT_LT(sec.normal.dot(f), 0.0);
    if (k > 0) {
      EXPECT_TRUE((r[k - 1].intra_orbit.points.back().array() == s.base_point.array()).all());
    }
  }
}

TEST(Poincare, NoCrossingThrows) {
  SectionSpec sec{pt({0.0, 1.0}), 5.0, Direction::upward, 0.1};
  EXPECT_THROW(poincare_returns(FlowSpec::rotation_test(), sec, {pt({1.0, 0.0}), 0.0}, 1,
                                {0.01, 20.0, 1e-10}),
               NoCrossingFound);
}

TEST(Poincare, LorenzMeanReturnTimeMatchesCrossingCount) {
  SectionSpec sec{pt({0.0, 0.0, 1.0}), 27.0, Direction::downward, 0.05};
  auto mean_return = [&](std::uint64_t seed) {
    std::vector<double> batches;
    double acc = 0.0;
    int n = 0;
    scan_returns(
        FlowSpec::lorenz(), sec, on_attractor(seed), 1000, -1.0, {}, [](auto&&...) {},
        [&](double r, const Point&) {
          if (r <= 0.0) return;
          acc += r;
          if (++n % 50 == 0) {
            batches.push_back(acc / 50.0);
            acc = 0.0;
          }
        });
    return batch_means(batches);
  };
  const auto a = mean_return(1), b = mean_return(2);
  EXPECT_GT(a.mean, 0.0);
  EXPECT_LE(std::abs(a.mean - b.mean), 2.0 * std::hypot(a.std_error, b.std_error) + 1e-12);

  // Brute-force oracle: count downward sign changes of y3 - 27 on a plain orbit.
  const auto o = evolve(FlowSpec::lorenz(), on_attractor(3), 1000.0, 0.01);
  int crossings = 0;
  for (std::size_t i = 1; i < o.size(); ++i)
    if (o.points[i - 1][2] > 27.0 && o.points[i][2] <= 27.0) ++crossings;
  const double brute = 1000.0 / crossings;
  EXPECT_LE(std::abs(a.mean - brute), 3.0 * a.std_error + 0.02);
}
