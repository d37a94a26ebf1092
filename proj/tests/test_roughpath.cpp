#include "fastslow/roughpath.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace fastslow;
using namespace fastslow::rough;

namespace {

std::vector<double> grid01(int steps, double T = 1.0) {
  std::vector<double> g(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) g[static_cast<std::size_t>(i)] = T * i / steps;
  return g;
}

Vec v1(double a) { return Vec::Constant(1, a); }
Vec v2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

// Smooth 2d driver and its derivative.
Vec smooth_w(double t) { return v2(std::sin(3.0 * t), std::cos(2.0 * t) - 1.0); }
Vec smooth_dw(double t) { return v2(3.0 * std::cos(3.0 * t), -2.0 * std::sin(2.0 * t)); }

// Test system on R^2 with V(t) = t and a 2d W.
VectorFieldPair test_fields() {
  VectorFieldPair f;
  f.d = 2;
  f.F = [](const Vec& x) {
    Mat m(2, 1);
    m << -0.5 * x[0] + std::sin(x[1]), std::cos(x[0]);
    return m;
  };
  f.dF = [](const Vec& x) {
    Mat a(2, 1), b(2, 1);
    a << -0.5, -std::sin(x[0]);
    b << std::cos(x[1]), 0.0;
    return std::vector<Mat>{a, b};
  };
  f.H = [](const Vec& x) {
    Mat m(2, 2);
    m << x[1], 0.3, 0.2 * std::sin(x[0]), 0.1 * x[0] * x[0];
    return m;
  };
  f.dH = [](const Vec& x) {
    Mat a(2, 2), b(2, 2);
    a << 0.0, 0.0, 0.2 * std::cos(x[0]), 0.2 * x[0];
    b << 1.0, 0.0, 0.0, 0.0;
    return std::vector<Mat>{a, b};
  };
  return f;
}

// Classical RK4 for dX/dt = F(X) V'(t) + H(X) W'(t) with V(t) = t.
Vec classical_solve(const VectorFieldPair& f, const Vec& xi, double T, int steps) {
  auto rhs = [&](double t, const Vec& x) -> Vec { return f.F(x).col(0) + f.H(x) * smooth_dw(t); };
  Vec x = xi;
  const double h = T / steps;
  for (int i = 0; i < steps; ++i) {
    const double t = i * h;
    const Vec k1 = rhs(t, x), k2 = rhs(t + h / 2, x + h / 2 * k1), k3 = rhs(t + h / 2, x + h / 2 * k2),
              k4 = rhs(t + h, x + h * k3);
    x += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
  }
  return x;
}

Vec rde_endpoint(const VectorFieldPair& f, const Vec& xi, int steps) {
  const auto g = grid01(steps);
  const auto V = sample_path(g, 1, [](double t) { return v1(t); });
  const auto drv = lift_smooth(sample_path(g, 2, smooth_w), 0.5);
  return solve_rde(f, V, drv, xi).values.rightCols(1);
}

}  // namespace

TEST(Holder, ZeroAndLinear) {
  const auto g = grid01(50);
  EXPECT_EQ(holder_seminorm(sample_path(g, 2, [](double) { return v2(0, 0); }), 0.5), 0.0);
  EXPECT_NEAR(holder_seminorm(sample_path(g, 1, [](double t) { return v1(t); }), 1.0), 1.0, 1e-12);
  EXPECT_THROW(holder_seminorm(sample_path({0.0}, 1, [](double t) { return v1(t); }), 0.5), InvalidArgument);
}

TEST(Holder, Subadditive) {
  const auto g = grid01(80);
  const auto a = sample_path(g, 1, [](double t) { return v1(std::sin(7 * t)); });
  const auto b = sample_path(g, 1, [](double t) { return v1(std::sqrt(t)); });
  HolderPath ab = a;
  ab.values += b.values;
  for (double gam : {0.3, 0.5, 1.0})
    EXPECT_LE(holder_seminorm(ab, gam), holder_seminorm(a, gam) + holder_seminorm(b, gam) + 1e-12);
}

TEST(Lift, DiagonalLinearPath) {
  const auto d = lift_smooth(sample_path(grid01(10), 2, [](double t) { return v2(t, t); }));
  EXPECT_LE((d.WW.back() - Mat::Constant(2, 2, 0.5)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(d.WW.front().norm(), 0.0);
}

TEST(Lift, SymmetricPartIsProduct) {
  const auto d = lift_smooth(sample_path(grid01(37), 2, smooth_w));
  for (std::size_t k = 0; k < d.size(); ++k) {
    const Vec w = d.W.at(k);
    EXPECT_LE((d.WW[k] + d.WW[k].transpose() - w * w.transpose()).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Lift, RefinementConvergesQuadratically) {
  auto area = [](int steps) { return lift_smooth(sample_path(grid01(steps), 2, smooth_w)).WW.back()(0, 1); };
  const double r = (area(50) - area(100)) / (area(100) - area(200));
  EXPECT_NEAR(r, 4.0, 0.3);
}

TEST(Chen, LiftIsConsistent) {
  const auto d = lift_smooth(sample_path(grid01(300), 2, smooth_w));
  EXPECT_LE(chen_defect(d), 1e-12);
}

TEST(Chen, CorruptionIsDetected) {
  for (double delta : {1e-6, 1e-3}) {
    auto d = lift_smooth(sample_path(grid01(60), 2, smooth_w));
    d.WW[23](1, 0) += delta;
    EXPECT_GE(chen_defect(d), delta * (1 - 1e-6));
    auto e = lift_smooth(sample_path(grid01(60), 2, smooth_w));
    e.WW_step[40](0, 1) -= delta;
    EXPECT_GE(chen_defect(e), delta * (1 - 1e-6));
  }
}

TEST(Metric, ZeroSymmetricTriangle) {
  const auto g = grid01(40);
  std::mt19937_64 gen(3);
  std::normal_distribution<double> N;
  auto random_driver = [&]() {
    const double a = N(gen), b = N(gen), c = N(gen);
    return lift_smooth(sample_path(g, 2, [&](double t) { return v2(a * std::sin(5 * t), b * t + c * t * t); }));
  };
  const auto d1 = random_driver(), d2 = random_driver(), d3 = random_driver();
  EXPECT_EQ(rough_metric(d1, d1, 0.4), 0.0);
  EXPECT_DOUBLE_EQ(rough_metric(d1, d2, 0.4), rough_metric(d2, d1, 0.4));
  EXPECT_LE(rough_metric(d1, d3, 0.4), rough_metric(d1, d2, 0.4) + rough_metric(d2, d3, 0.4) + 1e-12);
  const auto other = lift_smooth(sample_path(grid01(41), 2, smooth_w));
  EXPECT_THROW(rough_metric(d1, other, 0.4), GridMismatch);
}

TEST(Young, ClosedForm) {
  const auto g = grid01(1000);
  const auto V = sample_path(g, 1, [](double t) { return v1(t * t); });
  std::vector<Mat> G;
  for (double t : g) G.push_back(Mat::Constant(1, 1, t));
  EXPECT_NEAR(young_integral(G, V, 1.0, 1.0).values(0, 1000), 2.0 / 3.0, 1e-3);
  // The closed form is reached at the left-point sum's O(dt) rate.
  EXPECT_NEAR(young_integral(G, V, 1.0, 1.0).values(0, 1000), 2.0 / 3.0 - 0.5e-3, 1e-4);
}

TEST(Young, ConstantDriverAndExponentCondition) {
  const auto g = grid01(20);
  const auto V = sample_path(g, 1, [](double) { return v1(4.0); });
  std::vector<Mat> G(g.size(), Mat::Constant(1, 1, 2.0));
  EXPECT_EQ(young_integral(G, V, 0.6, 0.6).values.norm(), 0.0);
  EXPECT_THROW(young_integral(G, V, 0.5, 0.5), ExponentCondition);
}

TEST(Young, RandomSmoothIntegrandFirstOrder) {
  std::mt19937_64 gen(9);
  std::uniform_real_distribution<double> U(-1, 1);
  const double a = U(gen), b = U(gen), c = U(gen);
  auto integral = [&](int steps) {
    const auto g = grid01(steps);
    const auto V = sample_path(g, 1, [&](double t) { return v1(std::sin(2 * t) + c * t); });
    std::vector<Mat> G;
    for (double t : g) G.push_back(Mat::Constant(1, 1, a * std::cos(3 * t) + b * t * t));
    return young_integral(G, V, 1.0, 1.0).values(0, steps);
  };
  const double oracle = integral(20000);
  const double e1 = std::abs(integral(200) - oracle), e2 = std::abs(integral(400) - oracle);
  EXPECT_NEAR(std::log2(e1 / e2), 1.0, 0.2);
}

TEST(RoughIntegral, ConstantH) {
  const auto g = grid01(30);
  const auto drv = lift_smooth(sample_path(g, 2, smooth_w));
  Mat H0(1, 2);
  H0 << 2.0, -1.0;
  const auto X = sample_path(g, 1, [](double) { return v1(0.0); });
  const std::vector<Mat> Xp(g.size(), Mat::Zero(1, 2));
  const auto I = rough_integral([&](const Vec&) { return H0; },
                                [](const Vec&) { return std::vector<Mat>{Mat::Zero(1, 2)}; }, X, Xp, drv);
  for (std::size_t k = 0; k < g.size(); ++k) EXPECT_NEAR(I.values(0, static_cast<Eigen::Index>(k)), (H0 * drv.W.at(k))(0), 1e-13);
}

TEST(RoughIntegral, ScalarIdentity) {
  const auto g = grid01(100);
  const auto W = sample_path(g, 1, [](double t) { return v1(t); });
  const auto drv = lift_smooth(W);
  const std::vector<Mat> Xp(g.size(), Mat::Ones(1, 1));
  const auto I = rough_integral([](const Vec& x) { return Mat::Constant(1, 1, x[0]); },
                                [](const Vec&) { return std::vector<Mat>{Mat::Ones(1, 1)}; }, W, Xp, drv);
  EXPECT_NEAR(I.values(0, 100), 0.5, 1e-6);
}

TEST(RoughIntegral, MatchesClassicalStieltjes) {
  // X = W (2d smooth), X' = I, H(x) = [x2^2, sin x1]: int H(X) dW vs fine Riemann-Stieltjes.
  auto H = [](const Vec& x) {
    Mat m(1, 2);
    m << x[1] * x[1], std::sin(x[0]);
    return m;
  };
  auto dH = [](const Vec& x) {
    Mat a(1, 2), b(1, 2);
    a << 0.0, std::cos(x[0]);
    b << 2.0 * x[1], 0.0;
    return std::vector<Mat>{a, b};
  };
  auto compensated = [&](int steps) {
    const auto g = grid01(steps);
    const auto W = sample_path(g, 2, smooth_w);
    const std::vector<Mat> Xp(g.size(), Mat::Identity(2, 2));
    return rough_integral(H, dH, W, Xp, lift_smooth(W)).values(0, steps);
  };
  double oracle = 0.0;
  const int fine = 200000;
  for (int i = 0; i < fine; ++i) {
    const double t = (i + 0.5) / fine;
    const Vec w = smooth_w(t) - smooth_w(0.0);
    oracle += (H(w) * smooth_dw(t))(0) / fine;
  }
  EXPECT_NEAR(compensated(1000), oracle, 1e-3);
  // The compensation term lifts the left-point sum to second order.
  const double e1 = std::abs(compensated(100) - oracle), e2 = std::abs(compensated(200) - oracle);
  EXPECT_GT(std::log2(e1 / e2), 1.5);
}

TEST(RoughIntegral, MisalignedGridThrows) {
  const auto drv = lift_smooth(sample_path(grid01(10), 1, [](double t) { return v1(t); }));
  const auto X = sample_path(grid01(11), 1, [](double t) { return v1(t); });
  const std::vector<Mat> Xp(X.size(), Mat::Ones(1, 1));
  EXPECT_THROW(rough_integral([](const Vec&) { return Mat::Ones(1, 1); },
                              [](const Vec&) { return std::vector<Mat>{Mat::Zero(1, 1)}; }, X, Xp, drv),
               GridMismatch);
}

TEST(SolveRde, LinearOde) {
  VectorFieldPair f;
  f.d = 1;
  f.F = [](const Vec& x) { return Mat::Constant(1, 1, x[0]); };
  f.dF = [](const Vec&) { return std::vector<Mat>{Mat::Ones(1, 1)}; };
  f.H = [](const Vec&) { return Mat::Zero(1, 1); };
  f.dH = [](const Vec&) { return std::vector<Mat>{Mat::Zero(1, 1)}; };
  const auto g = grid01(10000);
  const auto V = sample_path(g, 1, [](double t) { return v1(t); });
  const auto drv = lift_smooth(sample_path(g, 1, [](double t) { return v1(std::sin(t)); }));
  const auto X = solve_rde(f, V, drv, v1(0.7));
  for (std::size_t k = 0; k < g.size(); k += 500)
    EXPECT_NEAR(X.values(0, static_cast<Eigen::Index>(k)), 0.7 * std::exp(g[k]), 1e-6);
}

TEST(SolveRde, ZeroFieldsKeepInitialCondition) {
  VectorFieldPair f;
  f.d = 2;
  f.F = [](const Vec&) { return Mat::Zero(2, 1); };
  f.H = [](const Vec&) { return Mat::Zero(2, 2); };
  f.dH = [](const Vec&) { return std::vector<Mat>(2, Mat::Zero(2, 2)); };
  const auto g = grid01(50);
  const auto X = solve_rde(f, sample_path(g, 1, [](double t) { return v1(t); }),
                           lift_smooth(sample_path(g, 2, smooth_w)), v2(1.5, -2.0));
  for (std::size_t k = 0; k < g.size(); ++k) EXPECT_EQ((X.at(k) - v2(1.5, -2.0)).norm(), 0.0);
}

TEST(SolveRde, MatchesClassicalSolver) {
  const auto f = test_fields();
  validate(f, {v2(0.3, -0.2), v2(-1.0, 0.5)});
  const Vec xi = v2(0.4, -0.3);
  const Vec oracle = classical_solve(f, xi, 1.0, 20000);
  EXPECT_LE((rde_endpoint(f, xi, 1000) - oracle).norm(), 1e-5);
}

TEST(SolveRde, ConvergenceOrder) {
  const auto f = test_fields();
  const Vec xi = v2(0.4, -0.3);
  const Vec oracle = classical_solve(f, xi, 1.0, 20000);
  const double e1 = (rde_endpoint(f, xi, 100) - oracle).norm();
  const double e2 = (rde_endpoint(f, xi, 200) - oracle).norm();
  EXPECT_GE(std::log2(e1 / e2), 0.9);
}

TEST(SolveRde, FiniteDifferenceDriftJacobian) {
  auto f = test_fields();
  const Vec xi = v2(0.4, -0.3);
  const Vec exact = rde_endpoint(f, xi, 500);
  f.dF = nullptr;
  EXPECT_LE((rde_endpoint(f, xi, 500) - exact).norm(), 1e-8);
}

TEST(SolveRde, BlowUpDetected) {
  VectorFieldPair f;
  f.d = 1;
  f.F = [](const Vec& x) { return Mat::Constant(1, 1, x[0] * x[0]); };
  f.dF = [](const Vec& x) { return std::vector<Mat>{Mat::Constant(1, 1, 2 * x[0])}; };
  f.H = [](const Vec&) { return Mat::Zero(1, 1); };
  f.dH = [](const Vec&) { return std::vector<Mat>{Mat::Zero(1, 1)}; };
  const auto g = grid01(1000, 3.0);
  const auto drv = lift_smooth(sample_path(g, 1, [](double) { return v1(0.0); }));
  EXPECT_THROW(solve_rde(f, sample_path(g, 1, [](double t) { return v1(t); }), drv, v1(1.0), {1e6}),
               IntegrationDiverged);
}

TEST(SolveRde, ValidationCatchesWrongJacobian) {
  auto f = test_fields();
  f.dH = [](const Vec&) { return std::vector<Mat>(2, Mat::Zero(2, 2)); };
  EXPECT_THROW(validate(f, {v2(0.3, 0.1)}), InvalidArgument);
}

TEST(SolveRde, ChainRule) {
  // Augment X with Phi = phi(X), phi(x) = x1^2 + sin(x2); for a geometric
  // driver the solved Phi tracks phi(X) along the whole path.
  const auto base = test_fields();
  auto phi = [](const Vec& x) { return x[0] * x[0] + std::sin(x[1]); };
  auto grad = [](const Vec& x) {
    Mat g(1, 2);
    g << 2 * x[0], std::cos(x[1]);
    return g;
  };
  VectorFieldPair f;
  f.d = 3;
  auto lift = [&](const MatField& M) {
    return [M, grad](const Vec& z) {
      const Vec x = z.head(2);
      const Mat m = M(x);
      Mat out(3, m.cols());
      out.topRows(2) = m;
      out.row(2) = grad(x) * m;
      return out;
    };
  };
  f.F = lift(base.F);
  f.H = lift(base.H);
  f.dH = [h = f.H](const Vec& z) { return detail::central_jacobian(h, z); };
  const auto g = grid01(2000);
  const Vec x0 = v2(0.4, -0.3);
  Vec z0(3);
  z0 << x0, phi(x0);
  const auto Z = solve_rde(f, sample_path(g, 1, [](double t) { return v1(t); }),
                           lift_smooth(sample_path(g, 2, smooth_w)), z0);
  for (std::size_t k = 0; k < g.size(); k += 100) {
    const Vec z = Z.at(k);
    EXPECT_NEAR(z[2], phi(z.head(2)), 1e-4);
  }
}

TEST(SolveRde, SolutionMapContinuity) {
  // Perturbing the driver by delta in rho_gamma moves the solution by at most
  // C * delta, and the displacement grows monotonically with delta.
  const auto f = test_fields();
  const auto g = grid01(200);
  const auto V = sample_path(g, 1, [](double t) { return v1(t); });
  const auto base = lift_smooth(sample_path(g, 2, smooth_w));
  const auto X0 = solve_rde(f, V, base, v2(0.4, -0.3));
  std::vector<double> rho, shift;
  for (double delta : {1e-3, 1e-2, 1e-1}) {
    const auto pert = lift_smooth(sample_path(g, 2, [&](double t) {
      return Vec(smooth_w(t) + delta * v2(std::sin(11 * t), std::cos(7 * t)));
    }));
    const auto X = solve_rde(f, V, pert, v2(0.4, -0.3));
    rho.push_back(rough_metric(base, pert, 0.4));
    shift.push_back((X.values - X0.values).cwiseAbs().maxCoeff());
  }
  for (std::size_t i = 0; i < rho.size(); ++i) EXPECT_LE(shift[i], 10.0 * rho[i]);
  EXPECT_LT(shift[0], shift[1]);
  EXPECT_LT(shift[1], shift[2]);
}
