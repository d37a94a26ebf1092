#include "fastslow/homog.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace fastslow;
using namespace fastslow::homog;
using flow::FlowSpec;
using observables::Observable;

namespace {

const FlowSpec& lorenz() {
  static const FlowSpec s = FlowSpec::lorenz();
  return s;
}

Observable cy1() { return observables::coordinate(0).as_centered(); }
Observable cy2() { return observables::coordinate(1).as_centered(); }

const Observable& cy3() {
  static const Observable o =
      observables::center_by_time_average(lorenz(), observables::coordinate(2), 4242, 20, 5000.0);
  return o;
}

EnsemblePlan small_plan(std::uint64_t seed, std::uint32_t members = 40, double length = 1000.0) {
  EnsemblePlan p;
  p.members = members;
  p.seed = seed;
  p.orbit_length = length;
  p.sampling.burn_in = 50.0;
  return p;
}

flow::SectionSpec z_section() {
  flow::SectionSpec s;
  s.normal = flow::Point::Zero(3);
  s.normal[2] = 1.0;
  s.offset = 27.0;
  s.direction = flow::Direction::downward;
  s.min_return_time = 0.05;
  return s;
}

double combined(double a, double b) { return std::hypot(a, b); }

}  // namespace

TEST(Window, ZeroObservable) {
  const auto b = estimate_B_window(lorenz(), observables::zero(), cy1(), 50.0, small_plan(1, 4, 100.0));
  EXPECT_EQ(b.value, 0.0);
  EXPECT_EQ(b.std_error, 0.0);
  EXPECT_EQ(b.method, Method::window);
}

TEST(Window, RequiresCentered) {
  EXPECT_THROW(estimate_B_window(lorenz(), observables::coordinate(0), cy1(), 50.0, small_plan(1, 4, 100.0)),
               InvalidArgument);
}

TEST(Window, LowNIsFlagged) {
  const auto b = window_matrix(lorenz(), {cy1()}, {}, 10.0, small_plan(1, 2, 20.0));
  EXPECT_FALSE(b.warnings.empty());
}

TEST(Window, PositivityAndNDoubling) {
  const auto p = small_plan(11);
  const auto m200 = window_matrix(lorenz(), {cy1(), cy3(), observables::polynomial({{1.0, {3}}}).as_centered()}, {}, 200.0, p);
  for (int i = 0; i < 3; ++i) EXPECT_GE(m200.value(i, i), -2.0 * m200.std_error(i, i));
  auto p2 = small_plan(12);
  const auto a = estimate_B_window(lorenz(), cy3(), cy3(), 200.0, p2);
  p2.seed = 13;
  const auto b = estimate_B_window(lorenz(), cy3(), cy3(), 400.0, p2);
  EXPECT_LE(std::abs(a.value - b.value), 3.0 * combined(a.std_error, b.std_error));
}

TEST(Window, ExactlyBilinearOnSharedOrbits) {
  const auto p = small_plan(5, 6, 300.0);
  const auto mix = observables::combine(-1.7, cy1(), cy3());
  const double lhs = estimate_B_window(lorenz(), mix, cy2(), 100.0, p).value;
  const double rhs = -1.7 * estimate_B_window(lorenz(), cy1(), cy2(), 100.0, p).value +
                     estimate_B_window(lorenz(), cy3(), cy2(), 100.0, p).value;
  EXPECT_NEAR(lhs, rhs, 1e-9 * (1.0 + std::abs(rhs)));
  // Scaling v -> alpha v scales the estimate by alpha.
  const auto twice = observables::coordinate(0, 2.0).as_centered();
  EXPECT_NEAR(estimate_B_window(lorenz(), twice, cy1(), 100.0, p).value,
              2.0 * estimate_B_window(lorenz(), cy1(), cy1(), 100.0, p).value, 1e-9 * 100.0);
}

TEST(Window, MatrixMatchesScalarCalls) {
  const auto p = small_plan(8, 4, 200.0);
  const auto m = window_matrix(lorenz(), {cy1(), cy2()}, {cy3()}, 100.0, p);
  ASSERT_EQ(m.value.rows(), 2);
  ASSERT_EQ(m.value.cols(), 1);
  EXPECT_NEAR(m.value(1, 0), estimate_B_window(lorenz(), cy2(), cy3(), 100.0, p).value, 1e-10);
}

TEST(Correlation, ZeroObservable) {
  const auto b = estimate_B_correlation(lorenz(), observables::zero(), cy1(), 5.0, small_plan(1, 4, 50.0));
  EXPECT_EQ(b.value, 0.0);
  EXPECT_EQ(b.std_error, 0.0);
}

TEST(Correlation, SymmetrizedMatchesWindow) {
  // B(v,w) + B(w,v) from both estimators, independent orbit sets.
  const auto c = correlation_matrix(lorenz(), {cy1(), cy2()}, {}, 20.0, small_plan(21));
  const auto w = window_matrix(lorenz(), {cy1(), cy2()}, {}, 200.0, small_plan(22));
  auto sym = [](const BMatrix& b) { return std::pair{b.value(0, 1) + b.value(1, 0), b.std_error(0, 1) + b.std_error(1, 0)}; };
  const auto [cs, cse] = sym(c);
  const auto [ws, wse] = sym(w);
  EXPECT_LE(std::abs(cs - ws), 3.0 * combined(cse, wse));
  EXPECT_GT(c.meta.at("tail_abs_max"), 0.0);
}

TEST(Correlation, OffGridTmaxMatchesAligned) {
  auto p = small_plan(4, 3, 100.0 + 1e-7);  // same origin count for both t_max
  const auto a = estimate_B_correlation(lorenz(), cy1(), cy1(), 10.0, p);
  const auto b = estimate_B_correlation(lorenz(), cy1(), cy1(), 10.0 + 1e-7, p);
  EXPECT_NEAR(a.value, b.value, 1e-4);
}

TEST(Correlation, GreenKuboVarianceGrowth) {
  // int_0^tmax C = half the slope of Var(v_t) in t (regression over t in [20, 80]).
  const auto p = small_plan(31, 300, 100.0);
  const std::vector<double> ts{20.0, 40.0, 60.0, 80.0};
  double tbar = 0.0;
  for (double t : ts) tbar += t / ts.size();
  double sxx = 0.0;
  for (double t : ts) sxx += (t - tbar) * (t - tbar);
  std::vector<double> slopes;
  for (std::uint32_t m = 0; m < p.members; ++m) {
    const auto y0 = detail::member_start(lorenz(), p, m);
    flow::Stepper st(lorenz(), y0, p.dt);
    observables::PathAccumulator acc({cy1()}, false);
    acc.reset(st.point());
    double q = 0.0;
    for (double t : ts) {
      st.advance_to(t, [&](const flow::Point&, const flow::Point& nx, double h) { acc.step(nx, h); });
      q += (t - tbar) / sxx * acc.level1()[0] * acc.level1()[0];
    }
    slopes.push_back(q);
  }
  const auto slope = batch_means(slopes);
  const auto c = estimate_B_correlation(lorenz(), cy1(), cy1(), 20.0, small_plan(32));
  EXPECT_LE(std::abs(slope.mean / 2.0 - c.value), 3.0 * combined(slope.std_error / 2.0, c.std_error));
}

TEST(Suspension, ZeroObservable) {
  const auto b = estimate_B_suspension(lorenz(), z_section(), observables::zero(), cy1(), 5, small_plan(1, 3, 100.0));
  EXPECT_EQ(b.value, 0.0);
  EXPECT_EQ(b.std_error, 0.0);
}

TEST(Suspension, PerReturnProductRule) {
  const auto y0 = detail::member_start(lorenz(), small_plan(3), 0);
  const auto recs = induced_returns(lorenz(), z_section(), {cy1(), cy3()}, {cy2()}, y0, 200, -1.0);
  ASSERT_EQ(recs.size(), 200u);
  for (const auto& r : recs) {
    const Mat outer = r.v_tilde * r.w_tilde.transpose();
    EXPECT_LE((r.S_vw + r.S_wv.transpose() - outer).cwiseAbs().maxCoeff(), 1e-8 * (1.0 + outer.norm()));
    EXPECT_GT(r.r, 0.05);
  }
}

TEST(Suspension, MatchesWindow) {
  const auto s = estimate_B_suspension(lorenz(), z_section(), cy1(), cy1(), 20, small_plan(41));
  const auto w = estimate_B_window(lorenz(), cy1(), cy1(), 200.0, small_plan(42));
  EXPECT_LE(std::abs(s.value - w.value), 3.0 * combined(s.std_error, w.std_error));
  EXPECT_NEAR(s.meta.at("r_bar"), 0.75, 0.05);
}

TEST(Decompose, Identities) {
  const BEstimate a{1.5, 0.1, Method::window, {}, {}}, b{-0.5, 0.2, Method::correlation, {}, {}};
  const auto d = decompose(a, b);
  EXPECT_EQ(d.sym + d.antisym, a.value);
  EXPECT_EQ(d.sym - d.antisym, b.value);
  EXPECT_EQ(decompose(a, a).antisym, 0.0);
}

TEST(SignedArea, Circle) {
  const int N = 100000;
  std::vector<double> xs(N + 1), ys(N + 1);
  for (int k = 0; k <= N; ++k) {
    const double t = 2.0 * std::numbers::pi * k / N;
    xs[static_cast<std::size_t>(k)] = std::cos(t);
    ys[static_cast<std::size_t>(k)] = std::sin(t);
  }
  EXPECT_NEAR(planar_signed_area(xs, ys), std::numbers::pi, 1e-6);
  // Reversed orientation flips the sign.
  std::reverse(ys.begin(), ys.end());
  std::reverse(xs.begin(), xs.end());
  EXPECT_NEAR(planar_signed_area(xs, ys), -std::numbers::pi, 1e-6);
}

TEST(SignedArea, ReturnSampleIdentities) {
  const auto y0 = detail::member_start(lorenz(), small_plan(3), 0);
  const auto rs = flow::poincare_returns(lorenz(), z_section(), y0, 5);
  for (const auto& r : rs) {
    EXPECT_EQ(signed_area(r, cy1(), cy1()), 0.0);
    const double a = signed_area(r, cy1(), cy3());
    const Mat Svw = observables::iterated_integral(lorenz(), cy1(), cy3(), {r.base_point, 0.0}, 0.0, r.return_time, 0.01);
    const Mat Swv = observables::iterated_integral(lorenz(), cy3(), cy1(), {r.base_point, 0.0}, 0.0, r.return_time, 0.01);
    EXPECT_NEAR(a, 0.5 * (Svw(0, 0) - Swv(0, 0)), 1e-8 * (1.0 + std::abs(a)));
    // Same value as the planar area of the Birkhoff path (int v, int w).
    std::vector<double> xs{0.0}, ys{0.0};
    double iv = 0.0, iw = 0.0;
    const auto& o = r.intra_orbit;
    for (std::size_t k = 1; k < o.points.size(); ++k) {
      const double h = o.grid[k] - o.grid[k - 1];
      iv += 0.5 * h * (cy1().scalar(o.points[k - 1]) + cy1().scalar(o.points[k]));
      iw += 0.5 * h * (cy3().scalar(o.points[k - 1]) + cy3().scalar(o.points[k]));
      xs.push_back(iv);
      ys.push_back(iw);
    }
    EXPECT_NEAR(a, planar_signed_area(xs, ys), 1e-9 * (1.0 + std::abs(a)));
  }
}

TEST(MatrixSqrt, Examples) {
  EXPECT_LE((matrix_sqrt_psd(Mat::Identity(3, 3)) - Mat::Identity(3, 3)).norm(), 1e-14);
  Mat D = Mat::Zero(2, 2);
  D.diagonal() << 4.0, 9.0;
  Mat R = Mat::Zero(2, 2);
  R.diagonal() << 2.0, 3.0;
  EXPECT_LE((matrix_sqrt_psd(D) - R).norm(), 1e-14);
  std::mt19937_64 gen(1);
  std::normal_distribution<double> N;
  for (int rep = 0; rep < 20; ++rep) {
    Mat A(4, 3);
    for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = N(gen);
    const Mat S = A * A.transpose();  // rank 3: one zero eigenvalue
    const Mat r = matrix_sqrt_psd(S);
    EXPECT_LE((r * r.transpose() - S).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE((r - r.transpose()).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(MatrixSqrt, NegativeEigenvalues) {
  Mat S(2, 2);
  S << 1.0, 0.0, 0.0, -1e-9;
  const Mat r = matrix_sqrt_psd(S);  // within default tolerance: clipped
  EXPECT_EQ(r(1, 1), 0.0);
  S(1, 1) = -0.1;
  EXPECT_THROW(matrix_sqrt_psd(S), NotPositiveSemidefinite);
  Mat A(2, 2);
  A << 1.0, 0.5, 0.0, 1.0;
  EXPECT_THROW(matrix_sqrt_psd(A), InvalidArgument);
}

TEST(CoeffFieldGrid, InterpolationAndExtrapolation) {
  const auto sys = slow::SlowSystem::product(2, {observables::constant(1.0)}, {}, {}, {});
  TensorGrid g{{0.0, -1.0}, {2.0, 1.0}, {5, 3}};
  auto f = make_field(sys, g);
  for (std::size_t p = 0; p < g.size(); ++p) {
    const SmallVec x = g.point(p);
    f.drift(0, static_cast<Eigen::Index>(p)) = 2.0 * x[0] - x[1] + 0.5;
    f.drift(1, static_cast<Eigen::Index>(p)) = x[0] * x[1];
  }
  SmallVec x(2);
  x << 0.7, 0.2;
  // Multilinear is exact for functions linear in each coordinate.
  EXPECT_NEAR(f.drift_at(x)[0], 2.0 * 0.7 - 0.2 + 0.5, 1e-13);
  EXPECT_NEAR(f.drift_at(x)[1], 0.7 * 0.2, 1e-13);
  f.interpolation = Interpolation::nearest;
  EXPECT_NEAR(f.drift_at(x)[0], 2.0 * 0.5 - 0.0 + 0.5, 1e-13);
  x << 2.5, 0.0;
  EXPECT_THROW(f.drift_at(x), OutOfGrid);
  f.extrapolation = Extrapolation::clamp;
  EXPECT_NEAR(f.drift_at(x)[0], 2.0 * 2.0 + 0.5, 1e-13);
}

namespace {

// b(x,y) = (0.1 + 0.05 sin x) * y1 as terms and as a general callable.
slow::SlowSystem product_system() {
  using slow::Term;
  using slow::XForm;
  return slow::SlowSystem::product(1, {observables::constant(1.0)},
                                   {Term{0, 1.0, XForm::monomial({1}), 0}, Term{0, -1.0, XForm::monomial({3}), 0}},
                                   {cy1()}, {Term{0, 0.1, XForm::one(), 0}, Term{0, 0.05, XForm::sine(0), 0}});
}

slow::SlowSystem general_system() {
  return slow::SlowSystem::general(
      1,
      [](const SmallVec& x, const flow::Point&) {
        SmallVec a(1);
        a[0] = x[0] - x[0] * x[0] * x[0];
        return a;
      },
      [](const SmallVec& x, const flow::Point& y) {
        SmallVec b(1);
        b[0] = (0.1 + 0.05 * std::sin(x[0])) * y[0];
        return b;
      },
      [](const SmallVec& x, const flow::Point& y) {
        SmallMat j(1, 1);
        j(0, 0) = 0.05 * std::cos(x[0]) * y[0];
        return j;
      });
}

EstimatorSettings settings(std::uint64_t seed) {
  EstimatorSettings es;
  es.method = Method::window;
  es.n = 100.0;
  es.plan = small_plan(seed, 30, 500.0);
  es.calibration_members = 4;
  es.calibration_length = 500.0;
  return es;
}

}  // namespace

TEST(Fields, ZeroSystem) {
  const auto sys = slow::SlowSystem::product(2, {}, {}, {}, {});
  const auto f = estimate_coefficients(lorenz(), sys, {{-1.0, -1.0}, {1.0, 1.0}, {3, 3}}, settings(1));
  EXPECT_EQ(f.drift.norm(), 0.0);
  for (const auto& S : f.diffusion_sq) EXPECT_EQ(S.norm(), 0.0);
  for (const auto& s : f.diffusion) EXPECT_EQ(s.norm(), 0.0);
  EXPECT_TRUE(check_field(f).pass);
}

TEST(Fields, XIndependentNoiseHasNoCorrection) {
  using slow::Term;
  using slow::XForm;
  const auto sys = slow::SlowSystem::product(1, {observables::constant(1.0)}, {Term{0, -2.0, XForm::monomial({1}), 0}},
                                             {cy1()}, {Term{0, 0.1, XForm::one(), 0}});
  const auto f = estimate_coefficients(lorenz(), sys, {{-1.0}, {1.0}, {5}}, settings(2));
  for (std::size_t p = 0; p < f.grid.size(); ++p) {
    EXPECT_NEAR(f.drift(0, static_cast<Eigen::Index>(p)), -2.0 * f.grid.point(p)[0], 1e-14);
    EXPECT_GE(f.diffusion_sq[p](0, 0), -2.0 * f.diffusion_sq_std_error[p](0, 0));
  }
  EXPECT_TRUE(check_field(f).pass);
}

TEST(Fields, ProductReductionMatchesGeneralEstimate) {
  const TensorGrid g{{-1.0}, {1.0}, {3}};
  const auto fp = estimate_coefficients(lorenz(), product_system(), g, settings(3));
  const auto fg = estimate_coefficients(lorenz(), general_system(), g, settings(4));
  for (std::size_t p = 0; p < g.size(); ++p) {
    const auto c = static_cast<Eigen::Index>(p);
    EXPECT_LE(std::abs(fp.drift(0, c) - fg.drift(0, c)), 3.0 * combined(fp.drift_std_error(0, c), fg.drift_std_error(0, c)) + 1e-3);
    EXPECT_LE(std::abs(fp.diffusion_sq[p](0, 0) - fg.diffusion_sq[p](0, 0)),
              3.0 * combined(fp.diffusion_sq_std_error[p](0, 0), fg.diffusion_sq_std_error[p](0, 0)));
    // Product form: correction = h h' B(v,v), diffusion = 2 h^2 B(v,v).
    const double x = g.point(p)[0];
    const double h = 0.1 + 0.05 * std::sin(x), dh = 0.05 * std::cos(x);
    const double B = fp.diffusion_sq[p](0, 0) / (2.0 * h * h);
    EXPECT_NEAR(fp.drift(0, c), x - x * x * x + h * dh * B, 1e-10);
  }
}

TEST(Fields, DiffusionMatchesWipVariance) {
  // Var W_{v,n}(1) for v = b(x,.) against sigma sigma^T(x) from independent orbits.
  const auto sys = product_system();
  auto es = settings(5);
  es.plan.members = 60;
  es.plan.orbit_length = 1000.0;
  es.n = 200.0;
  const auto f = estimate_coefficients(lorenz(), sys, {{0.5}, {0.5}, {1}}, es);
  const double h = 0.1 + 0.05 * std::sin(0.5);
  const Observable v = observables::coordinate(0, h).as_centered();
  const auto p = small_plan(6, 400, 200.0);
  std::vector<double> sq;
  for (std::uint32_t m = 0; m < p.members; ++m) {
    const auto y0 = detail::member_start(lorenz(), p, m);
    const double w = observables::birkhoff_integral(lorenz(), v, y0, 0.0, 200.0, p.dt)[0] / std::sqrt(200.0);
    sq.push_back(w * w);
  }
  const auto var = batch_means(sq);
  EXPECT_LE(std::abs(var.mean - f.diffusion_sq[0](0, 0)), 3.0 * combined(var.std_error, f.diffusion_sq_std_error[0](0, 0)));
}

TEST(Fields, CheckFieldDetectsBrokenEntries) {
  const auto sys = slow::SlowSystem::product(2, {}, {}, {}, {});
  auto f = make_field(sys, {{0.0, 0.0}, {1.0, 1.0}, {2, 2}});
  for (auto& S : f.diffusion_sq) S = Mat::Identity(2, 2);
  finalize_diffusion(f);
  EXPECT_TRUE(check_field(f).pass);
  f.diffusion_sq[1](1, 1) = -0.5;
  EXPECT_FALSE(check_field(f).pass);
  EXPECT_THROW(finalize_diffusion(f), NotPositiveSemidefinite);
}
