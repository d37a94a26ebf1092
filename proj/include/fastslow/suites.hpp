#pragma once

// Invariant suites shared by the selftest and rough commands: each returns a
// measured value, its threshold and a verdict.

#include "fastslow/homog.hpp"
#include "fastslow/io.hpp"
#include "fastslow/sim.hpp"

#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace fastslow::suites {

using io::json;

struct SuiteResult {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool pass = true;
  json detail = json::object();

  json to_json() const {
    return {{"name", name}, {"value", io::jnum(value)}, {"threshold", threshold}, {"pass", pass}, {"detail", detail}};
  }
};

inline SuiteResult at_most(std::string name, double value, double threshold, json detail = json::object()) {
  return {std::move(name), value, threshold, value <= threshold, std::move(detail)};
}

/// Random smooth path: each component a sum of three sinusoids, starting at 0.
struct SmoothDriver {
  std::vector<std::array<double, 3>> amp, freq, phase;

  SmoothDriver(std::mt19937_64& g, int dim) {
    std::uniform_real_distribution<double> A(-1.0, 1.0), W(0.5, 6.0), P(0.0, 2.0 * std::numbers::pi);
    for (int i = 0; i < dim; ++i) {
      std::array<double, 3> a{}, w{}, p{};
      for (int k = 0; k < 3; ++k) {
        a[static_cast<std::size_t>(k)] = A(g);
        w[static_cast<std::size_t>(k)] = W(g);
        p[static_cast<std::size_t>(k)] = P(g);
      }
      amp.push_back(a);
      freq.push_back(w);
      phase.push_back(p);
    }
  }

  int dim() const { return static_cast<int>(amp.size()); }

  Vec value(double t) const {
    Vec v(dim());
    for (int i = 0; i < dim(); ++i) {
      const auto ii = static_cast<std::size_t>(i);
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += amp[ii][k] * (std::sin(freq[ii][k] * t + phase[ii][k]) - std::sin(phase[ii][k]));
      v[i] = s;
    }
    return v;
  }

  Vec derivative(double t) const {
    Vec v(dim());
    for (int i = 0; i < dim(); ++i) {
      const auto ii = static_cast<std::size_t>(i);
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += amp[ii][k] * freq[ii][k] * std::cos(freq[ii][k] * t + phase[ii][k]);
      v[i] = s;
    }
    return v;
  }

  rough::HolderPath sample(const std::vector<double>& grid) const {
    return rough::sample_path(grid, dim(), [this](double t) { return value(t); }, 1.0);
  }
};

/// Product-form slow system with random sin/cos/affine terms; its observables
/// are placeholders, only the x-dependence is used.
inline slow::SlowSystem random_product_system(std::mt19937_64& g, int d, int eu, int ev) {
  std::normal_distribution<double> C(0.0, 0.5);
  std::uniform_int_distribution<int> kind(0, 3), coord(0, d - 1);
  std::uniform_real_distribution<double> F(0.5, 2.0), P(0.0, 2.0 * std::numbers::pi);
  auto terms = [&](int cols) {
    std::vector<slow::Term> out;
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < cols; ++j) {
        for (int rep = 0; rep < 2; ++rep) {
          slow::XForm x;
          switch (kind(g)) {
            case 0: x = slow::XForm::one(); break;
            case 1: {
              std::vector<int> p(static_cast<std::size_t>(d), 0);
              p[static_cast<std::size_t>(coord(g))] = 1;
              x = slow::XForm::monomial(p);
              break;
            }
            case 2: x = slow::XForm::sine(coord(g), F(g), P(g)); break;
            default: x = slow::XForm::cosine(coord(g), F(g), P(g)); break;
          }
          out.push_back({i, C(g), x, j});
        }
      }
    return out;
  };
  std::vector<observables::Observable> u(static_cast<std::size_t>(eu), observables::zero());
  std::vector<observables::Observable> v(static_cast<std::size_t>(ev), observables::zero());
  auto at = terms(eu);
  auto bt = terms(ev);
  return slow::SlowSystem::product(d, u, at, v, bt);
}

inline std::vector<double> uniform_steps(double T, long long steps) {
  std::vector<double> g(static_cast<std::size_t>(steps) + 1);
  for (long long i = 0; i <= steps; ++i) g[static_cast<std::size_t>(i)] = T * static_cast<double>(i) / static_cast<double>(steps);
  return g;
}

// ---------------------------------------------------------------------------

/// chen_defect of lifted random smooth drivers. `corrupt` perturbs one stored
/// level-2 increment of the first driver.
inline SuiteResult chen_suite(std::uint64_t seed, int count = 10, bool corrupt = false) {
  std::mt19937_64 g(seed);
  const auto grid = uniform_steps(1.0, 500);
  double worst = 0.0;
  for (int i = 0; i < count; ++i) {
    auto d = rough::lift_smooth(SmoothDriver(g, 3).sample(grid));
    if (corrupt && i == 0) d.WW_step[250](0, 1) += 1e-3;
    worst = std::max(worst, rough::chen_defect(d));
  }
  return at_most("chen", worst, 1e-10, {{"drivers", count}, {"points", grid.size()}, {"corrupted", corrupt}});
}

/// S(v,w) + S(w,v)^T = v~ w~^T on every return to the section.
inline SuiteResult product_rule_suite(const flow::FlowSpec& spec, const flow::SectionSpec& section,
                                      const std::vector<observables::Observable>& vs,
                                      const std::vector<observables::Observable>& ws, const flow::FlowState& start,
                                      long long returns) {
  const auto recs = homog::induced_returns(spec, section, vs, ws, start, returns, -1.0);
  double worst = 0.0;
  for (const auto& r : recs) {
    const Mat outer = r.v_tilde * r.w_tilde.transpose();
    worst = std::max(worst, (r.S_vw + r.S_wv.transpose() - outer).cwiseAbs().maxCoeff() / (1.0 + outer.cwiseAbs().maxCoeff()));
  }
  return at_most("product_rule", worst, 1e-8, {{"returns", recs.size()}});
}

inline SuiteResult circle_area_suite(int points = 100000) {
  std::vector<double> xs(static_cast<std::size_t>(points) + 1), ys(xs.size());
  for (int k = 0; k <= points; ++k) {
    const double t = 2.0 * std::numbers::pi * k / points;
    xs[static_cast<std::size_t>(k)] = std::cos(t);
    ys[static_cast<std::size_t>(k)] = std::sin(t);
  }
  const double a = homog::planar_signed_area(xs, ys);
  return at_most("signed_area_circle", std::abs(a - std::numbers::pi), 1e-6, {{"area", a}, {"points", points}});
}

/// solve_rde against classical RK4 for random smooth drivers (V in R^1,
/// W in R^2) and random product-form fields on R^2; sup-norm over the grid.
inline SuiteResult rde_oracle_suite(std::uint64_t seed, int count = 10, double dt = 1e-4, double tol = 1e-5) {
  std::mt19937_64 g(seed);
  const double T = 1.0;
  const auto steps = std::llround(T / dt);
  const auto grid = uniform_steps(T, steps);
  const double h = T / static_cast<double>(steps);
  double worst = 0.0;
  json per = json::array();
  for (int i = 0; i < count; ++i) {
    const SmoothDriver V(g, 1), W(g, 2);
    const auto sys = random_product_system(g, 2, 1, 2);
    const auto fields = sim::rde_fields(sys);
    Vec xi(2);
    xi << std::normal_distribution<double>(0.0, 0.5)(g), std::normal_distribution<double>(0.0, 0.5)(g);
    const auto X = rough::solve_rde(fields, V.sample(grid), rough::lift_smooth(W.sample(grid)), xi);
    auto rhs = [&](double t, const Vec& x) -> Vec { return fields.F(x) * V.derivative(t) + fields.H(x) * W.derivative(t); };
    Vec x = xi;
    double err = 0.0;
    for (long long k = 0; k < steps; ++k) {
      const double t = static_cast<double>(k) * h;
      const Vec k1 = rhs(t, x), k2 = rhs(t + h / 2, x + h / 2 * k1), k3 = rhs(t + h / 2, x + h / 2 * k2),
                k4 = rhs(t + h, x + h * k3);
      x += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
      err = std::max(err, (X.at(static_cast<std::size_t>(k + 1)) - x).cwiseAbs().maxCoeff());
    }
    per.push_back(err);
    worst = std::max(worst, err);
  }
  return at_most("rde_vs_rk4", worst, tol, {{"drivers", count}, {"dt", dt}, {"errors", per}});
}

/// For a lifted smooth driver, Phi solved alongside X tracks phi(X) with
/// phi(x) = x1^2 + sin(x2) (the classical chain rule).
inline SuiteResult chain_rule_suite(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  const SmoothDriver V(g, 1), W(g, 2);
  const auto base = sim::rde_fields(random_product_system(g, 2, 1, 2));
  auto grad = [](const Vec& x) {
    Mat m(1, 2);
    m << 2.0 * x[0], std::cos(x[1]);
    return m;
  };
  auto lift = [grad](const rough::MatField& M) {
    return [M, grad](const Vec& z) {
      const Vec x = z.head(2);
      const Mat m = M(x);
      Mat out(3, m.cols());
      out.topRows(2) = m;
      out.row(2) = grad(x) * m;
      return out;
    };
  };
  rough::VectorFieldPair f;
  f.d = 3;
  f.F = lift(base.F);
  f.H = lift(base.H);
  f.dH = [h = f.H](const Vec& z) { return rough::detail::central_jacobian(h, z); };
  const auto grid = uniform_steps(1.0, 2000);
  Vec z0(3);
  z0 << 0.4, -0.3, 0.4 * 0.4 + std::sin(-0.3);
  const auto Z = rough::solve_rde(f, V.sample(grid), rough::lift_smooth(W.sample(grid)), z0);
  double worst = 0.0;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const Vec z = Z.at(k);
    worst = std::max(worst, std::abs(z[2] - (z[0] * z[0] + std::sin(z[1]))));
  }
  return at_most("chain_rule", worst, 1e-4, {{"points", grid.size()}});
}

/// Observed RK4 order on a Lorenz orbit from successive dt halvings.
inline SuiteResult integrator_order_suite(const flow::FlowSpec& spec) {
  const flow::FlowState s0{spec.reference_point(), 0.0};
  auto end = [&](double dt) {
    flow::Stepper st(spec, s0, dt);
    st.advance_to(1.0);
    return Vec(st.point());
  };
  const Vec a = end(0.02), b = end(0.01), c = end(0.005);
  const double order = std::log2((a - b).norm() / (b - c).norm());
  return {"integrator_order", order, 3.5, order >= 3.5, {{"dts", {0.02, 0.01, 0.005}}}};
}

/// PSD square-root reconstruction on random Gram matrices plus check_field on
/// a constructed field; `inject` puts a negative eigenvalue into the field.
inline SuiteResult psd_suite(std::uint64_t seed, bool inject = false) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> N;
  double recon = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    Mat A(3, 2);
    for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = N(g);
    const Mat S = A * A.transpose();
    const Mat r = homog::matrix_sqrt_psd(S);
    recon = std::max(recon, (r * r.transpose() - S).cwiseAbs().maxCoeff());
  }
  const auto sys = slow::SlowSystem::product(2, {}, {}, {}, {});
  auto f = homog::make_field(sys, {{0.0, 0.0}, {1.0, 1.0}, {2, 2}});
  for (auto& S : f.diffusion_sq) {
    Mat A(2, 2);
    for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = N(g);
    S = A * A.transpose();
  }
  homog::finalize_diffusion(f);
  if (inject) {
    Mat bad(2, 2);
    bad << 1.0, 0.0, 0.0, -0.1;
    f.diffusion_sq[1] = bad;
  }
  const auto rep = homog::check_field(f);
  SuiteResult r = at_most("psd", recon, 1e-8, {{"field", io::report_json(rep)}, {"injected", inject}});
  r.pass = r.pass && rep.pass;
  return r;
}

/// Window estimates on shared orbits are exactly bilinear.
inline SuiteResult bilinearity_suite(const flow::FlowSpec& spec, std::uint64_t seed) {
  homog::EnsemblePlan p;
  p.members = 4;
  p.seed = seed;
  p.orbit_length = 300.0;
  p.sampling.burn_in = 30.0;
  const auto v1 = observables::coordinate(0).as_centered();
  const auto v2 = observables::coordinate(1).as_centered();
  const auto mix = observables::combine(-1.7, v1, v2);
  const double lhs = homog::estimate_B_window(spec, mix, v1, 100.0, p).value;
  const double rhs = -1.7 * homog::estimate_B_window(spec, v1, v1, 100.0, p).value +
                     homog::estimate_B_window(spec, v2, v1, 100.0, p).value;
  return at_most("bilinearity", std::abs(lhs - rhs) / (1.0 + std::abs(rhs)), 1e-9);
}

}  // namespace fastslow::suites
