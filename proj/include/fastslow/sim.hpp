#pragma once

// Fast-slow ensembles and the limiting SDE.
//
// The fast state runs on the uniform RK4 grid in fast time s = t/eps^2. Each
// fast substep of length h advances the slow state by a Heun step of length
// eps^2 h using y at both ends of the substep, so for additive noise the slow
// increment is eps*h*(v_prev + v_next)/2: the same trapezoid rule that builds
// the rescaled Birkhoff paths.

#include "fastslow/homog.hpp"
#include "fastslow/slow.hpp"

#include <limits>
#include <string>
#include <memory>
#include <vector>

namespace fastslow::sim {

using flow::FlowSpec;
using flow::FlowState;
using flow::Point;
using slow::SlowSystem;
using observables::Observable;

struct FastSlowOptions {
  double dt_fast = 0.01;
  double guard = 1e3;
  double max_slow_step = 1e-2;  ///< warn when eps^2 * dt_fast exceeds this
  double max_fast_step = 0.05;  ///< warn when the fast flow is under-resolved
};

struct SlowPath {
  std::vector<double> grid;  ///< slow times
  Mat values;                ///< d x grid.size(); columns after an escape are NaN
  bool escaped = false;
  double escape_time = std::numeric_limits<double>::quiet_NaN();
  SmallVec running_max;   ///< per coordinate, over every slow step
  SmallVec time_average;  ///< (1/T) int_0^T x dt by the trapezoid rule
  std::vector<std::string> warnings;

  SmallVec endpoint() const { return values.col(values.cols() - 1); }
};

namespace detail {

inline void check_record_grid(const std::vector<double>& g, double T) {
  require(g.size() >= 2, "record grid needs at least two points");
  require(g.front() == 0.0, "record grid must start at 0");
  require(std::abs(g.back() - T) <= 1e-12 * std::max(1.0, T), "record grid must end at T");
  for (std::size_t i = 1; i < g.size(); ++i) require(g[i] > g[i - 1], "record grid must increase");
}

/// a(x,y) + b(x,y)/eps with y-dependent factors cached per fast point.
class SlowRhs {
 public:
  SlowRhs(const SlowSystem& sys, double eps) : sys_(&sys), inv_eps_(1.0 / eps) {}

  struct YCache {
    const Point* y = nullptr;
    SmallVec u, v;
  };

  void load(const Point& y, YCache& c) const {
    c.y = &y;
    if (sys_->form() == SlowSystem::Form::product) {
      sys_->u_values(y, c.u);
      sys_->v_values(y, c.v);
    }
  }

  void eval(const SmallVec& x, const YCache& c, SmallVec& out) {
    if (sys_->form() == SlowSystem::Form::general) {
      out = sys_->a(x, *c.y) + inv_eps_ * sys_->b(x, *c.y);
      return;
    }
    out = SmallVec::Zero(sys_->dimension());
    if (!sys_->a_terms().empty()) {
      sys_->g_into(x, m_);
      out.noalias() += m_ * c.u;
    }
    if (!sys_->b_terms().empty()) {
      sys_->h_into(x, m_);
      out.noalias() += inv_eps_ * (m_ * c.v);
    }
  }

 private:
  const SlowSystem* sys_;
  double inv_eps_;
  SmallMat m_;
};

}  // namespace detail

/// x_eps on `record` (slow times from 0 to T; empty means {0, T}). The member
/// stops at the first step with |x| > guard and reports the escape.
inline SlowPath integrate_fast_slow(const FlowSpec& spec, const SlowSystem& sys, double eps, const SmallVec& xi,
                                    const FlowState& y0, double T, const FastSlowOptions& opt = {},
                                    std::vector<double> record = {}) {
  require(eps > 0.0, "integrate_fast_slow: eps must be positive");
  require(T > 0.0, "integrate_fast_slow: T must be positive");
  require(opt.dt_fast > 0.0 && opt.guard > 0.0, "integrate_fast_slow: bad step or guard");
  require(xi.size() == sys.dimension(), "integrate_fast_slow: xi has wrong dimension");
  if (record.empty()) record = {0.0, T};
  detail::check_record_grid(record, T);
  const int d = sys.dimension();
  const double e2 = eps * eps;

  SlowPath out;
  out.grid = record;
  out.values = Mat::Constant(d, static_cast<Eigen::Index>(record.size()), std::numeric_limits<double>::quiet_NaN());
  out.values.col(0) = xi;
  if (e2 * opt.dt_fast > opt.max_slow_step) out.warnings.push_back("step_too_coarse: slow step eps^2*dt_fast is large");
  if (opt.dt_fast > opt.max_fast_step) out.warnings.push_back("step_too_coarse: fast step does not resolve the flow");

  detail::SlowRhs rhs(sys, eps);
  flow::Stepper st(spec, y0, opt.dt_fast);
  detail::SlowRhs::YCache c0, c1;
  Point y_prev = st.point();
  rhs.load(y_prev, c0);
  SmallVec x = xi, f0, f1, pred, x_next;
  SmallVec run_max = xi, integral = SmallVec::Zero(d);
  double t_slow = 0.0;

  auto visit = [&](const Point&, const Point& next, double h) {
    if (out.escaped) return;
    const double hs = e2 * h;
    rhs.eval(x, c0, f0);
    pred = x + hs * f0;
    rhs.load(next, c1);
    rhs.eval(pred, c1, f1);
    x_next = x + (0.5 * hs) * (f0 + f1);
    t_slow += hs;
    if (!x_next.allFinite()) throw IntegrationDiverged(t_slow);
    integral += (0.5 * hs) * (x + x_next);
    x = x_next;
    run_max = run_max.cwiseMax(x);
    std::swap(c0, c1);
    y_prev = next;
    c0.y = &y_prev;
    if (x.norm() > opt.guard) {
      out.escaped = true;
      out.escape_time = t_slow;
    }
  };

  for (std::size_t j = 1; j < record.size() && !out.escaped; ++j) {
    st.advance_to(y0.time + record[j] / e2, visit);
    if (out.escaped) break;
    out.values.col(static_cast<Eigen::Index>(j)) = x;
  }
  out.running_max = run_max;
  out.time_average = out.escaped ? SmallVec::Constant(d, std::numeric_limits<double>::quiet_NaN()) : SmallVec(integral / T);
  return out;
}

// ---------------------------------------------------------------------------
// Ensembles

struct MemberOutcome {
  std::uint32_t member = 0;
  bool escaped = false;
  Vec endpoint;  ///< x(T), or NaN when escaped
  Vec running_max;
  Vec time_average;
  double escape_time = std::numeric_limits<double>::quiet_NaN();
};

struct EnsembleResult {
  std::string kind;  ///< "fast_slow" or "sde"
  double eps = 0.0;  ///< 0 for the SDE
  double T = 0.0;
  double dt = 0.0;
  std::uint64_t seed = 0;
  std::uint32_t requested = 0;
  std::vector<MemberOutcome> members;
  std::vector<double> path_grid;
  std::vector<Mat> paths;  ///< per member, d x path_grid.size(), when requested
  std::vector<std::string> warnings;

  std::size_t escapes() const {
    std::size_t n = 0;
    for (const auto& m : members) n += m.escaped ? 1 : 0;
    return n;
  }

  std::vector<Vec> endpoints() const {
    std::vector<Vec> out;
    for (const auto& m : members)
      if (!m.escaped) out.push_back(m.endpoint);
    return out;
  }

  enum class Functional { endpoint, running_max, time_average };

  /// Coordinate i of a functional over the members that did not escape.
  std::vector<double> samples(int i, Functional f = Functional::endpoint) const {
    std::vector<double> out;
    for (const auto& m : members) {
      if (m.escaped) continue;
      const Vec& v = f == Functional::endpoint ? m.endpoint : f == Functional::running_max ? m.running_max : m.time_average;
      out.push_back(v[i]);
    }
    return out;
  }
};

struct EnsembleOptions {
  FastSlowOptions fast;
  flow::InvariantSampling sampling;
  int workers = 1;
  int path_points = 0;  ///< 0: endpoints only
};

inline std::vector<double> record_grid(double T, int path_points) {
  return path_points >= 2 ? observables::uniform_grid(T, path_points) : std::vector<double>{0.0, T};
}

/// N members with y0 drawn by member_state(seed, m). Escapes are reported,
/// not thrown.
inline EnsembleResult run_ensemble(const FlowSpec& spec, const SlowSystem& sys, double eps, const SmallVec& xi, double T,
                                   std::uint32_t N, std::uint64_t seed, const EnsembleOptions& opt = {}) {
  require(N >= 1, "run_ensemble: N must be at least 1");
  const auto grid = record_grid(T, opt.path_points);
  auto paths = parallel_map(N, opt.workers, [&](std::size_t m) {
    const auto y0 = flow::member_state(spec, seed, static_cast<std::uint32_t>(m), opt.sampling);
    return integrate_fast_slow(spec, sys, eps, xi, y0, T, opt.fast, grid);
  });
  EnsembleResult r;
  r.kind = "fast_slow";
  r.eps = eps;
  r.T = T;
  r.dt = opt.fast.dt_fast;
  r.seed = seed;
  r.requested = N;
  if (opt.path_points >= 2) r.path_grid = grid;
  for (std::size_t m = 0; m < paths.size(); ++m) {
    auto& p = paths[m];
    MemberOutcome o;
    o.member = static_cast<std::uint32_t>(m);
    o.escaped = p.escaped;
    o.escape_time = p.escape_time;
    o.endpoint = p.endpoint();
    o.running_max = p.running_max;
    o.time_average = p.time_average;
    r.members.push_back(std::move(o));
    if (opt.path_points >= 2) r.paths.push_back(std::move(p.values));
    if (m == 0) r.warnings = p.warnings;
  }
  return r;
}

struct SdeOptions {
  double guard = 1e3;
  int workers = 1;
  int path_points = 0;
};

/// Euler-Maruyama for dX = a(X) dt + sigma(X) dB with the coefficients read
/// from `coeff`. The step is T/ceil(T/dt); increments come from the
/// sde_increments stream keyed by (step, member).
inline EnsembleResult solve_sde(const homog::CoeffField& coeff, const SmallVec& xi, double T, double dt,
                                std::uint32_t N, std::uint64_t seed, const SdeOptions& opt = {}) {
  require(T > 0.0 && dt > 0.0 && N >= 1, "solve_sde: bad T, dt or N");
  require(xi.size() == coeff.dim(), "solve_sde: xi has wrong dimension");
  const int d = coeff.dim();
  const long long steps = std::max(1LL, static_cast<long long>(std::ceil(T / dt - 1e-9)));
  const double h = T / static_cast<double>(steps), sq = std::sqrt(h);
  const rng::CounterRng gen(seed, rng::Stream::sde_increments);
  const bool keep = opt.path_points >= 2;
  std::vector<long long> marks;
  if (keep)
    for (int j = 0; j < opt.path_points; ++j)
      marks.push_back(std::llround(static_cast<double>(j) * static_cast<double>(steps) / (opt.path_points - 1)));

  struct Out {
    MemberOutcome o;
    Mat path;
  };
  auto results = parallel_map(N, opt.workers, [&](std::size_t mi) {
    const auto m = static_cast<std::uint32_t>(mi);
    Out r;
    r.o.member = m;
    SmallVec x = xi, a, z(d), x_next;
    SmallMat s;
    std::vector<std::pair<std::size_t, double>> st;
    SmallVec run_max = xi, integral = SmallVec::Zero(d);
    if (keep) {
      r.path = Mat::Constant(d, opt.path_points, std::numeric_limits<double>::quiet_NaN());
      r.path.col(0) = xi;
    }
    std::size_t mark = 1;
    for (long long k = 0; k < steps; ++k) {
      coeff.drift_at(x, a, st);
      coeff.diffusion_at(x, s, st);
      gen.normals(static_cast<std::uint64_t>(k), m, z);
      x_next = x + h * a + sq * (s * z);
      if (!x_next.allFinite()) throw IntegrationDiverged(static_cast<double>(k + 1) * h);
      integral += (0.5 * h) * (x + x_next);
      x = x_next;
      run_max = run_max.cwiseMax(x);
      while (keep && mark < marks.size() && marks[mark] == k + 1) r.path.col(static_cast<Eigen::Index>(mark++)) = x;
      if (x.norm() > opt.guard) {
        r.o.escaped = true;
        r.o.escape_time = static_cast<double>(k + 1) * h;
        break;
      }
    }
    r.o.endpoint = r.o.escaped ? Vec::Constant(d, std::numeric_limits<double>::quiet_NaN()) : Vec(x);
    r.o.running_max = run_max;
    r.o.time_average = r.o.escaped ? Vec::Constant(d, std::numeric_limits<double>::quiet_NaN()) : Vec(integral / T);
    return r;
  });

  EnsembleResult out;
  out.kind = "sde";
  out.T = T;
  out.dt = h;
  out.seed = seed;
  out.requested = N;
  if (keep)
    for (long long mk : marks) out.path_grid.push_back(T * static_cast<double>(mk) / static_cast<double>(steps));
  for (auto& r : results) {
    out.members.push_back(std::move(r.o));
    if (keep) out.paths.push_back(std::move(r.path));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Product-case drivers

struct ProductDrivers {
  rough::HolderPath V;    ///< V(t) = int_0^t u(y_eps(r)) dr
  rough::RoughDriver W;   ///< W(t) = eps^{-1} int_0^t v(y_eps(r)) dr with its iterated integral
};

/// Drivers of the slow equation dx = g(x) dV + h(x) dW along one fast orbit,
/// sampled on the slow `grid` (starting at 0). Uses the same fast grid and
/// trapezoid rule as integrate_fast_slow.
inline ProductDrivers product_case_drivers(const FlowSpec& spec, const SlowSystem& sys, double eps,
                                           const FlowState& y0, const std::vector<double>& grid,
                                           double dt_fast = 0.01) {
  require(sys.form() == SlowSystem::Form::product, "product_case_drivers needs a product-form slow system");
  require(eps > 0.0, "product_case_drivers: eps must be positive");
  require(!grid.empty() && grid.front() == 0.0, "driver grid must start at 0");
  for (std::size_t i = 1; i < grid.size(); ++i) require(grid[i] > grid[i - 1], "driver grid must increase");
  const auto eu = static_cast<Eigen::Index>(sys.u().size()), ev = static_cast<Eigen::Index>(sys.v().size());
  const double e2 = eps * eps;
  const auto N = static_cast<Eigen::Index>(grid.size());

  ProductDrivers out;
  out.V.grid = grid;
  out.V.values = Mat::Zero(std::max<Eigen::Index>(eu, 1), N);
  out.W.W.grid = grid;
  out.W.W.values = Mat::Zero(std::max<Eigen::Index>(ev, 1), N);
  const Eigen::Index wdim = out.W.W.values.rows();
  out.W.WW.assign(grid.size(), Mat::Zero(wdim, wdim));
  out.W.WW_step.assign(grid.size() - 1, Mat::Zero(wdim, wdim));
  if (grid.size() < 2) return out;

  flow::Stepper st(spec, y0, dt_fast);
  std::vector<Observable> uobs = sys.u(), vobs = sys.v();
  if (uobs.empty()) uobs.push_back(observables::zero());
  if (vobs.empty()) vobs.push_back(observables::zero());
  observables::PathAccumulator uacc(uobs, false), vacc(vobs), local(vobs);
  uacc.reset(st.point());
  vacc.reset(st.point());
  local.reset(st.point());
  for (std::size_t k = 1; k < grid.size(); ++k) {
    st.advance_to(y0.time + grid[k] / e2, [&](const Point&, const Point& next, double h) {
      uacc.step(next, h);
      vacc.step(next, h);
      local.step(next, h);
    });
    const auto c = static_cast<Eigen::Index>(k);
    out.V.values.col(c) = e2 * uacc.level1();
    out.W.W.values.col(c) = eps * vacc.level1();
    out.W.WW[k] = e2 * vacc.level2();
    out.W.WW_step[k - 1] = e2 * local.level2();
    local.reset(st.point());
  }
  return out;
}

/// RDE vector fields of a product-form system: F = g, H = h with analytic
/// Jacobians. A system without u (or v) terms gets a zero column.
inline rough::VectorFieldPair rde_fields(const SlowSystem& sys) {
  require(sys.form() == SlowSystem::Form::product, "rde_fields needs a product-form slow system");
  const int d = sys.dimension();
  const auto eu = std::max<Eigen::Index>(static_cast<Eigen::Index>(sys.u().size()), 1);
  const auto ev = std::max<Eigen::Index>(static_cast<Eigen::Index>(sys.v().size()), 1);
  const auto S = std::make_shared<const SlowSystem>(sys);
  rough::VectorFieldPair f;
  f.d = d;
  auto pad = [](const SmallMat& m, Eigen::Index rows, Eigen::Index cols) {
    Mat out = Mat::Zero(rows, cols);
    out.leftCols(m.cols()) = m;
    return out;
  };
  f.F = [S, d, eu, pad](const Vec& x) { return pad(S->g(x), d, eu); };
  f.H = [S, d, ev, pad](const Vec& x) { return pad(S->h(x), d, ev); };
  f.dF = [S, d, eu, pad](const Vec& x) {
    auto j = S->dg(x);
    for (auto& m : j) m = pad(m, d, eu);
    return j;
  };
  f.dH = [S, d, ev, pad](const Vec& x) {
    auto j = S->dh(x);
    for (auto& m : j) m = pad(m, d, ev);
    return j;
  };
  return f;
}

}  // namespace fastslow::sim
