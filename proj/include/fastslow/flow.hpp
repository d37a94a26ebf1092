#pragma once

// Fast chaotic flows: fixed-step RK4 integration, long-orbit sampling of the
// physical invariant measure, and Poincaré-section return data.

#include "fastslow/core.hpp"

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace fastslow::flow {

using Point = SmallVec;

enum class FlowKind { lorenz, rotation_test, custom };

inline std::string to_string(FlowKind k) {
  switch (k) {
    case FlowKind::lorenz: return "lorenz";
    case FlowKind::rotation_test: return "rotation_test";
    case FlowKind::custom: return "custom";
  }
  return "?";
}

/// Vector field signature for user-supplied flows: writes f(y) into `out`.
using FieldFn = std::function<void(const Point& y, Point& out)>;

/// A named fast vector field on R^M.
class FlowSpec {
 public:
  static FlowSpec lorenz(double sigma = 10.0, double rho = 28.0, double beta = 8.0 / 3.0) {
    FlowSpec s(FlowKind::lorenz, 3);
    s.params_ = {{"sigma", sigma}, {"rho", rho}, {"beta", beta}};
    s.c0_ = sigma;
    s.c1_ = rho;
    s.c2_ = beta;
    s.reference_ = Point(3);
    s.reference_ << 0.0, 1.0, 1.05;
    return s;
  }

  /// Harmonic rotation y' = (-y2, y1); an integrator and section oracle only.
  static FlowSpec rotation_test() {
    FlowSpec s(FlowKind::rotation_test, 2);
    s.reference_ = Point(2);
    s.reference_ << 1.0, 0.0;
    return s;
  }

  static FlowSpec custom(std::string name, int dimension, FieldFn field, Point reference,
                         std::map<std::string, double> params = {}) {
    require(dimension >= 1 && dimension <= kMaxSmallDim, "custom flow dimension out of range");
    require(static_cast<bool>(field), "custom flow requires a vector field");
    require(reference.size() == dimension, "custom flow reference point has wrong dimension");
    FlowSpec s(FlowKind::custom, dimension);
    s.name_ = std::move(name);
    s.field_ = std::move(field);
    s.params_ = std::move(params);
    s.reference_ = std::move(reference);
    return s;
  }

  /// Builds from a kind name and a parameter map (missing Lorenz parameters
  /// take the classical chaotic values).
  static FlowSpec from_name(const std::string& name, const std::map<std::string, double>& params) {
    if (name == "lorenz") {
      for (const auto& [k, _] : params)
        if (k != "sigma" && k != "rho" && k != "beta")
          throw ConfigError("unknown lorenz parameter '" + k + "'");
      auto get = [&](const char* k, double d) {
        auto it = params.find(k);
        return it == params.end() ? d : it->second;
      };
      return lorenz(get("sigma", 10.0), get("rho", 28.0), get("beta", 8.0 / 3.0));
    }
    if (name == "rotation_test") {
      if (!params.empty()) throw ConfigError("rotation_test takes no parameters");
      return rotation_test();
    }
    throw ConfigError("unknown flow '" + name + "' (custom flows are library-only)");
  }

  FlowKind kind() const { return kind_; }
  int dimension() const { return dim_; }
  const std::map<std::string, double>& params() const { return params_; }
  std::string name() const { return kind_ == FlowKind::custom ? name_ : to_string(kind_); }
  const Point& reference_point() const { return reference_; }

  double param(const std::string& key) const {
    auto it = params_.find(key);
    if (it == params_.end()) throw InvalidArgument("flow has no parameter '" + key + "'");
    return it->second;
  }

  void field(const Point& y, Point& out) const {
    switch (kind_) {
      case FlowKind::lorenz:
        out.resize(3);
        out[0] = c0_ * (y[1] - y[0]);
        out[1] = y[0] * (c1_ - y[2]) - y[1];
        out[2] = y[0] * y[1] - c2_ * y[2];
        return;
      case FlowKind::rotation_test:
        out.resize(2);
        out[0] = -y[1];
        out[1] = y[0];
        return;
      case FlowKind::custom:
        out.resize(dim_);
        field_(y, out);
        return;
    }
  }

 private:
  FlowSpec(FlowKind kind, int dim) : kind_(kind), dim_(dim) {}

  FlowKind kind_;
  int dim_;
  std::string name_;
  std::map<std::string, double> params_;
  double c0_ = 0.0, c1_ = 0.0, c2_ = 0.0;
  FieldFn field_;
  Point reference_;
};

struct FlowState {
  Point point;
  double time = 0.0;
};

struct Orbit {
  std::vector<double> grid;
  std::vector<Point> points;

  std::size_t size() const { return grid.size(); }
};

/// One classical RK4 step of size dt, in place. No finiteness check.
inline void rk4_inplace(const FlowSpec& spec, Point& y, double dt) {
  Point k1, k2, k3, k4, tmp;
  spec.field(y, k1);
  tmp = y + (0.5 * dt) * k1;
  spec.field(tmp, k2);
  tmp = y + (0.5 * dt) * k2;
  spec.field(tmp, k3);
  tmp = y + dt * k3;
  spec.field(tmp, k4);
  y += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

inline void check_finite(const Point& y, double time) {
  if (!y.allFinite()) throw IntegrationDiverged(time);
}

inline FlowState step_flow(const FlowSpec& spec, const FlowState& state, double dt) {
  require(dt > 0.0, "step_flow: dt must be positive");
  require(state.point.size() == spec.dimension(), "step_flow: state dimension mismatch");
  check_finite(state.point, state.time);
  FlowState out{state.point, state.time + dt};
  rk4_inplace(spec, out.point, dt);
  check_finite(out.point, out.time);
  return out;
}

/// Uniform-step walker. The trajectory is always the RK4 orbit on the grid
/// origin + k*dt; an off-grid target is reached by a side step from the last
/// grid node, producing a virtual node that is visited but never stepped from.
/// Sampling times therefore never perturb the orbit itself.
class Stepper {
 public:
  Stepper(const FlowSpec& spec, FlowState start, double dt)
      : spec_(&spec), y_(std::move(start.point)), origin_(start.time), dt_(dt) {
    require(dt > 0.0, "dt must be positive");
    require(y_.size() == spec.dimension(), "state dimension mismatch");
    check_finite(y_, origin_);
  }

  double time() const { return virtual_ ? vt_ : node_time(k_); }
  const Point& point() const { return virtual_ ? v_ : y_; }
  FlowState state() const { return {point(), time()}; }
  double dt() const { return dt_; }

  /// Full grid steps plus the length of the final off-grid piece to `target`.
  std::pair<long long, double> plan_to(double target) const {
    if (target <= time()) return {0, 0.0};
    const long long last = whole_steps(target - origin_, dt_);
    double rest = target - node_time(last);
    if (rest < 1e-12 * dt_) rest = 0.0;
    return {std::max(0LL, last - k_), rest};
  }

  /// Advances to `target`, calling visit(prev, next, h) for every substep.
  template <class Visit>
  void advance_to(double target, Visit&& visit) {
    const auto [n, rest] = plan_to(target);
    Point prev;
    for (long long i = 0; i < n; ++i) {
      prev = point();
      const double t0 = time();
      rk4_inplace(*spec_, y_, dt_);
      ++k_;
      virtual_ = false;
      check_finite(y_, node_time(k_));
      visit(prev, y_, node_time(k_) - t0);
    }
    if (rest > 0.0 && target > time()) {
      prev = point();
      const double t0 = time();
      Point v = y_;
      rk4_inplace(*spec_, v, rest);
      check_finite(v, target);
      v_ = std::move(v);
      vt_ = target;
      virtual_ = true;
      visit(prev, v_, target - t0);
    }
  }

  void advance_to(double target) {
    advance_to(target, [](const Point&, const Point&, double) {});
  }

 private:
  double node_time(long long k) const { return origin_ + static_cast<double>(k) * dt_; }

  const FlowSpec* spec_;
  Point y_;
  double origin_;
  double dt_;
  long long k_ = 0;
  Point v_;
  double vt_ = 0.0;
  bool virtual_ = false;
};

inline Orbit evolve(const FlowSpec& spec, const FlowState& state, double horizon, double dt) {
  require(horizon > 0.0, "evolve: horizon must be positive");
  Stepper st(spec, state, dt);
  Orbit orbit;
  const auto [n, rest] = st.plan_to(state.time + horizon);
  orbit.grid.reserve(static_cast<std::size_t>(n) + 2);
  orbit.points.reserve(static_cast<std::size_t>(n) + 2);
  orbit.grid.push_back(state.time);
  orbit.points.push_back(state.point);
  st.advance_to(state.time + horizon, [&](const Point&, const Point& next, double) {
    orbit.grid.push_back(st.time());
    orbit.points.push_back(next);
  });
  return orbit;
}

// ---------------------------------------------------------------------------
// Invariant-measure sampling

struct InvariantSampling {
  double burn_in = 100.0;
  double gap = 1.0;
  double dt = 0.01;
  double perturbation = 1.0;  ///< std of the Gaussian kick applied to the reference point
};

/// Initial point for (seed, member): reference point plus a seeded Gaussian kick.
inline Point perturbed_reference(const FlowSpec& spec, std::uint64_t seed, std::uint32_t member,
                                 double perturbation) {
  rng::CounterRng gen(seed, rng::Stream::initial_perturbation);
  Point kick(spec.dimension());
  gen.normals(0, member, kick);
  return spec.reference_point() + perturbation * kick;
}

/// States spaced `gap` apart along one orbit after discarding `burn_in`.
/// Consecutive states form a stationary sequence, not independent draws.
inline std::vector<FlowState> sample_invariant(const FlowSpec& spec, std::uint64_t seed,
                                               double burn_in, long long count, double gap,
                                               double dt = 0.01, double perturbation = 1.0,
                                               std::uint32_t member = 0) {
  require(burn_in > 0.0 && gap > 0.0 && count >= 1, "sample_invariant: bad arguments");
  Stepper st(spec, {perturbed_reference(spec, seed, member, perturbation), 0.0}, dt);
  st.advance_to(burn_in);
  std::vector<FlowState> out;
  out.reserve(static_cast<std::size_t>(count));
  out.push_back(st.state());
  for (long long i = 1; i < count; ++i) {
    st.advance_to(burn_in + static_cast<double>(i) * gap);
    out.push_back(st.state());
  }
  return out;
}

/// Independent-ish initial condition for ensemble member `member`: its own
/// seeded kick followed by a full burn-in. Time is reset to 0.
inline FlowState member_state(const FlowSpec& spec, std::uint64_t seed, std::uint32_t member,
                              const InvariantSampling& how) {
  auto s = sample_invariant(spec, seed, how.burn_in, 1, how.gap, how.dt, how.perturbation, member);
  s.front().time = 0.0;
  return s.front();
}

// ---------------------------------------------------------------------------
// Poincaré sections

enum class Direction { upward, downward };

struct SectionSpec {
  Point normal;
  double offset = 0.0;
  Direction direction = Direction::upward;
  double min_return_time = 1e-3;

  double value(const Point& y) const { return normal.dot(y) - offset; }

  void validate(int dim) const {
    require(normal.size() == dim, "section normal has wrong dimension");
    require(normal.norm() > 0.0, "section normal must be nonzero");
    require(min_return_time > 0.0, "min_return_time must be positive");
  }
};

struct ReturnSample {
  Point base_point;
  double return_time = 0.0;
  Orbit intra_orbit;
};

struct ReturnScanOptions {
  double dt = 0.01;
  double max_search = 1000.0;   ///< flow time allowed between crossings
  double time_tolerance = 1e-10;
};

namespace detail {

inline bool crosses(const SectionSpec& sec, double g0, double g1) {
  return sec.direction == Direction::upward ? (g0 < 0.0 && g1 >= 0.0) : (g0 > 0.0 && g1 <= 0.0);
}

/// Locates the crossing inside a step from y0 by bisection on the substep
/// length, then polishes with bracketed secant steps.
inline double locate_crossing(const FlowSpec& spec, const SectionSpec& sec, const Point& y0,
                              double h, double tol) {
  double lo = 0.0, hi = h;
  double glo = sec.value(y0);
  Point y = y0;
  rk4_inplace(spec, y, h);
  double ghi = sec.value(y);
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    Point ym = y0;
    rk4_inplace(spec, ym, mid);
    const double gm = sec.value(ym);
    if (crosses(sec, glo, gm)) {
      hi = mid;
      ghi = gm;
    } else {
      lo = mid;
      glo = gm;
    }
  }
  double tau = hi;
  for (int it = 0; it < 3 && ghi != glo; ++it) {
    const double cand = lo - glo * (hi - lo) / (ghi - glo);
    if (!(cand > lo && cand < hi)) break;
    Point yc = y0;
    rk4_inplace(spec, yc, cand);
    const double gc = sec.value(yc);
    tau = cand;
    if (gc == 0.0) break;
    if (crosses(sec, glo, gc)) {
      hi = cand;
      ghi = gc;
    } else {
      lo = cand;
      glo = gc;
    }
  }
  return tau;
}

}  // namespace detail

/// Streams an orbit section-to-section. Visitor interface:
///   on_step(prev, next, h)        every integration substep inside a return
///   on_return(return_time, point) at each crossing (point is the new base)
/// The first crossing after `start` is located silently; scanning then stops
/// after `count` returns or once flow time since the first crossing exceeds
/// `time_budget` (whichever comes first; pass a negative value to disable).
template <class OnStep, class OnReturn>
inline FlowState scan_returns(const FlowSpec& spec, const SectionSpec& section,
                              const FlowState& start, long long count, double time_budget,
                              const ReturnScanOptions& opt, OnStep&& on_step,
                              OnReturn&& on_return) {
  section.validate(spec.dimension());
  Point y = start.point;
  double t = start.time;
  check_finite(y, t);

  // Walks until the next valid crossing; returns the crossing state.
  auto next_crossing = [&](bool report_steps) {
    const double t_base = t;
    double g = section.value(y);
    Point prev;
    while (true) {
      if (t - t_base > opt.max_search)
        throw NoCrossingFound("no section crossing within " + std::to_string(opt.max_search) +
                              " time units after t=" + std::to_string(t_base));
      prev = y;
      rk4_inplace(spec, y, opt.dt);
      check_finite(y, t + opt.dt);
      const double g1 = section.value(y);
      if (detail::crosses(section, g, g1) && (t + opt.dt - t_base) >= section.min_return_time) {
        const double tau = detail::locate_crossing(spec, section, prev, opt.dt, opt.time_tolerance);
        if (t + tau - t_base >= section.min_return_time) {
          y = prev;
          rk4_inplace(spec, y, tau);
          t += tau;
          if (report_steps) on_step(prev, y, tau);
          return t - t_base;
        }
      }
      if (report_steps) on_step(prev, y, opt.dt);
      t += opt.dt;
      g = g1;
    }
  };

  next_crossing(false);
  const double t_first = t;
  on_return(0.0, y);
  for (long long k = 0; k < count; ++k) {
    if (time_budget >= 0.0 && t - t_first >= time_budget) break;
    const double r = next_crossing(true);
    on_return(r, y);
  }
  return {y, t};
}

inline std::vector<ReturnSample> poincare_returns(const FlowSpec& spec, const SectionSpec& section,
                                                  const FlowState& start, long long count,
                                                  const ReturnScanOptions& opt = {}) {
  require(count >= 1, "poincare_returns: count must be >= 1");
  std::vector<ReturnSample> out;
  Orbit current;
  double t_local = 0.0;
  scan_returns(
      spec, section, start, count, -1.0, opt,
      [&](const Point&, const Point& next, double h) {
        t_local += h;
        current.grid.push_back(t_local);
        current.points.push_back(next);
      },
      [&](double r, const Point& base) {
        if (r > 0.0) {
          out.back().return_time = r;
          out.back().intra_orbit = std::move(current);
        }
        if (static_cast<long long>(out.size()) < count) {
          out.push_back({base, 0.0, {}});
          current = Orbit{};
          current.grid.push_back(0.0);
          current.points.push_back(base);
          t_local = 0.0;
        }
      });
  return out;
}

}  // namespace fastslow::flow
