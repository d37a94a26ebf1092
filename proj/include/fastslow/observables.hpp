#pragma once

// Observables on fast phase space, Birkhoff and iterated time integrals along
// orbits, and the rescaled WIP paths built from them.

#include "fastslow/flow.hpp"

#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace fastslow::observables {

using flow::FlowSpec;
using flow::FlowState;
using flow::Point;

using EvalFn = std::function<void(const Point& y, SmallVec& out)>;

/// A map R^M -> R^m with optional empirical centering. Evaluation is pure.
class Observable {
 public:
  Observable() = default;
  Observable(std::string name, int arity, EvalFn fn)
      : name_(std::move(name)), arity_(arity), fn_(std::make_shared<EvalFn>(std::move(fn))),
        mean_(SmallVec::Zero(arity)) {
    require(arity >= 1 && arity <= kMaxSmallDim, "observable arity out of range");
  }

  const std::string& name() const { return name_; }
  int arity() const { return arity_; }
  bool centered() const { return centered_; }
  /// True for observables built as constants (their mu-average needs no sampling).
  bool is_constant() const { return constant_; }
  const SmallVec& mean() const { return mean_; }

  /// Raw value, without centering.
  void raw(const Point& y, SmallVec& out) const {
    out.resize(arity_);
    (*fn_)(y, out);
  }

  void eval(const Point& y, SmallVec& out) const {
    raw(y, out);
    if (centered_) out -= mean_;
  }

  SmallVec operator()(const Point& y) const {
    SmallVec out;
    eval(y, out);
    return out;
  }

  double scalar(const Point& y) const {
    SmallVec out;
    eval(y, out);
    return out[0];
  }

  /// Declares the observable mean-zero by construction (no calibration).
  Observable as_centered(SmallVec mean = {}) const {
    Observable o = *this;
    o.centered_ = true;
    o.mean_ = mean.size() == 0 ? SmallVec::Zero(arity_) : std::move(mean);
    return o;
  }

  /// Same map with centering removed.
  Observable uncentered() const {
    Observable o = *this;
    o.centered_ = false;
    o.mean_ = SmallVec::Zero(arity_);
    return o;
  }

  Observable renamed(std::string name) const {
    Observable o = *this;
    o.name_ = std::move(name);
    return o;
  }

  Observable marked_constant() const {
    Observable o = *this;
    o.constant_ = true;
    return o;
  }

 private:
  std::string name_;
  int arity_ = 0;
  std::shared_ptr<const EvalFn> fn_;
  SmallVec mean_;
  bool centered_ = false;
  bool constant_ = false;
};

/// Subtracts the sample mean of the raw observable over `calibration`.
/// Idempotent: re-centering on the same sample reproduces the same mean.
inline Observable center(const Observable& obs, const std::vector<FlowState>& calibration) {
  if (calibration.empty()) throw InvalidArgument("center: empty calibration set");
  SmallVec acc = SmallVec::Zero(obs.arity());
  SmallVec val;
  for (const auto& s : calibration) {
    obs.raw(s.point, val);
    acc += val;
  }
  acc /= static_cast<double>(calibration.size());
  return obs.as_centered(acc);
}

struct TimeAverage {
  SmallVec mean;
  SmallVec std_error;
};

/// mu-average of the raw observable from Birkhoff time averages over
/// independent orbits (one per member, each after its own burn-in). Strided
/// point samples alias with nearly periodic oscillations of the flow, time
/// integrals do not.
inline TimeAverage time_average(const FlowSpec& spec, const Observable& obs, std::uint64_t seed,
                                std::uint32_t members, double length, const flow::InvariantSampling& how = {}) {
  require(members >= 1 && length > 0.0, "time_average: need members >= 1 and a positive length");
  const Observable raw = obs.uncentered();
  std::vector<std::vector<double>> per(static_cast<std::size_t>(obs.arity()));
  for (std::uint32_t m = 0; m < members; ++m) {
    const auto y0 = flow::member_state(spec, seed, m, how);
    flow::Stepper st(spec, y0, how.dt);
    SmallVec last, next, acc = SmallVec::Zero(obs.arity());
    raw.raw(st.point(), last);
    st.advance_to(length, [&](const Point&, const Point& y, double h) {
      raw.raw(y, next);
      acc += (0.5 * h) * (last + next);
      last = next;
    });
    for (int i = 0; i < obs.arity(); ++i) per[static_cast<std::size_t>(i)].push_back(acc[i] / length);
  }
  TimeAverage out{SmallVec::Zero(obs.arity()), SmallVec::Zero(obs.arity())};
  for (int i = 0; i < obs.arity(); ++i) {
    const auto bm = batch_means(per[static_cast<std::size_t>(i)]);
    out.mean[i] = bm.mean;
    out.std_error[i] = bm.std_error;
  }
  return out;
}

/// Centers on the time average (see time_average).
inline Observable center_by_time_average(const FlowSpec& spec, const Observable& obs, std::uint64_t seed,
                                         std::uint32_t members, double length,
                                         const flow::InvariantSampling& how = {}) {
  return obs.as_centered(time_average(spec, obs, seed, members, length, how).mean);
}

// ---------------------------------------------------------------------------
// Built-in library

inline Observable constant(double c, int arity = 1) {
  return Observable("const", arity, [c](const Point&, SmallVec& out) { out.setConstant(c); }).marked_constant();
}

/// The zero observable, trivially centered.
inline Observable zero(int arity = 1) { return constant(0.0, arity).renamed("zero").as_centered(); }

inline Observable coordinate(int index, double scale = 1.0) {
  require(index >= 0 && index < kMaxSmallDim, "coordinate index out of range");
  return Observable("y" + std::to_string(index + 1), 1,
                    [index, scale](const Point& y, SmallVec& out) { out[0] = scale * y[index]; });
}

struct Monomial {
  double coef = 1.0;
  std::vector<int> powers;  ///< one exponent per phase coordinate
};

inline double monomial_value(const Monomial& m, const Point& y) {
  double v = m.coef;
  for (std::size_t i = 0; i < m.powers.size(); ++i)
    for (int p = 0; p < m.powers[i]; ++p) v *= y[static_cast<Eigen::Index>(i)];
  return v;
}

/// Scalar polynomial in the phase coordinates.
inline Observable polynomial(std::vector<Monomial> terms, std::string name = "poly") {
  for (const auto& t : terms)
    for (int p : t.powers) require(p >= 0, "polynomial powers must be non-negative");
  return Observable(std::move(name), 1, [terms = std::move(terms)](const Point& y, SmallVec& out) {
    double s = 0.0;
    for (const auto& t : terms) s += monomial_value(t, y);
    out[0] = s;
  });
}

/// Stacks scalar or vector observables into one vector observable; the
/// centering state of each part is carried over.
inline Observable stack(std::vector<Observable> parts, std::string name = "stack") {
  int arity = 0;
  bool all_centered = true;
  for (const auto& p : parts) {
    arity += p.arity();
    all_centered = all_centered && p.centered();
  }
  Observable out(std::move(name), arity, [parts](const Point& y, SmallVec& out) {
    SmallVec tmp;
    int off = 0;
    for (const auto& p : parts) {
      p.eval(y, tmp);
      out.segment(off, p.arity()) = tmp;
      off += p.arity();
    }
  });
  return all_centered ? out.as_centered() : out;
}

/// alpha * a + b, componentwise. Centered iff both inputs are.
inline Observable combine(double alpha, const Observable& a, const Observable& b) {
  require(a.arity() == b.arity(), "combine: arity mismatch");
  Observable out(a.name() + "+" + b.name(), a.arity(), [alpha, a, b](const Point& y, SmallVec& out) {
    SmallVec va, vb;
    a.eval(y, va);
    b.eval(y, vb);
    out = alpha * va + vb;
  });
  return a.centered() && b.centered() ? out.as_centered() : out;
}

// ---------------------------------------------------------------------------
// Path accumulation
//
// Birkhoff increments use the trapezoid rule on the integrator grid. The
// second level is the exact iterated integral of the piecewise-linear
// interpolation of the Birkhoff path, which makes the discrete product rule
// S(v,w)+S(w,v)^T = v (x) w and the Chen relation hold to rounding.

class PathAccumulator {
 public:
  PathAccumulator(std::vector<Observable> obs, bool track_area = true)
      : obs_(std::move(obs)), track_area_(track_area) {
    for (const auto& o : obs_) dim_ += o.arity();
    require(dim_ >= 1 && dim_ <= kMaxSmallDim, "too many observable components");
    level1_ = SmallVec::Zero(dim_);
    level2_ = SmallMat::Zero(dim_, dim_);
  }

  int dim() const { return dim_; }

  void evaluate(const Point& y, SmallVec& out) const {
    out.resize(dim_);
    SmallVec tmp;
    int off = 0;
    for (const auto& o : obs_) {
      o.eval(y, tmp);
      out.segment(off, o.arity()) = tmp;
      off += o.arity();
    }
  }

  /// Starts a fresh path at the point y (values reset to zero).
  void reset(const Point& y) {
    evaluate(y, last_);
    level1_.setZero();
    level2_.setZero();
    steps_ = 0;
  }

  /// Advances along one substep of length h ending at y_next.
  void step(const Point& y_next, double h) {
    SmallVec next;
    evaluate(y_next, next);
    const SmallVec inc = (0.5 * h) * (last_ + next);
    if (track_area_) level2_.noalias() += level1_ * inc.transpose() + 0.5 * inc * inc.transpose();
    level1_ += inc;
    last_ = next;
    ++steps_;
  }

  const SmallVec& level1() const { return level1_; }
  const SmallMat& level2() const { return level2_; }
  const SmallVec& last_value() const { return last_; }
  long long steps() const { return steps_; }

 private:
  std::vector<Observable> obs_;
  bool track_area_;
  int dim_ = 0;
  SmallVec last_;
  SmallVec level1_;
  SmallMat level2_;
  long long steps_ = 0;
};

namespace detail {

/// Walks from y0 to relative time s (no accumulation), then accumulates on
/// [s, t] relative to y0.time.
inline PathAccumulator integrate_window(const FlowSpec& spec, std::vector<Observable> obs,
                                        const FlowState& y0, double s, double t, double dt) {
  require(s <= t, "integration window requires s <= t");
  require(s >= 0.0, "integration window must start at or after y0");
  flow::Stepper st(spec, y0, dt);
  if (s > 0.0) st.advance_to(y0.time + s);
  PathAccumulator acc(std::move(obs));
  acc.reset(st.point());
  if (t > s) st.advance_to(y0.time + t, [&](const Point&, const Point& next, double h) { acc.step(next, h); });
  return acc;
}

}  // namespace detail

/// v_{s,t} = int_s^t v(phi_r y0) dr (times relative to y0).
inline Vec birkhoff_integral(const FlowSpec& spec, const Observable& v, const FlowState& y0,
                             double s, double t, double dt) {
  return Vec(detail::integrate_window(spec, {v}, y0, s, t, dt).level1());
}

/// S_{s,t}^{ij} = int_s^t (int_s^r v^i du) w^j(r) dr, an m_v x m_w matrix.
inline Mat iterated_integral(const FlowSpec& spec, const Observable& v, const Observable& w,
                             const FlowState& y0, double s, double t, double dt) {
  auto acc = detail::integrate_window(spec, {v, w}, y0, s, t, dt);
  return Mat(acc.level2().block(0, v.arity(), v.arity(), w.arity()));
}

// ---------------------------------------------------------------------------
// WIP paths

/// Values of a path on a time grid. Vectors are stored as m x 1 matrices.
struct PathSample {
  std::vector<double> grid;
  std::vector<Mat> values;
};

/// Level-1 and level-2 rescaled paths plus the level-2 increments over each
/// grid interval, computed independently from a fresh local accumulation.
struct WipPaths {
  PathSample W;
  PathSample WW;
  std::vector<Mat> WW_steps;
};

namespace detail {

/// Samples (a*v_{0,c t}, b*S_{0,c t}) on `grid` along the orbit from y0.
inline WipPaths rescaled_paths(const FlowSpec& spec, const Observable& v, const FlowState& y0,
                               double time_scale, double level1_scale, double level2_scale,
                               const std::vector<double>& grid, double dt) {
  require(!grid.empty() && grid.front() == 0.0, "WIP grid must start at 0");
  for (std::size_t i = 1; i < grid.size(); ++i) require(grid[i] > grid[i - 1], "WIP grid must increase");
  flow::Stepper st(spec, y0, dt);
  PathAccumulator global({v});
  PathAccumulator local({v});
  global.reset(st.point());
  local.reset(st.point());
  WipPaths out;
  auto record = [&]() {
    out.W.grid.push_back(0.0);
    out.W.values.push_back(Mat(level1_scale * global.level1()));
    out.WW.values.push_back(Mat(level2_scale * global.level2()));
  };
  record();
  out.W.grid.back() = grid.front();
  for (std::size_t k = 1; k < grid.size(); ++k) {
    st.advance_to(y0.time + time_scale * grid[k], [&](const Point&, const Point& next, double h) {
      global.step(next, h);
      local.step(next, h);
    });
    record();
    out.W.grid.back() = grid[k];
    out.WW_steps.push_back(Mat(level2_scale * local.level2()));
    local.reset(st.point());
  }
  out.WW.grid = out.W.grid;
  return out;
}

}  // namespace detail

/// W_{v,n}(t) = n^{-1/2} v_{0,tn} and WW_{v,n}(t) = n^{-1} S_{0,tn}(v,v).
inline WipPaths wip_path(const FlowSpec& spec, const Observable& v, const FlowState& y0, double n,
                         const std::vector<double>& grid, double dt) {
  require(n > 0.0, "wip_path: n must be positive");
  require(v.centered(), "wip_path: observable must be centered");
  return detail::rescaled_paths(spec, v, y0, n, 1.0 / std::sqrt(n), 1.0 / n, grid, dt);
}

/// W^(eps)(t) = eps * v_{0,t/eps^2} and WW^(eps)(t) = eps^2 * S_{0,t/eps^2}.
inline WipPaths wip_path_eps(const FlowSpec& spec, const Observable& v, const FlowState& y0,
                             double eps, const std::vector<double>& grid, double dt) {
  require(eps > 0.0, "wip_path_eps: eps must be positive");
  require(v.centered(), "wip_path_eps: observable must be centered");
  return detail::rescaled_paths(spec, v, y0, 1.0 / (eps * eps), eps, eps * eps, grid, dt);
}

/// Uniform grid of `points` values on [0, horizon].
inline std::vector<double> uniform_grid(double horizon, int points) {
  require(points >= 2 && horizon > 0.0, "uniform_grid: need >= 2 points on a positive horizon");
  std::vector<double> g(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) g[static_cast<std::size_t>(i)] = horizon * i / (points - 1);
  return g;
}

}  // namespace fastslow::observables
