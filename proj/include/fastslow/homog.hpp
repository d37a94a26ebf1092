#pragma once

// Estimators of B(v,w) = lim n^-1 E S_n and the limiting SDE coefficients
//   a~^i = int a^i dmu + sum_k B(b^k, d_k b^i),  (sigma sigma^T)^{ij} = B(b^i,b^j) + B(b^j,b^i).
// All estimators take lists of observables and return the full matrix
// B(v^alpha, w^beta); scalar wrappers are provided.

#include "fastslow/observables.hpp"
#include "fastslow/slow.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace fastslow::homog {

using flow::FlowSpec;
using flow::FlowState;
using flow::Point;
using observables::Observable;

enum class Method { window, correlation, suspension };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::window: return "window";
    case Method::correlation: return "correlation";
    case Method::suspension: return "suspension";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  if (s == "window") return Method::window;
  if (s == "correlation") return Method::correlation;
  if (s == "suspension") return Method::suspension;
  throw ConfigError("unknown estimator method '" + s + "'");
}

/// Ensemble of independent orbits: member m starts from its own seeded kick of
/// the reference point followed by a full burn-in.
struct EnsemblePlan {
  std::uint32_t members = 20;
  std::uint64_t seed = 1;
  flow::InvariantSampling sampling{};
  double orbit_length = 1000.0;  ///< flow time per member after burn-in
  double dt = 0.01;
  double origin_gap = 5.0;       ///< spacing of window origins along one orbit
  int workers = 1;
  double min_n = 50.0;           ///< window lengths below this are flagged
  double lag_step = 0.05;        ///< origin spacing of the correlation estimator
  double tail_warning = 0.05;    ///< relative lag-sum tail that triggers a warning
};

struct BMatrix {
  Mat value;
  Mat std_error;
  Method method = Method::window;
  std::vector<Mat> member_values;
  std::map<std::string, double> meta;
  std::vector<std::string> warnings;
};

struct BEstimate {
  double value = 0.0;
  double std_error = 0.0;
  Method method = Method::window;
  std::map<std::string, double> meta;
  std::vector<std::string> warnings;
};

struct BDecomposition {
  double sym = 0.0;
  double antisym = 0.0;
};

namespace detail {

inline int total_arity(const std::vector<Observable>& os) {
  int m = 0;
  for (const auto& o : os) m += o.arity();
  return m;
}

inline void require_centered(const std::vector<Observable>& os, const char* who) {
  for (const auto& o : os)
    if (!o.centered()) throw InvalidArgument(std::string(who) + ": observable '" + o.name() + "' must be centered");
}

/// Entrywise batch means over member matrices.
inline BMatrix reduce_members(std::vector<Mat> values, Method method) {
  require(!values.empty(), "estimator produced no member values");
  BMatrix out;
  out.method = method;
  const Eigen::Index r = values.front().rows(), c = values.front().cols();
  out.value = Mat::Zero(r, c);
  out.std_error = Mat::Zero(r, c);
  std::vector<double> xs(values.size());
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) {
      for (std::size_t m = 0; m < values.size(); ++m) xs[m] = values[m](i, j);
      const auto bm = batch_means(xs);
      out.value(i, j) = bm.mean;
      out.std_error(i, j) = bm.std_error;
    }
  out.member_values = std::move(values);
  return out;
}

inline FlowState member_start(const FlowSpec& spec, const EnsemblePlan& plan, std::uint32_t m) {
  flow::InvariantSampling how = plan.sampling;
  how.dt = plan.dt;
  return flow::member_state(spec, plan.seed, m, how);
}

inline void fill_meta(BMatrix& b, const EnsemblePlan& plan) {
  b.meta["members"] = plan.members;
  b.meta["seed"] = static_cast<double>(plan.seed);
  b.meta["orbit_length"] = plan.orbit_length;
  b.meta["dt"] = plan.dt;
}

/// Concatenation [vs, ws] unless ws is empty (then the lists coincide).
struct Lists {
  std::vector<Observable> all;
  int mv = 0, mw = 0, w_offset = 0;
};

inline Lists make_lists(const std::vector<Observable>& vs, const std::vector<Observable>& ws) {
  Lists l;
  l.all = vs;
  l.mv = total_arity(vs);
  if (ws.empty()) {
    l.mw = l.mv;
    l.w_offset = 0;
  } else {
    l.all.insert(l.all.end(), ws.begin(), ws.end());
    l.mw = total_arity(ws);
    l.w_offset = l.mv;
  }
  return l;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Window estimator: average of n^-1 S_{s,s+n} over members and time origins.

inline BMatrix window_matrix(const FlowSpec& spec, const std::vector<Observable>& vs,
                             const std::vector<Observable>& ws, double n, const EnsemblePlan& plan) {
  require(n > 0.0, "window estimator: n must be positive");
  require(plan.members >= 2, "estimators need at least 2 ensemble members");
  detail::require_centered(vs, "window estimator");
  detail::require_centered(ws, "window estimator");
  const auto lists = detail::make_lists(vs, ws);
  const int windows = static_cast<int>(std::floor((plan.orbit_length - n) / plan.origin_gap + 1e-9)) + 1;
  if (plan.orbit_length < n - 1e-9 || windows < 1)
    throw InvalidArgument("window estimator: orbit_length must be at least n");

  // Event times: window origins j*gap and ends j*gap + n, merged in order.
  struct Event {
    double t;
    int j;
    bool end;
  };
  std::vector<Event> events;
  for (int j = 0; j < windows; ++j) {
    events.push_back({j * plan.origin_gap, j, false});
    events.push_back({j * plan.origin_gap + n, j, true});
  }
  std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
    return a.t < b.t || (a.t == b.t && a.end && !b.end);
  });

  auto per_member = [&](std::size_t m) {
    const auto y0 = detail::member_start(spec, plan, static_cast<std::uint32_t>(m));
    flow::Stepper st(spec, y0, plan.dt);
    observables::PathAccumulator acc(lists.all);
    acc.reset(st.point());
    std::vector<SmallVec> l1(static_cast<std::size_t>(windows));
    std::vector<SmallMat> l2(static_cast<std::size_t>(windows));
    Mat sum = Mat::Zero(lists.mv, lists.mw);
    for (const auto& e : events) {
      st.advance_to(y0.time + e.t, [&](const Point&, const Point& next, double h) { acc.step(next, h); });
      const auto j = static_cast<std::size_t>(e.j);
      if (!e.end) {
        l1[j] = acc.level1();
        l2[j] = acc.level2();
      } else {
        const SmallVec& a1 = acc.level1();
        const SmallMat& a2 = acc.level2();
        const Vec vs_ = l1[j].head(lists.mv);
        const Vec dw = a1.segment(lists.w_offset, lists.mw) - l1[j].segment(lists.w_offset, lists.mw);
        const Mat S = a2.block(0, lists.w_offset, lists.mv, lists.mw) -
                      l2[j].block(0, lists.w_offset, lists.mv, lists.mw) - vs_ * dw.transpose();
        sum += S / n;
      }
    }
    return Mat(sum / windows);
  };
  auto out = detail::reduce_members(parallel_map(plan.members, plan.workers, per_member), Method::window);
  detail::fill_meta(out, plan);
  out.meta["n"] = n;
  out.meta["windows_per_member"] = windows;
  if (n < plan.min_n) out.warnings.push_back("n below configured minimum " + std::to_string(plan.min_n));
  return out;
}

// ---------------------------------------------------------------------------
// Correlation estimator: int_0^{t_max} C(t) dt with C(t) = avg v(y) w(phi_t y).
// Exchanging the lag integral and the origin average, each origin contributes
// v(y_s) (x) int_s^{s+t_max} w, which is the trapezoid quadrature of the
// empirical C on the integrator grid.

inline BMatrix correlation_matrix(const FlowSpec& spec, const std::vector<Observable>& vs,
                                  const std::vector<Observable>& ws, double t_max, const EnsemblePlan& plan) {
  require(t_max > 0.0, "correlation estimator: t_max must be positive");
  require(plan.members >= 2, "estimators need at least 2 ensemble members");
  detail::require_centered(vs, "correlation estimator");
  detail::require_centered(ws, "correlation estimator");
  const std::vector<Observable>& wl = ws.empty() ? vs : ws;
  const int mv = detail::total_arity(vs), mw = detail::total_arity(wl);
  const long long origins = whole_steps(plan.orbit_length - t_max, plan.lag_step) + 1;
  if (plan.orbit_length < t_max - 1e-9 || origins < 1)
    throw InvalidArgument("correlation estimator: orbit_length must be at least t_max");
  const long long lag_steps = whole_steps(t_max, plan.lag_step);
  const bool aligned = std::abs(lag_steps * plan.lag_step - t_max) < 1e-9 * t_max;

  struct MemberOut {
    Mat value;
    Mat tail;
  };
  auto per_member = [&](std::size_t m) {
    const auto y0 = detail::member_start(spec, plan, static_cast<std::uint32_t>(m));
    flow::Stepper st(spec, y0, plan.dt);
    observables::PathAccumulator wacc(wl, false);
    observables::PathAccumulator vacc(vs, false);
    wacc.reset(st.point());
    // Event grid: origins k*lag_step, plus ends k*lag_step + t_max when those are off-grid.
    std::vector<std::pair<double, int>> events;  // (time, kind) kind 0 = grid, 1 = end-only
    const long long grid_points = aligned ? origins + lag_steps : origins;
    for (long long k = 0; k < grid_points; ++k) events.push_back({k * plan.lag_step, 0});
    if (!aligned)
      for (long long k = 0; k < origins; ++k) events.push_back({k * plan.lag_step + t_max, 1});
    std::stable_sort(events.begin(), events.end());
    std::vector<SmallVec> v_at(static_cast<std::size_t>(origins));
    std::vector<SmallVec> Iw_at(static_cast<std::size_t>(origins));
    Mat sum = Mat::Zero(mv, mw), tail = Mat::Zero(mv, mw);
    long long next_origin = 0, next_end = 0;
    SmallVec vv, wv;
    for (const auto& [t, kind] : events) {
      st.advance_to(y0.time + t, [&](const Point&, const Point& nxt, double h) { wacc.step(nxt, h); });
      const double tol = 1e-9 * std::max(1.0, t);
      if (kind == 0 && next_origin < origins && std::abs(t - next_origin * plan.lag_step) <= tol) {
        vacc.evaluate(st.point(), vv);
        v_at[static_cast<std::size_t>(next_origin)] = vv;
        Iw_at[static_cast<std::size_t>(next_origin)] = wacc.level1();
        ++next_origin;
      }
      while (next_end < origins && std::abs(t - (next_end * plan.lag_step + t_max)) <= tol) {
        const auto k = static_cast<std::size_t>(next_end);
        const Vec dI = wacc.level1() - Iw_at[k];
        sum += Vec(v_at[k]) * dI.transpose();
        wacc.evaluate(st.point(), wv);
        tail += Vec(v_at[k]) * Vec(wv).transpose();
        ++next_end;
      }
    }
    require(next_end == origins, "correlation estimator: event bookkeeping failed");
    return MemberOut{Mat(sum / static_cast<double>(origins)), Mat(tail / static_cast<double>(origins))};
  };
  const auto members = parallel_map(plan.members, plan.workers, per_member);
  std::vector<Mat> values, tails;
  for (const auto& mo : members) {
    values.push_back(mo.value);
    tails.push_back(mo.tail);
  }
  auto out = detail::reduce_members(std::move(values), Method::correlation);
  detail::fill_meta(out, plan);
  Mat tail_mean = Mat::Zero(mv, mw);
  for (const auto& t : tails) tail_mean += t / static_cast<double>(tails.size());
  out.meta["t_max"] = t_max;
  out.meta["origins_per_member"] = static_cast<double>(origins);
  out.meta["tail_abs_max"] = tail_mean.cwiseAbs().maxCoeff();
  return out;
}

/// Empirical C(t) = avg v(y_s) w(y_{s+t}) on lags k*lag_step, k = 0..lags, for one orbit.
inline std::vector<Mat> correlation_function(const FlowSpec& spec, const Observable& v, const Observable& w,
                                             const FlowState& y0, double length, double lag_step, int lags,
                                             double dt) {
  require(lags >= 0 && lag_step > 0.0, "correlation_function: bad lag grid");
  const long long total = whole_steps(length, lag_step) + 1;
  require(total > lags, "correlation_function: orbit shorter than the largest lag");
  std::vector<SmallVec> vv(static_cast<std::size_t>(total)), ww(static_cast<std::size_t>(total));
  flow::Stepper st(spec, y0, dt);
  for (long long k = 0; k < total; ++k) {
    st.advance_to(y0.time + k * lag_step);
    v.eval(st.point(), vv[static_cast<std::size_t>(k)]);
    w.eval(st.point(), ww[static_cast<std::size_t>(k)]);
  }
  std::vector<Mat> out;
  const long long origins = total - lags;
  for (int l = 0; l <= lags; ++l) {
    Mat c = Mat::Zero(v.arity(), w.arity());
    for (long long k = 0; k < origins; ++k)
      c += Vec(vv[static_cast<std::size_t>(k)]) * Vec(ww[static_cast<std::size_t>(k + l)]).transpose();
    out.push_back(c / static_cast<double>(origins));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Suspension estimator:
//   B = rbar^-1 sum_{n=1}^{n_max} E[v~ (x) w~ o f^n] + rbar^-1 E[S(v,w)]
// with per-return induced observables v~ = int_0^r v o phi_t dt and the
// per-return iterated integral S.

struct ReturnRecord {
  double r = 0.0;
  Vec v_tilde, w_tilde;
  Mat S_vw;  ///< mv x mw
  Mat S_wv;  ///< mw x mv
};

/// Induced observables and iterated integrals for consecutive returns.
inline std::vector<ReturnRecord> induced_returns(const FlowSpec& spec, const flow::SectionSpec& section,
                                                 const std::vector<Observable>& vs,
                                                 const std::vector<Observable>& ws, const FlowState& start,
                                                 long long max_returns, double time_budget,
                                                 const flow::ReturnScanOptions& opt = {}) {
  const auto lists = detail::make_lists(vs, ws);
  observables::PathAccumulator acc(lists.all);
  std::vector<ReturnRecord> out;
  flow::scan_returns(
      spec, section, start, max_returns, time_budget, opt,
      [&](const Point&, const Point& next, double h) { acc.step(next, h); },
      [&](double r, const Point& base) {
        if (r > 0.0) {
          ReturnRecord rec;
          rec.r = r;
          rec.v_tilde = acc.level1().head(lists.mv);
          rec.w_tilde = acc.level1().segment(lists.w_offset, lists.mw);
          rec.S_vw = acc.level2().block(0, lists.w_offset, lists.mv, lists.mw);
          rec.S_wv = acc.level2().block(lists.w_offset, 0, lists.mw, lists.mv);
          out.push_back(std::move(rec));
        }
        acc.reset(base);
      });
  return out;
}

inline BMatrix suspension_matrix(const FlowSpec& spec, const flow::SectionSpec& section,
                                 const std::vector<Observable>& vs, const std::vector<Observable>& ws,
                                 int n_max, const EnsemblePlan& plan, flow::ReturnScanOptions opt = {}) {
  require(n_max >= 1, "suspension estimator: n_max must be >= 1");
  require(plan.members >= 2, "estimators need at least 2 ensemble members");
  detail::require_centered(vs, "suspension estimator");
  detail::require_centered(ws, "suspension estimator");
  opt.dt = plan.dt;
  struct MemberOut {
    Mat value;
    double rbar;
    double returns;
    double tail;
  };
  auto per_member = [&](std::size_t m) {
    const auto y0 = detail::member_start(spec, plan, static_cast<std::uint32_t>(m));
    const auto recs = induced_returns(spec, section, vs, ws, y0, std::numeric_limits<long long>::max(),
                                      plan.orbit_length, opt);
    const auto J = static_cast<long long>(recs.size());
    if (J <= n_max) throw InvalidArgument("suspension estimator: too few returns for n_max");
    double rbar = 0.0;
    Mat Sbar = Mat::Zero(recs.front().S_vw.rows(), recs.front().S_vw.cols());
    for (const auto& rc : recs) {
      rbar += rc.r / static_cast<double>(J);
      Sbar += rc.S_vw / static_cast<double>(J);
    }
    Mat lags = Mat::Zero(Sbar.rows(), Sbar.cols()), last;
    for (int n = 1; n <= n_max; ++n) {
      Mat c = Mat::Zero(Sbar.rows(), Sbar.cols());
      for (long long j = 0; j + n < J; ++j)
        c += recs[static_cast<std::size_t>(j)].v_tilde * recs[static_cast<std::size_t>(j + n)].w_tilde.transpose();
      c /= static_cast<double>(J - n);
      lags += c;
      last = c;
    }
    const Mat total = lags + Sbar;
    const double tail = last.cwiseAbs().maxCoeff() / std::max(total.cwiseAbs().maxCoeff(), 1e-300);
    return MemberOut{Mat(total / rbar), rbar, static_cast<double>(J), tail};
  };
  const auto members = parallel_map(plan.members, plan.workers, per_member);
  std::vector<Mat> values;
  double rbar = 0.0, returns = 0.0, tail = 0.0;
  for (const auto& mo : members) {
    values.push_back(mo.value);
    rbar += mo.rbar / members.size();
    returns += mo.returns;
    tail = std::max(tail, mo.tail);
  }
  auto out = detail::reduce_members(std::move(values), Method::suspension);
  detail::fill_meta(out, plan);
  out.meta["n_max"] = n_max;
  out.meta["r_bar"] = rbar;
  out.meta["returns"] = returns;
  out.meta["lag_tail_rel"] = tail;
  if (tail > plan.tail_warning) out.warnings.push_back("lag-sum tail at n_max exceeds threshold");
  return out;
}

// ---------------------------------------------------------------------------
// Scalar wrappers

inline BEstimate scalar(const BMatrix& b, Eigen::Index i = 0, Eigen::Index j = 0) {
  return {b.value(i, j), b.std_error(i, j), b.method, b.meta, b.warnings};
}

inline BEstimate estimate_B_window(const FlowSpec& spec, const Observable& v, const Observable& w, double n,
                                   const EnsemblePlan& plan) {
  require(v.arity() == 1 && w.arity() == 1, "scalar estimator needs scalar observables");
  return scalar(window_matrix(spec, {v}, {w}, n, plan));
}

inline BEstimate estimate_B_correlation(const FlowSpec& spec, const Observable& v, const Observable& w,
                                        double t_max, const EnsemblePlan& plan) {
  require(v.arity() == 1 && w.arity() == 1, "scalar estimator needs scalar observables");
  return scalar(correlation_matrix(spec, {v}, {w}, t_max, plan));
}

inline BEstimate estimate_B_suspension(const FlowSpec& spec, const flow::SectionSpec& section,
                                       const Observable& v, const Observable& w, int n_max,
                                       const EnsemblePlan& plan, const flow::ReturnScanOptions& opt = {}) {
  require(v.arity() == 1 && w.arity() == 1, "scalar estimator needs scalar observables");
  return scalar(suspension_matrix(spec, section, {v}, {w}, n_max, plan, opt));
}

inline BDecomposition decompose(const BEstimate& b_vw, const BEstimate& b_wv) {
  return {0.5 * (b_vw.value + b_wv.value), 0.5 * (b_vw.value - b_wv.value)};
}

// ---------------------------------------------------------------------------
// Signed area

/// Lévy area of a planar path closed by its chord:
///   1/2 sum_k (x_k - x_0)(y_{k+1} - y_k) - (y_k - y_0)(x_{k+1} - x_k).
inline double planar_signed_area(const std::vector<double>& xs, const std::vector<double>& ys) {
  require(xs.size() == ys.size(), "planar_signed_area: coordinate lengths differ");
  double a = 0.0;
  for (std::size_t k = 0; k + 1 < xs.size(); ++k)
    a += (xs[k] - xs[0]) * (ys[k + 1] - ys[k]) - (ys[k] - ys[0]) * (xs[k + 1] - xs[k]);
  return 0.5 * a;
}

/// (S(v,w) - S(w,v)) / 2 along the intra-return orbit of a return sample;
/// the signed area of the Birkhoff path (int v, int w) closed by its chord.
inline double signed_area(const flow::ReturnSample& rs, const Observable& v, const Observable& w) {
  require(v.arity() == 1 && w.arity() == 1, "signed_area needs scalar observables");
  const auto& o = rs.intra_orbit;
  require(!o.points.empty(), "signed_area: empty return sample");
  observables::PathAccumulator acc({v, w});
  acc.reset(o.points.front());
  for (std::size_t k = 1; k < o.points.size(); ++k) acc.step(o.points[k], o.grid[k] - o.grid[k - 1]);
  return 0.5 * (acc.level2()(0, 1) - acc.level2()(1, 0));
}

// ---------------------------------------------------------------------------
// PSD square root

/// Symmetric PSD square root. Eigenvalues in [-tol, 0) are clipped to 0; a
/// negative tol selects the default 1e-6 * max |eigenvalue|.
inline Mat matrix_sqrt_psd(const Mat& S, double tol = -1.0) {
  require(S.rows() == S.cols(), "matrix_sqrt_psd: matrix must be square");
  const double scale = std::max(1.0, S.cwiseAbs().maxCoeff());
  if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw InvalidArgument("matrix_sqrt_psd: matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (S + S.transpose()));
  Vec lam = es.eigenvalues();
  if (tol < 0.0) tol = 1e-6 * lam.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < lam.size(); ++i) {
    if (lam[i] < -tol) throw NotPositiveSemidefinite(lam[i], tol);
    lam[i] = std::sqrt(std::max(lam[i], 0.0));
  }
  const Mat& Q = es.eigenvectors();
  Mat R = Q * lam.asDiagonal() * Q.transpose();
  return 0.5 * (R + R.transpose());
}

// ---------------------------------------------------------------------------
// Coefficient fields on tensor grids

enum class Interpolation { nearest, multilinear };
enum class Extrapolation { clamp, error };

struct TensorGrid {
  std::vector<double> lower, upper;
  std::vector<int> points;

  int dim() const { return static_cast<int>(points.size()); }

  void validate() const {
    require(!points.empty() && lower.size() == points.size() && upper.size() == points.size(),
            "grid: lower/upper/points must have the slow dimension");
    for (std::size_t k = 0; k < points.size(); ++k) {
      require(points[k] >= 1, "grid: need at least one point per axis");
      require(points[k] == 1 ? lower[k] == upper[k] : upper[k] > lower[k], "grid: upper must exceed lower");
    }
  }

  std::size_t size() const {
    std::size_t n = 1;
    for (int p : points) n *= static_cast<std::size_t>(p);
    return n;
  }

  double axis(int k, int i) const {
    const auto kk = static_cast<std::size_t>(k);
    return points[kk] == 1 ? lower[kk] : lower[kk] + (upper[kk] - lower[kk]) * i / (points[kk] - 1);
  }

  /// Flat index with the first axis varying fastest.
  std::size_t flat(const std::vector<int>& idx) const {
    std::size_t f = 0, stride = 1;
    for (std::size_t k = 0; k < points.size(); ++k) {
      f += static_cast<std::size_t>(idx[k]) * stride;
      stride *= static_cast<std::size_t>(points[k]);
    }
    return f;
  }

  std::vector<int> unflat(std::size_t f) const {
    std::vector<int> idx(points.size());
    for (std::size_t k = 0; k < points.size(); ++k) {
      idx[k] = static_cast<int>(f % static_cast<std::size_t>(points[k]));
      f /= static_cast<std::size_t>(points[k]);
    }
    return idx;
  }

  SmallVec point(std::size_t f) const {
    const auto idx = unflat(f);
    SmallVec x(dim());
    for (int k = 0; k < dim(); ++k) x[k] = axis(k, idx[static_cast<std::size_t>(k)]);
    return x;
  }
};

struct CoeffField {
  TensorGrid grid;
  Mat drift;                         ///< d x P
  std::vector<Mat> diffusion_sq;     ///< P matrices d x d
  std::vector<Mat> diffusion;        ///< P matrices d x d
  Mat drift_std_error;               ///< d x P (empty if not estimated)
  std::vector<Mat> diffusion_sq_std_error;
  Interpolation interpolation = Interpolation::multilinear;
  Extrapolation extrapolation = Extrapolation::error;
  double tol_psd_rel = 1e-6;
  std::map<std::string, std::string> provenance;

  int dim() const { return grid.dim(); }

  /// Interpolation weights over grid nodes for x.
  void stencil(const SmallVec& x, std::vector<std::pair<std::size_t, double>>& out) const {
    out.clear();
    const int d = dim();
    std::vector<int> base(static_cast<std::size_t>(d));
    std::vector<double> frac(static_cast<std::size_t>(d));
    for (int k = 0; k < d; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      const double lo = grid.lower[kk], hi = grid.upper[kk];
      double xk = x[k];
      if (xk < lo - 1e-12 * std::max(1.0, std::abs(lo)) || xk > hi + 1e-12 * std::max(1.0, std::abs(hi))) {
        if (extrapolation == Extrapolation::error)
          throw OutOfGrid("coefficient field: x leaves the grid on axis " + std::to_string(k) + " (x=" +
                          std::to_string(xk) + ")");
      }
      xk = std::clamp(xk, lo, hi);
      if (grid.points[kk] == 1) {
        base[kk] = 0;
        frac[kk] = 0.0;
        continue;
      }
      const double pos = (xk - lo) / (hi - lo) * (grid.points[kk] - 1);
      int i = std::min(static_cast<int>(std::floor(pos)), grid.points[kk] - 2);
      double f = pos - i;
      if (interpolation == Interpolation::nearest) {
        if (f >= 0.5) ++i;
        f = 0.0;
      }
      base[kk] = i;
      frac[kk] = f;
    }
    const std::size_t corners = interpolation == Interpolation::nearest ? 1 : (std::size_t{1} << d);
    std::vector<int> idx(static_cast<std::size_t>(d));
    for (std::size_t c = 0; c < corners; ++c) {
      double wgt = 1.0;
      for (int k = 0; k < d; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        const bool up = (c >> k) & 1U;
        idx[kk] = base[kk] + (up ? 1 : 0);
        wgt *= up ? frac[kk] : 1.0 - frac[kk];
      }
      if (wgt != 0.0) out.push_back({grid.flat(idx), wgt});
    }
  }

  void drift_at(const SmallVec& x, SmallVec& out, std::vector<std::pair<std::size_t, double>>& st) const {
    stencil(x, st);
    out.setZero(dim());
    for (const auto& [i, wgt] : st) out += wgt * drift.col(static_cast<Eigen::Index>(i));
  }

  void diffusion_at(const SmallVec& x, SmallMat& out, std::vector<std::pair<std::size_t, double>>& st) const {
    stencil(x, st);
    out.setZero(dim(), dim());
    for (const auto& [i, wgt] : st) out += wgt * diffusion[i];
  }

  SmallVec drift_at(const SmallVec& x) const {
    std::vector<std::pair<std::size_t, double>> st;
    SmallVec out;
    drift_at(x, out, st);
    return out;
  }

  SmallMat diffusion_at(const SmallVec& x) const {
    std::vector<std::pair<std::size_t, double>> st;
    SmallMat out;
    diffusion_at(x, out, st);
    return out;
  }
};

struct FieldReport {
  double max_asymmetry = 0.0;
  double min_eigenvalue = 0.0;
  double max_reconstruction_error = 0.0;
  bool pass = true;
};

/// Symmetry (1e-12), eigenvalue >= -tol_psd and sigma sigma^T reconstruction (1e-8) at every node.
inline FieldReport check_field(const CoeffField& f) {
  FieldReport r;
  r.min_eigenvalue = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < f.diffusion_sq.size(); ++p) {
    const Mat& S = f.diffusion_sq[p];
    r.max_asymmetry = std::max(r.max_asymmetry, (S - S.transpose()).cwiseAbs().maxCoeff());
    Eigen::SelfAdjointEigenSolver<Mat> es(S);
    const Vec lam = es.eigenvalues();
    const double tol = f.tol_psd_rel * lam.cwiseAbs().maxCoeff();
    r.min_eigenvalue = std::min(r.min_eigenvalue, lam.minCoeff());
    const Mat& s = f.diffusion[p];
    // Clipped reconstruction: compare with S after zeroing the tolerated negative eigenvalues.
    Vec clipped = lam.cwiseMax(0.0);
    const Mat Sc = es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose();
    r.max_reconstruction_error = std::max(r.max_reconstruction_error, (s * s.transpose() - Sc).cwiseAbs().maxCoeff());
    if (lam.minCoeff() < -tol) r.pass = false;
  }
  if (r.max_asymmetry > 1e-12 || r.max_reconstruction_error > 1e-8) r.pass = false;
  return r;
}

/// Enforces exact symmetry and fills diffusion = matrix_sqrt_psd(diffusion_sq).
inline void finalize_diffusion(CoeffField& f) {
  f.diffusion.clear();
  for (auto& S : f.diffusion_sq) {
    S = 0.5 * (S + S.transpose());
    const double lmax = Eigen::SelfAdjointEigenSolver<Mat>(S, Eigen::EigenvaluesOnly).eigenvalues().cwiseAbs().maxCoeff();
    f.diffusion.push_back(matrix_sqrt_psd(S, f.tol_psd_rel * lmax));
  }
}

// ---------------------------------------------------------------------------
// Drift and diffusion fields

struct EstimatorSettings {
  Method method = Method::window;
  double n = 200.0;      ///< window
  double t_max = 50.0;   ///< correlation
  int n_max = 20;        ///< suspension
  flow::SectionSpec section{};
  EnsemblePlan plan{};
  std::uint32_t calibration_members = 20;   ///< orbits for mu-averages (time averages)
  double calibration_length = 5000.0;
};

inline BMatrix estimate_matrix(const FlowSpec& spec, const std::vector<Observable>& vs,
                               const std::vector<Observable>& ws, const EstimatorSettings& es) {
  switch (es.method) {
    case Method::window: return window_matrix(spec, vs, ws, es.n, es.plan);
    case Method::correlation: return correlation_matrix(spec, vs, ws, es.t_max, es.plan);
    case Method::suspension: return suspension_matrix(spec, es.section, vs, ws, es.n_max, es.plan);
  }
  throw InvalidArgument("unknown estimator method");
}

/// mu-averages by Birkhoff time averages on their own seed stream.
inline observables::TimeAverage calibrate(const FlowSpec& spec, const Observable& obs, const EstimatorSettings& es) {
  flow::InvariantSampling how = es.plan.sampling;
  how.dt = es.plan.dt;
  return observables::time_average(spec, obs, es.plan.seed ^ 0x9e3779b97f4a7c15ULL, es.calibration_members,
                                   es.calibration_length, how);
}

namespace detail {

inline CoeffField empty_field(const slow::SlowSystem& sys, const TensorGrid& grid) {
  grid.validate();
  require(grid.dim() == sys.dimension(), "grid dimension must equal the slow dimension");
  CoeffField f;
  f.grid = grid;
  const auto P = static_cast<Eigen::Index>(grid.size());
  f.drift = Mat::Zero(sys.dimension(), P);
  f.drift_std_error = Mat::Zero(sys.dimension(), P);
  f.diffusion_sq.assign(grid.size(), Mat::Zero(sys.dimension(), sys.dimension()));
  f.diffusion_sq_std_error.assign(grid.size(), Mat::Zero(sys.dimension(), sys.dimension()));
  return f;
}

/// Batch-mean standard error of a linear functional of member B matrices.
template <class Fn>
double functional_se(const BMatrix& B, Fn&& f) {
  std::vector<double> xs;
  xs.reserve(B.member_values.size());
  for (const auto& m : B.member_values) xs.push_back(f(m));
  return batch_means(xs).std_error;
}

/// Observables y -> b^k(x, y) (arity d) and y -> d_k b^i(x, y) (arity d*d,
/// index i*d + k) at a fixed slow point, centered on the calibration sample.
inline std::pair<Observable, Observable> frozen_noise(const FlowSpec& spec, const slow::SlowSystem& sys,
                                                      const SmallVec& x, const EstimatorSettings& es) {
  const int d = sys.dimension();
  Observable b("b@x", d, [&sys, x](const Point& y, SmallVec& out) { out = sys.b(x, y); });
  Observable db("db@x", d * d, [&sys, x, d](const Point& y, SmallVec& out) {
    const SmallMat J = sys.db(x, y);
    for (int i = 0; i < d; ++i)
      for (int k = 0; k < d; ++k) out[i * d + k] = J(i, k);
  });
  return {b.as_centered(calibrate(spec, b, es).mean), db.as_centered(calibrate(spec, db, es).mean)};
}

}  // namespace detail

/// Everything needed to fill a field: B among the noise observables (product
/// form) and mu-averages of the drift observables.
struct ProductStatistics {
  BMatrix B;   ///< eV x eV, B(v^alpha, v^beta)
  Vec u_mean;  ///< mu-average of each drift observable
};

inline ProductStatistics product_statistics(const FlowSpec& spec, const slow::SlowSystem& sys,
                                            const EstimatorSettings& es) {
  require(sys.form() == slow::SlowSystem::Form::product, "product_statistics needs a product-form system");
  ProductStatistics ps;
  if (!sys.v().empty()) ps.B = estimate_matrix(spec, sys.v(), {}, es);
  // Constant drift observables need no sampling.
  bool all_const = true;
  for (const auto& o : sys.u()) all_const = all_const && o.is_constant();
  if (sys.u().empty()) {
    ps.u_mean = Vec::Zero(0);
  } else if (all_const) {
    ps.u_mean = Vec(static_cast<Eigen::Index>(sys.u().size()));
    for (std::size_t i = 0; i < sys.u().size(); ++i) ps.u_mean[static_cast<Eigen::Index>(i)] = sys.u()[i].scalar(Point::Zero(spec.dimension()));
  } else {
    ps.u_mean = Vec(calibrate(spec, observables::stack(sys.u()), es).mean);
  }
  return ps;
}

/// Drift a~(x) = g(x) u_bar + sum_k h^k(x) . dh^i/dx_k B  on the grid (product form),
/// or per-node estimates for general systems.
inline void drift_field(const FlowSpec& spec, const slow::SlowSystem& sys, const EstimatorSettings& es,
                        CoeffField& f, const ProductStatistics* stats = nullptr) {
  const int d = sys.dimension();
  if (sys.form() == slow::SlowSystem::Form::product) {
    ProductStatistics local;
    if (!stats) {
      local = product_statistics(spec, sys, es);
      stats = &local;
    }
    for (std::size_t p = 0; p < f.grid.size(); ++p) {
      const SmallVec x = f.grid.point(p);
      Vec drift = sys.u().empty() ? Vec::Zero(d) : Vec(sys.g(x) * stats->u_mean);
      if (!sys.v().empty()) {
        const Mat h = sys.h(x);
        const auto dh = sys.dh(x);
        // correction^i = sum_k sum_{ab} h^{k a} (d_k h)^{i b} B^{ab}
        auto corr = [&](const Mat& B) {
          Vec c = Vec::Zero(d);
          for (int k = 0; k < d; ++k) c += dh[static_cast<std::size_t>(k)] * (B.transpose() * h.row(k).transpose());
          return c;
        };
        drift += corr(stats->B.value);
        for (int i = 0; i < d; ++i)
          f.drift_std_error(i, static_cast<Eigen::Index>(p)) =
              detail::functional_se(stats->B, [&](const Mat& B) { return corr(B)[i]; });
      }
      f.drift.col(static_cast<Eigen::Index>(p)) = drift;
    }
    return;
  }
  for (std::size_t p = 0; p < f.grid.size(); ++p) {
    const SmallVec x = f.grid.point(p);
    const Observable a_at("a@x", d, [&sys, x](const Point& y, SmallVec& out) { out = sys.a(x, y); });
    const Vec abar = calibrate(spec, a_at, es).mean;
    const auto [b, db] = detail::frozen_noise(spec, sys, x, es);
    const BMatrix B = estimate_matrix(spec, {b}, {db}, es);
    auto corr = [&](const Mat& M) {
      Vec c = Vec::Zero(d);
      for (int i = 0; i < d; ++i)
        for (int k = 0; k < d; ++k) c[i] += M(k, i * d + k);
      return c;
    };
    f.drift.col(static_cast<Eigen::Index>(p)) = abar + corr(B.value);
    for (int i = 0; i < d; ++i)
      f.drift_std_error(i, static_cast<Eigen::Index>(p)) =
          detail::functional_se(B, [&](const Mat& M) { return corr(M)[i]; });
  }
}

/// diffusion_sq(x) = h(x) (B + B^T) h(x)^T (product form) or per-node estimates.
inline void diffusion_field(const FlowSpec& spec, const slow::SlowSystem& sys, const EstimatorSettings& es,
                            CoeffField& f, const ProductStatistics* stats = nullptr) {
  const int d = sys.dimension();
  if (sys.form() == slow::SlowSystem::Form::product) {
    if (sys.v().empty()) {
      for (auto& S : f.diffusion_sq) S.setZero(d, d);
      finalize_diffusion(f);
      return;
    }
    ProductStatistics local;
    if (!stats) {
      local = product_statistics(spec, sys, es);
      stats = &local;
    }
    for (std::size_t p = 0; p < f.grid.size(); ++p) {
      const Mat h = sys.h(f.grid.point(p));
      auto sq = [&](const Mat& B) { return Mat(h * (B + B.transpose()) * h.transpose()); };
      f.diffusion_sq[p] = sq(stats->B.value);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          f.diffusion_sq_std_error[p](i, j) = detail::functional_se(stats->B, [&](const Mat& B) { return sq(B)(i, j); });
    }
    finalize_diffusion(f);
    return;
  }
  for (std::size_t p = 0; p < f.grid.size(); ++p) {
    const auto bx = detail::frozen_noise(spec, sys, f.grid.point(p), es).first;
    const BMatrix B = estimate_matrix(spec, {bx}, {}, es);
    auto sq = [](const Mat& M) { return Mat(M + M.transpose()); };
    f.diffusion_sq[p] = sq(B.value);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        f.diffusion_sq_std_error[p](i, j) = detail::functional_se(B, [&](const Mat& M) { return sq(M)(i, j); });
  }
  finalize_diffusion(f);
}

/// Drift and diffusion on the grid, sharing one B estimate in the product case.
inline CoeffField estimate_coefficients(const FlowSpec& spec, const slow::SlowSystem& sys, const TensorGrid& grid,
                                        const EstimatorSettings& es, Interpolation interp = Interpolation::multilinear,
                                        Extrapolation extrap = Extrapolation::error,
                                        ProductStatistics* stats_out = nullptr) {
  CoeffField f = detail::empty_field(sys, grid);
  f.interpolation = interp;
  f.extrapolation = extrap;
  f.provenance["estimator"] = to_string(es.method);
  f.provenance["seed"] = std::to_string(es.plan.seed);
  f.provenance["members"] = std::to_string(es.plan.members);
  f.provenance["n"] = std::to_string(es.n);
  if (sys.form() == slow::SlowSystem::Form::product) {
    const auto stats = product_statistics(spec, sys, es);
    drift_field(spec, sys, es, f, &stats);
    diffusion_field(spec, sys, es, f, &stats);
    if (stats_out) *stats_out = stats;
  } else {
    drift_field(spec, sys, es, f);
    diffusion_field(spec, sys, es, f);
  }
  return f;
}

inline CoeffField make_field(const slow::SlowSystem& sys, const TensorGrid& grid) {
  return detail::empty_field(sys, grid);
}

}  // namespace fastslow::homog
