#pragma once

// Verification statistics: two-sample distances, the covariance identity for
// W_v(1), moment-scaling fits and discrete Hölder functionals of drivers.

#include "fastslow/homog.hpp"
#include "fastslow/roughpath.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace fastslow::stats {

using flow::FlowSpec;
using observables::Observable;

enum class Statistic { ks, energy, moment };

inline const char* to_string(Statistic s) {
  switch (s) {
    case Statistic::ks: return "ks";
    case Statistic::energy: return "energy";
    case Statistic::moment: return "moment";
  }
  return "?";
}

struct TwoSampleReport {
  Statistic statistic = Statistic::ks;
  int order = 0;  ///< moment order for Statistic::moment
  double value = 0.0;
  double threshold = 0.0;
  bool pass = true;
  std::size_t n1 = 0, n2 = 0;
};

inline TwoSampleReport make_report(Statistic s, double value, double threshold, std::size_t n1, std::size_t n2,
                                   int order = 0) {
  return {s, order, value, threshold, value <= threshold, n1, n2};
}

/// sup_x |F1(x) - F2(x)| over the empirical CDFs.
inline TwoSampleReport ks_distance(std::vector<double> s1, std::vector<double> s2, double threshold = 0.05) {
  if (s1.empty() || s2.empty()) throw InvalidArgument("ks_distance: empty sample");
  std::sort(s1.begin(), s1.end());
  std::sort(s2.begin(), s2.end());
  const double n1 = static_cast<double>(s1.size()), n2 = static_cast<double>(s2.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < s1.size() && j < s2.size()) {
    const double x = std::min(s1[i], s2[j]);
    while (i < s1.size() && s1[i] == x) ++i;
    while (j < s2.size() && s2[j] == x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / n1 - static_cast<double>(j) / n2));
  }
  return make_report(Statistic::ks, d, threshold, s1.size(), s2.size());
}

namespace detail {

/// sum_{i<j} |x_i - x_j| for sorted x.
inline double pair_sum(const std::vector<double>& x) {
  double s = 0.0;
  const auto n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) s += (2.0 * static_cast<double>(i) - n + 1.0) * x[i];
  return s;
}

}  // namespace detail

/// Energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| (V-statistic form, >= 0).
inline TwoSampleReport energy_distance(std::vector<double> s1, std::vector<double> s2, double threshold) {
  if (s1.empty() || s2.empty()) throw InvalidArgument("energy_distance: empty sample");
  std::vector<double> all(s1);
  all.insert(all.end(), s2.begin(), s2.end());
  std::sort(s1.begin(), s1.end());
  std::sort(s2.begin(), s2.end());
  std::sort(all.begin(), all.end());
  const double n1 = static_cast<double>(s1.size()), n2 = static_cast<double>(s2.size());
  const double p1 = detail::pair_sum(s1), p2 = detail::pair_sum(s2);
  const double cross = detail::pair_sum(all) - p1 - p2;
  const double e = 2.0 * cross / (n1 * n2) - 2.0 * p1 / (n1 * n1) - 2.0 * p2 / (n2 * n2);
  return make_report(Statistic::energy, std::max(0.0, e), threshold, s1.size(), s2.size());
}

/// |m_k(s1) - m_k(s2)| in units of the combined standard error of the raw moments.
inline TwoSampleReport moment_report(const std::vector<double>& s1, const std::vector<double>& s2, int k,
                                     double threshold = 3.0) {
  if (s1.size() < 2 || s2.size() < 2) throw InvalidArgument("moment_report: need at least two samples each");
  require(k >= 1, "moment_report: order must be positive");
  auto powered = [k](const std::vector<double>& s) {
    std::vector<double> out;
    out.reserve(s.size());
    for (double x : s) out.push_back(std::pow(x, k));
    return batch_means(out);
  };
  const auto a = powered(s1), b = powered(s2);
  const double se = std::hypot(a.std_error, b.std_error);
  const double diff = std::abs(a.mean - b.mean);
  const double z = se > 0.0 ? diff / se : (diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
  return make_report(Statistic::moment, z, threshold, s1.size(), s2.size(), k);
}

/// Type-7 (linear interpolation) sample quantile.
inline double quantile(std::vector<double> xs, double q) {
  require(!xs.empty(), "quantile: empty sample");
  require(q >= 0.0 && q <= 1.0, "quantile: q must lie in [0,1]");
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= xs.size()) return xs.back();
  return xs[i] + (pos - static_cast<double>(i)) * (xs[i + 1] - xs[i]);
}

// ---------------------------------------------------------------------------
// Covariance identity

struct CovarianceReport {
  Mat empirical;     ///< mean of W(1) W(1)^T
  Mat empirical_se;
  Mat target;        ///< B + B^T
  Mat target_se;
  Mat z;
  double max_abs_z = 0.0;
  double threshold = 3.0;
  bool pass = true;
  std::size_t samples = 0;
};

/// Compares E W^i(1) W^j(1) with B(v^i,v^j) + B(v^j,v^i), entrywise z-scores.
inline CovarianceReport covariance_check(const std::vector<Vec>& W1, const homog::BMatrix& B, double threshold = 3.0) {
  const Eigen::Index m = B.value.rows();
  if (B.value.cols() != m) throw InvalidArgument("covariance_check: B must be square");
  for (const auto& w : W1)
    if (w.size() != m) throw InvalidArgument("covariance_check: dimension mismatch between samples and B");
  CovarianceReport r;
  r.samples = W1.size();
  r.threshold = threshold;
  r.empirical = Mat::Zero(m, m);
  r.empirical_se = Mat::Zero(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = i; j < m; ++j) {
      std::vector<double> prod;
      prod.reserve(W1.size());
      for (const auto& w : W1) prod.push_back(w[i] * w[j]);
      const auto bm = batch_means(prod);
      r.empirical(i, j) = r.empirical(j, i) = bm.mean;
      r.empirical_se(i, j) = r.empirical_se(j, i) = bm.std_error;
    }
  r.target = B.value + B.value.transpose();
  r.target_se = Mat::Zero(m, m);
  if (B.std_error.size() == B.value.size()) {
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < m; ++j)
        r.target_se(i, j) = i == j ? 2.0 * B.std_error(i, i) : std::hypot(B.std_error(i, j), B.std_error(j, i));
  }
  r.z = Mat::Zero(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      const double diff = r.empirical(i, j) - r.target(i, j);
      const double se = std::hypot(r.empirical_se(i, j), r.target_se(i, j));
      r.z(i, j) = se > 0.0 ? diff / se : (diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
      r.max_abs_z = std::max(r.max_abs_z, std::abs(r.z(i, j)));
    }
  r.pass = r.max_abs_z <= threshold;
  return r;
}

// ---------------------------------------------------------------------------
// Moment scaling

struct ScalingReport {
  double exponent_fit = 0.0;
  double std_error = 0.0;
  double target = 0.0;
  double band = 0.0;
  bool pass = true;
  std::vector<double> times;
  std::vector<double> norms;
};

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_se = 0.0;
};

/// Least squares y = intercept + slope * x with the residual-based slope SE.
inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, "fit_line: need >= 2 matching points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx <= 0.0) throw InvalidArgument("fit_line: degenerate abscissae");
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  if (x.size() > 2) {
    double rss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = y[i] - f.intercept - f.slope * x[i];
      rss += r * r;
    }
    f.slope_se = std::sqrt(rss / (n - 2.0) / sxx);
  }
  return f;
}

inline ScalingReport scaling_report(const std::vector<double>& ts, const std::vector<double>& norms, double target,
                                    double band) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    lx.push_back(std::log(ts[i]));
    ly.push_back(std::log(norms[i]));
  }
  const auto f = fit_line(lx, ly);
  ScalingReport r;
  r.exponent_fit = f.slope;
  r.std_error = f.slope_se;
  r.target = target;
  r.band = band;
  r.pass = std::abs(f.slope - target) <= band;
  r.times = ts;
  r.norms = norms;
  return r;
}

/// `count` log-spaced times from a to b.
inline std::vector<double> log_grid(double a, double b, int count) {
  require(a > 0.0 && b > a && count >= 2, "log_grid: need 0 < a < b and count >= 2");
  std::vector<double> out;
  for (int i = 0; i < count; ++i) out.push_back(a * std::pow(b / a, static_cast<double>(i) / (count - 1)));
  return out;
}

struct ScalingPlan {
  std::uint32_t members = 200;
  std::uint64_t seed = 1;
  flow::InvariantSampling sampling{};
  double dt = 0.01;
  int workers = 1;
  int high_moment = 4;  ///< 2p proxy
  int low_moment = 2;   ///< p proxy
};

/// Slopes of log ||v_t||_{2p} (target 1/2) and log ||S_t(v,w)||_p (target 1)
/// against log t, moments taken over independent orbits.
inline std::pair<ScalingReport, ScalingReport> moment_scaling(const FlowSpec& spec, const Observable& v,
                                                              const Observable& w, const std::vector<double>& ts,
                                                              const ScalingPlan& plan, double band_v = 0.1,
                                                              double band_s = 0.15) {
  require(v.arity() == 1 && w.arity() == 1, "moment_scaling needs scalar observables");
  if (ts.size() < 3) throw InvalidArgument("moment_scaling: need at least three times");
  for (std::size_t i = 1; i < ts.size(); ++i)
    if (!(ts[i] > ts[i - 1])) throw InvalidArgument("moment_scaling: times must increase");
  if (!(ts.front() > 0.0) || std::log10(ts.back() / ts.front()) < 1.5)
    throw InvalidArgument("moment_scaling: time grid must span at least 1.5 decades");
  require(plan.members >= 2, "moment_scaling: need at least two members");

  auto per_member = [&](std::size_t m) {
    const auto y0 = flow::member_state(spec, plan.seed, static_cast<std::uint32_t>(m), plan.sampling);
    flow::Stepper st(spec, y0, plan.dt);
    observables::PathAccumulator acc({v, w});
    acc.reset(st.point());
    std::vector<std::pair<double, double>> out;
    for (double t : ts) {
      st.advance_to(y0.time + t, [&](const flow::Point&, const flow::Point& nx, double h) { acc.step(nx, h); });
      out.push_back({acc.level1()[0], acc.level2()(0, 1)});
    }
    return out;
  };
  const auto rows = parallel_map(plan.members, plan.workers, per_member);
  std::vector<double> nv, ns;
  const double M = static_cast<double>(plan.members);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    double mv = 0.0, msum = 0.0;
    for (const auto& r : rows) {
      mv += std::pow(std::abs(r[k].first), plan.high_moment) / M;
      msum += std::pow(std::abs(r[k].second), plan.low_moment) / M;
    }
    nv.push_back(std::pow(mv, 1.0 / plan.high_moment));
    ns.push_back(std::pow(msum, 1.0 / plan.low_moment));
  }
  return {scaling_report(ts, nv, 0.5, band_v), scaling_report(ts, ns, 1.0, band_s)};
}

// ---------------------------------------------------------------------------
// Hölder functionals

struct HolderNorms {
  double level1 = 0.0;  ///< max |W(s,t)| / |t-s|^gamma
  double level2 = 0.0;  ///< max |WW(s,t)| / |t-s|^(2 gamma)
};

/// Discrete Hölder functionals over all grid pairs.
inline HolderNorms holder_norms(const rough::RoughDriver& d, double gamma) {
  HolderNorms h;
  const std::size_t n = d.size();
  for (std::size_t s = 0; s + 1 < n; ++s)
    for (std::size_t t = s + 1; t < n; ++t) {
      const double dt = d.W.grid[t] - d.W.grid[s];
      h.level1 = std::max(h.level1, d.W.increment(s, t).norm() / std::pow(dt, gamma));
      const Mat inc = t == s + 1 ? d.step2(s) : d.increment2(s, t);
      h.level2 = std::max(h.level2, inc.norm() / std::pow(dt, 2.0 * gamma));
    }
  return h;
}

struct HolderLevel {
  double label = 0.0;  ///< eps or resolution
  double q_level1 = 0.0;
  double q_level2 = 0.0;
  std::size_t drivers = 0;
};

struct HolderTailReport {
  double gamma = 0.0;
  double quantile = 0.95;
  double tolerance = 0.5;
  std::vector<HolderLevel> levels;
  double variation_level1 = 0.0;  ///< (max - min) / min across levels
  double variation_level2 = 0.0;
  bool non_increasing = true;     ///< later levels do not exceed the first by more than the tolerance
  bool pass = true;
};

/// Upper quantiles of the Hölder functionals per level (e.g. per eps, in
/// decreasing order). Passes when they vary by less than `tolerance` relative.
inline HolderTailReport holder_tail_check(const std::vector<std::vector<rough::RoughDriver>>& levels,
                                          const std::vector<double>& labels, double gamma, double p_proxy = 8.0,
                                          double q = 0.95, double tolerance = 0.5) {
  require(levels.size() == labels.size() && !levels.empty(), "holder_tail_check: one label per level");
  if (!(gamma > 0.0 && gamma < 0.5 - 1.0 / (2.0 * p_proxy)))
    throw InvalidArgument("holder_tail_check: gamma must lie below 1/2 - 1/(2p)");
  HolderTailReport r;
  r.gamma = gamma;
  r.quantile = q;
  r.tolerance = tolerance;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    require(!levels[i].empty(), "holder_tail_check: empty level");
    std::vector<double> a, b;
    for (const auto& d : levels[i]) {
      const auto h = holder_norms(d, gamma);
      a.push_back(h.level1);
      b.push_back(h.level2);
    }
    r.levels.push_back({labels[i], quantile(a, q), quantile(b, q), levels[i].size()});
  }
  auto variation = [&](auto get) {
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (const auto& l : r.levels) {
      lo = std::min(lo, get(l));
      hi = std::max(hi, get(l));
    }
    return lo > 0.0 ? (hi - lo) / lo : (hi == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
  };
  r.variation_level1 = variation([](const HolderLevel& l) { return l.q_level1; });
  r.variation_level2 = variation([](const HolderLevel& l) { return l.q_level2; });
  for (const auto& l : r.levels)
    if (l.q_level1 > (1.0 + tolerance) * r.levels.front().q_level1 ||
        l.q_level2 > (1.0 + tolerance) * r.levels.front().q_level2)
      r.non_increasing = false;
  r.pass = r.non_increasing && r.variation_level1 < tolerance && r.variation_level2 < tolerance;
  return r;
}

// ---------------------------------------------------------------------------
// Convergence trend

struct TrendVerdict {
  bool non_increasing = true;
  bool final_below = true;
  bool pass = true;
};

/// Values ordered by decreasing eps: each may exceed its predecessor by at
/// most `slack`, and the last must be <= final_threshold.
inline TrendVerdict trend_verdict(const std::vector<double>& values, double slack, double final_threshold) {
  require(!values.empty(), "trend_verdict: no values");
  TrendVerdict v;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[i - 1] + slack) v.non_increasing = false;
  v.final_below = values.back() <= final_threshold;
  v.pass = v.non_increasing && v.final_below;
  return v;
}

}  // namespace fastslow::stats
