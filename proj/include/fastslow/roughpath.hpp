#pragma once

// Finite-dimensional rough paths: Hölder paths on a grid, second-order lifts,
// Chen consistency, Young and compensated Riemann sums, and a Davie-type RDE
// step for dX = F(X) dV + H(X) dW.

#include "fastslow/core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace fastslow::rough {

/// Values stored column-wise: values.col(k) is the path at grid[k].
struct HolderPath {
  std::vector<double> grid;
  Mat values;
  double exponent_hint = 0.5;

  int dim() const { return static_cast<int>(values.rows()); }
  std::size_t size() const { return grid.size(); }
  Vec at(std::size_t k) const { return values.col(static_cast<Eigen::Index>(k)); }
  Vec increment(std::size_t s, std::size_t t) const { return at(t) - at(s); }
};

inline void validate(const HolderPath& p) {
  require(!p.grid.empty(), "path grid is empty");
  require(p.values.cols() == static_cast<Eigen::Index>(p.grid.size()), "path grid/value length mismatch");
  for (std::size_t i = 1; i < p.grid.size(); ++i) require(p.grid[i] > p.grid[i - 1], "path grid must increase");
  require(p.values.allFinite(), "path values must be finite");
}

inline HolderPath make_path(std::vector<double> grid, Mat values, double hint = 0.5) {
  HolderPath p{std::move(grid), std::move(values), hint};
  validate(p);
  return p;
}

/// Samples f on the grid and shifts so the path starts at 0.
template <class Fn>
HolderPath sample_path(const std::vector<double>& grid, int dim, Fn&& f, double hint = 1.0) {
  Mat vals(dim, static_cast<Eigen::Index>(grid.size()));
  for (std::size_t k = 0; k < grid.size(); ++k) vals.col(static_cast<Eigen::Index>(k)) = f(grid[k]);
  vals.colwise() -= Vec(vals.col(0));
  return make_path(grid, std::move(vals), hint);
}

inline bool same_grid(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::abs(a[i] - b[i]) > 1e-12 * std::max(1.0, std::abs(a[i]))) return false;
  return true;
}

inline void require_same_grid(const std::vector<double>& a, const std::vector<double>& b,
                              const char* what) {
  if (!same_grid(a, b)) throw GridMismatch(what);
}

/// sup over grid pairs s < t of |V(s,t)| / |t-s|^gamma.
inline double holder_seminorm(const HolderPath& p, double gamma) {
  require(gamma > 0.0 && gamma <= 1.0, "holder_seminorm: gamma must lie in (0,1]");
  if (p.size() < 2) throw InvalidArgument("holder_seminorm: need at least 2 grid points");
  double sup = 0.0;
  const auto n = static_cast<Eigen::Index>(p.size());
  for (Eigen::Index s = 0; s < n; ++s)
    for (Eigen::Index t = s + 1; t < n; ++t) {
      const double d = (p.values.col(t) - p.values.col(s)).norm();
      sup = std::max(sup, d / std::pow(p.grid[t] - p.grid[s], gamma));
    }
  return sup;
}

// ---------------------------------------------------------------------------
// Drivers

/// A second-order path (W, WW) on a shared grid. WW[k] is the iterated
/// integral int_0^{t_k} W (x) dW. WW_step, when present, holds the increments
/// over each grid interval computed independently of WW; chen_defect compares
/// the two.
struct RoughDriver {
  HolderPath W;
  std::vector<Mat> WW;
  std::vector<Mat> WW_step;
  double gamma = 0.5;

  std::size_t size() const { return W.size(); }
  int dim() const { return W.dim(); }

  /// WW(s,t) = WW(t) - WW(s) - W(s) (x) W(s,t), from the stored path.
  Mat increment2(std::size_t s, std::size_t t) const {
    const Vec ws = W.at(s);
    return WW[t] - WW[s] - ws * (W.at(t) - ws).transpose();
  }

  /// Per-interval increment, preferring the independently stored value.
  Mat step2(std::size_t k) const { return WW_step.empty() ? increment2(k, k + 1) : WW_step[k]; }
};

inline void validate(const RoughDriver& d) {
  validate(d.W);
  require(d.WW.size() == d.W.size(), "driver: WW length must match the grid");
  require(d.WW_step.empty() || d.WW_step.size() + 1 == d.W.size(), "driver: WW_step length must be grid-1");
  for (const auto& m : d.WW) require(m.rows() == d.dim() && m.cols() == d.dim() && m.allFinite(), "driver: bad WW entry");
  require(d.gamma > 1.0 / 3.0 && d.gamma <= 0.5, "driver: gamma must lie in (1/3, 1/2]");
}

/// Lift of the piecewise-linear interpolation: WW += W_k (x) dW + dW (x) dW / 2.
/// This is the trapezoid rule for int W (x) dW and is exact for linear paths.
inline RoughDriver lift_smooth(const HolderPath& path, double gamma = 0.5) {
  validate(path);
  const int e = path.dim();
  RoughDriver d;
  d.W = path;
  d.gamma = gamma;
  d.WW.reserve(path.size());
  d.WW_step.reserve(path.size());
  Mat acc = Mat::Zero(e, e);
  d.WW.push_back(acc);
  for (std::size_t k = 0; k + 1 < path.size(); ++k) {
    const Vec w = path.at(k);
    const Vec dw = path.at(k + 1) - w;
    const Mat step = 0.5 * dw * dw.transpose();
    acc += w * dw.transpose() + step;
    d.WW.push_back(acc);
    d.WW_step.push_back(step);
  }
  return d;
}

/// max over checked triples s<t<u of |WW(s,u) - WW(s,t) - WW(t,u) - W(s,t) (x) W(t,u)|.
/// Increments over a single interval come from WW_step when present, longer
/// ones from the WW path. Checked: every consecutive triple (k, k+1, k+2) and,
/// for up to 64 evenly spaced s, every triple (s, s+1, u).
inline double chen_defect(const RoughDriver& d) {
  const std::size_t n = d.size();
  if (n < 3) return 0.0;
  auto incr = [&](std::size_t s, std::size_t t) { return t == s + 1 ? d.step2(s) : d.increment2(s, t); };
  auto defect = [&](std::size_t s, std::size_t t, std::size_t u) {
    const Mat r = incr(s, u) - incr(s, t) - incr(t, u) - d.W.increment(s, t) * d.W.increment(t, u).transpose();
    return r.cwiseAbs().maxCoeff();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k + 2 < n; ++k) worst = std::max(worst, defect(k, k + 1, k + 2));
  const std::size_t picks = std::min<std::size_t>(64, n - 2);
  for (std::size_t i = 0; i < picks; ++i) {
    const std::size_t s = i * (n - 2) / picks;
    for (std::size_t u = s + 3; u < n; ++u) worst = std::max(worst, defect(s, s + 1, u));
  }
  return worst;
}

/// rho_gamma: Hölder distance of the first levels plus the 2*gamma Hölder
/// distance of the second-level increments, over all grid pairs.
inline double rough_metric(const RoughDriver& a, const RoughDriver& b, double gamma) {
  require_same_grid(a.W.grid, b.W.grid, "rough_metric: drivers must share a grid");
  require(a.dim() == b.dim(), "rough_metric: dimension mismatch");
  double s1 = 0.0, s2 = 0.0;
  const std::size_t n = a.size();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t t = s + 1; t < n; ++t) {
      const double h = a.W.grid[t] - a.W.grid[s];
      s1 = std::max(s1, (a.W.increment(s, t) - b.W.increment(s, t)).norm() / std::pow(h, gamma));
      s2 = std::max(s2, (a.increment2(s, t) - b.increment2(s, t)).norm() / std::pow(h, 2.0 * gamma));
    }
  return s1 + s2;
}

// ---------------------------------------------------------------------------
// Integration

/// Left-point Riemann sums sum_n G_n V(t_n, t_{n+1}); integrand[k] is an
/// r x e matrix aligned with V's grid. Result is an r-dimensional path.
inline HolderPath young_integral(const std::vector<Mat>& integrand, const HolderPath& V, double beta,
                                 double gamma) {
  if (!(beta + gamma > 1.0))
    throw ExponentCondition("young_integral: need beta + gamma > 1 (got " + std::to_string(beta + gamma) + ")");
  validate(V);
  require(integrand.size() == V.size(), "young_integral: integrand must be aligned with V");
  const Eigen::Index r = integrand.front().rows();
  Mat out = Mat::Zero(r, static_cast<Eigen::Index>(V.size()));
  for (std::size_t k = 0; k + 1 < V.size(); ++k) {
    const auto c = static_cast<Eigen::Index>(k);
    out.col(c + 1) = out.col(c) + integrand[k] * V.increment(k, k + 1);
  }
  return make_path(V.grid, std::move(out), std::min(beta, gamma));
}

using MatField = std::function<Mat(const Vec&)>;
/// Jacobian of a matrix field: element k is the partial derivative in x_k.
using MatFieldJacobian = std::function<std::vector<Mat>(const Vec&)>;

/// Compensated Riemann sum for int H(X) dW:
///   sum_n H(X_n) W(n,n+1) + sum_{k,l,j} dH_k^{ij}(X_n) X'^{kl}_n WW^{lj}(n,n+1).
inline HolderPath rough_integral(const MatField& H, const MatFieldJacobian& dH, const HolderPath& X,
                                 const std::vector<Mat>& Xprime, const RoughDriver& driver) {
  require_same_grid(X.grid, driver.W.grid, "rough_integral: X and driver grids differ");
  if (Xprime.size() != X.size()) throw GridMismatch("rough_integral: X' not aligned with X");
  const int d = X.dim();
  Mat out;
  for (std::size_t n = 0; n + 1 < X.size(); ++n) {
    const Vec x = X.at(n);
    const Mat h = H(x);
    if (n == 0) out = Mat::Zero(h.rows(), static_cast<Eigen::Index>(X.size()));
    Vec inc = h * driver.W.increment(n, n + 1);
    const Mat ww = driver.step2(n);
    const auto dh = dH(x);
    for (int k = 0; k < d; ++k) {
      // sum_{l,j} dH_k^{ij} X'^{kl} WW^{lj} = (dH_k * (X'_k row . WW)^T)
      const Vec coeff = (Xprime[n].row(k) * ww).transpose();
      inc += dh[static_cast<std::size_t>(k)] * coeff;
    }
    const auto c = static_cast<Eigen::Index>(n);
    out.col(c + 1) = out.col(c) + inc;
  }
  if (out.size() == 0) out = Mat::Zero(H(X.at(0)).rows(), 1);
  return make_path(X.grid, std::move(out), driver.gamma);
}

/// Fields of dX = F(X) dV + H(X) dW with F: R^d -> R^{d x eV}, H: R^d -> R^{d x eW}.
/// dF may be left empty, in which case it is approximated by central differences.
struct VectorFieldPair {
  int d = 1;
  MatField F;
  MatField H;
  MatFieldJacobian dH;
  MatFieldJacobian dF;
};

namespace detail {

inline std::vector<Mat> central_jacobian(const MatField& f, const Vec& x) {
  std::vector<Mat> out;
  out.reserve(static_cast<std::size_t>(x.size()));
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double h = 1e-6 * (1.0 + std::abs(x[k]));
    Vec xp = x, xm = x;
    xp[k] += h;
    xm[k] -= h;
    out.push_back((f(xp) - f(xm)) / (2.0 * h));
  }
  return out;
}

}  // namespace detail

/// Max relative mismatch between dH and central differences of H at `points`.
inline double jacobian_mismatch(const MatField& H, const MatFieldJacobian& dH, const std::vector<Vec>& points) {
  double worst = 0.0;
  for (const auto& x : points) {
    const auto fd = detail::central_jacobian(H, x);
    const auto an = dH(x);
    require(an.size() == fd.size(), "jacobian_mismatch: dH has wrong length");
    for (std::size_t k = 0; k < fd.size(); ++k)
      worst = std::max(worst, (fd[k] - an[k]).cwiseAbs().maxCoeff() / (1.0 + an[k].cwiseAbs().maxCoeff()));
  }
  return worst;
}

/// Checks H against dH by finite differences on the given test points.
inline void validate(const VectorFieldPair& f, const std::vector<Vec>& test_points) {
  require(static_cast<bool>(f.F) && static_cast<bool>(f.H) && static_cast<bool>(f.dH),
          "vector fields: F, H and dH are required");
  if (jacobian_mismatch(f.H, f.dH, test_points) > 1e-6)
    throw InvalidArgument("vector fields: dH is not the derivative of H");
  if (f.dF && jacobian_mismatch(f.F, f.dF, test_points) > 1e-6)
    throw InvalidArgument("vector fields: dF is not the derivative of F");
}

struct RdeOptions {
  double blowup_bound = 1e8;
};

/// Davie-type step on the joint driver Z = (V, W):
///   X+ = X + G(X) Z(n,n+1) + sum_k dG_k(X) (G(X)^T row k . ZZ(n,n+1)),  G = [F | H].
/// The WW block of ZZ comes from the driver; the blocks involving the smooth
/// path V use the trapezoid lift (V(x)V, V(x)W and W(x)V halves of outer products).
inline HolderPath solve_rde(const VectorFieldPair& f, const HolderPath& V, const RoughDriver& driver,
                            const Vec& xi, const RdeOptions& opt = {}) {
  require_same_grid(V.grid, driver.W.grid, "solve_rde: V and driver grids differ");
  require(xi.size() == f.d, "solve_rde: initial condition has wrong dimension");
  const int eV = V.dim(), eW = driver.dim(), e = eV + eW, d = f.d;
  Mat out(d, static_cast<Eigen::Index>(V.size()));
  out.col(0) = xi;
  Vec x = xi;
  Mat G(d, e), ZZ(e, e);
  std::vector<Mat> dG(static_cast<std::size_t>(d), Mat(d, e));
  for (std::size_t n = 0; n + 1 < V.size(); ++n) {
    const Mat Fx = f.F(x), Hx = f.H(x);
    require(Fx.rows() == d && Fx.cols() == eV && Hx.rows() == d && Hx.cols() == eW, "solve_rde: field shape mismatch");
    G << Fx, Hx;
    const auto dF = f.dF ? f.dF(x) : detail::central_jacobian(f.F, x);
    const auto dH = f.dH(x);
    for (int k = 0; k < d; ++k) dG[static_cast<std::size_t>(k)] << dF[static_cast<std::size_t>(k)], dH[static_cast<std::size_t>(k)];
    const Vec dV = V.increment(n, n + 1), dW = driver.W.increment(n, n + 1);
    Vec dZ(e);
    dZ << dV, dW;
    ZZ = 0.5 * dZ * dZ.transpose();
    ZZ.bottomRightCorner(eW, eW) = driver.step2(n);
    Vec next = x + G * dZ;
    for (int k = 0; k < d; ++k)
      next += dG[static_cast<std::size_t>(k)] * (G.row(k) * ZZ).transpose();
    x = next;
    if (!x.allFinite() || x.norm() > opt.blowup_bound) throw IntegrationDiverged(V.grid[n + 1]);
    out.col(static_cast<Eigen::Index>(n + 1)) = x;
  }
  HolderPath p{V.grid, std::move(out), driver.gamma};
  return p;
}

}  // namespace fastslow::rough
