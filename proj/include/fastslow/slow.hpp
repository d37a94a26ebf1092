#pragma once

// Slow vector fields a(x,y), b(x,y) for dx/dt = a + b/eps. Built either from
// terms coef * X(x) * u(y), which gives the product form a = g(x)u(y),
// b = h(x)v(y) with analytic x-derivatives, or from general callables.

#include "fastslow/observables.hpp"
#include "fastslow/roughpath.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace fastslow::slow {

using observables::Observable;
using flow::Point;

enum class XKind { monomial, sine, cosine };

/// Scalar x-dependence of a term: a monomial prod x_k^{p_k}, or sin/cos(freq*x_k + phase).
struct XForm {
  XKind kind = XKind::monomial;
  std::vector<int> powers;  ///< monomial exponents (missing trailing entries are 0)
  int index = 0;            ///< trig argument coordinate
  double freq = 1.0;
  double phase = 0.0;

  static XForm one() { return {}; }
  static XForm monomial(std::vector<int> p) { return {XKind::monomial, std::move(p), 0, 1.0, 0.0}; }
  static XForm sine(int k, double f = 1.0, double ph = 0.0) { return {XKind::sine, {}, k, f, ph}; }
  static XForm cosine(int k, double f = 1.0, double ph = 0.0) { return {XKind::cosine, {}, k, f, ph}; }

  double value(const SmallVec& x) const {
    switch (kind) {
      case XKind::monomial: {
        double v = 1.0;
        for (std::size_t k = 0; k < powers.size(); ++k) v *= std::pow(x[static_cast<Eigen::Index>(k)], powers[k]);
        return v;
      }
      case XKind::sine: return std::sin(freq * x[index] + phase);
      case XKind::cosine: return std::cos(freq * x[index] + phase);
    }
    return 0.0;
  }

  double partial(const SmallVec& x, int k) const {
    switch (kind) {
      case XKind::monomial: {
        if (static_cast<std::size_t>(k) >= powers.size() || powers[static_cast<std::size_t>(k)] == 0) return 0.0;
        double v = 1.0;
        for (std::size_t j = 0; j < powers.size(); ++j) {
          const double xj = x[static_cast<Eigen::Index>(j)];
          const int p = powers[j];
          v *= static_cast<int>(j) == k ? p * std::pow(xj, p - 1) : std::pow(xj, p);
        }
        return v;
      }
      case XKind::sine: return k == index ? freq * std::cos(freq * x[index] + phase) : 0.0;
      case XKind::cosine: return k == index ? -freq * std::sin(freq * x[index] + phase) : 0.0;
    }
    return 0.0;
  }

  void validate(int d) const {
    if (kind == XKind::monomial) {
      require(static_cast<int>(powers.size()) <= d, "x-monomial has more exponents than slow coordinates");
      for (int p : powers) require(p >= 0, "x-monomial exponents must be non-negative");
    } else {
      require(index >= 0 && index < d, "trig x-form coordinate out of range");
    }
  }
};

/// coef * x(.) * obs_k(y), contributing to slow component `component`.
struct Term {
  int component = 0;
  double coef = 1.0;
  XForm x;
  int obs = 0;  ///< index into the system's u (for a) or v (for b) observable list
};

class SlowSystem {
 public:
  enum class Form { product, general };
  using VecFn = std::function<SmallVec(const SmallVec& x, const Point& y)>;
  using JacFn = std::function<SmallMat(const SmallVec& x, const Point& y)>;

  /// Product form from terms. `u` may contain uncentered observables; `v` must be centered.
  static SlowSystem product(int d, std::vector<Observable> u, std::vector<Term> a_terms,
                            std::vector<Observable> v, std::vector<Term> b_terms) {
    require(d >= 1 && d <= kMaxSmallDim, "slow dimension out of range");
    SlowSystem s;
    s.form_ = Form::product;
    s.d_ = d;
    s.u_ = std::move(u);
    s.v_ = std::move(v);
    s.a_terms_ = std::move(a_terms);
    s.b_terms_ = std::move(b_terms);
    for (const auto& o : s.u_) require(o.arity() == 1, "slow-system observables must be scalar");
    for (const auto& o : s.v_) {
      require(o.arity() == 1, "slow-system observables must be scalar");
      if (!o.centered()) throw InvalidArgument("noise observable '" + o.name() + "' must be centered");
    }
    require(static_cast<int>(s.u_.size()) <= kMaxSmallDim && static_cast<int>(s.v_.size()) <= kMaxSmallDim,
            "too many slow-system observables");
    auto check = [d](const std::vector<Term>& ts, std::size_t nobs) {
      for (const auto& t : ts) {
        require(t.component >= 0 && t.component < d, "term component out of range");
        require(t.obs >= 0 && static_cast<std::size_t>(t.obs) < nobs, "term observable index out of range");
        t.x.validate(d);
      }
    };
    check(s.a_terms_, s.u_.size());
    check(s.b_terms_, s.v_.size());
    return s;
  }

  /// General form; db(x,y)(i,k) = d b^i / d x_k. b(x,.) must be mean-zero for each x.
  static SlowSystem general(int d, VecFn a, VecFn b, JacFn db) {
    require(d >= 1 && d <= kMaxSmallDim, "slow dimension out of range");
    require(static_cast<bool>(a) && static_cast<bool>(b), "general slow system needs a and b");
    if (!db) throw ConfigError("general slow system: missing x-derivative of b");
    SlowSystem s;
    s.form_ = Form::general;
    s.d_ = d;
    s.a_fn_ = std::move(a);
    s.b_fn_ = std::move(b);
    s.db_fn_ = std::move(db);
    return s;
  }

  Form form() const { return form_; }
  int dimension() const { return d_; }
  const std::vector<Observable>& u() const { return u_; }
  const std::vector<Observable>& v() const { return v_; }
  const std::vector<Term>& a_terms() const { return a_terms_; }
  const std::vector<Term>& b_terms() const { return b_terms_; }
  bool has_noise() const { return form_ == Form::general || !b_terms_.empty(); }

  // Product-form pieces -----------------------------------------------------

  void g_into(const SmallVec& x, SmallMat& out) const { assemble(a_terms_, u_.size(), x, out); }
  void h_into(const SmallVec& x, SmallMat& out) const { assemble(b_terms_, v_.size(), x, out); }

  SmallMat g(const SmallVec& x) const {
    SmallMat m;
    g_into(x, m);
    return m;
  }
  SmallMat h(const SmallVec& x) const {
    SmallMat m;
    h_into(x, m);
    return m;
  }

  /// Element k is d h / d x_k.
  std::vector<Mat> dh(const SmallVec& x) const {
    require_product("dh");
    std::vector<Mat> out(static_cast<std::size_t>(d_), Mat::Zero(d_, static_cast<Eigen::Index>(v_.size())));
    for (const auto& t : b_terms_)
      for (int k = 0; k < d_; ++k) out[static_cast<std::size_t>(k)](t.component, t.obs) += t.coef * t.x.partial(x, k);
    return out;
  }

  std::vector<Mat> dg(const SmallVec& x) const {
    require_product("dg");
    std::vector<Mat> out(static_cast<std::size_t>(d_), Mat::Zero(d_, static_cast<Eigen::Index>(u_.size())));
    for (const auto& t : a_terms_)
      for (int k = 0; k < d_; ++k) out[static_cast<std::size_t>(k)](t.component, t.obs) += t.coef * t.x.partial(x, k);
    return out;
  }

  void u_values(const Point& y, SmallVec& out) const { stack_values(u_, y, out); }
  void v_values(const Point& y, SmallVec& out) const { stack_values(v_, y, out); }

  // Pointwise evaluation (either form) -------------------------------------

  SmallVec a(const SmallVec& x, const Point& y) const {
    if (form_ == Form::general) return a_fn_(x, y);
    SmallVec uy;
    u_values(y, uy);
    return g(x) * uy;
  }

  SmallVec b(const SmallVec& x, const Point& y) const {
    if (form_ == Form::general) return b_fn_(x, y);
    SmallVec vy;
    v_values(y, vy);
    return h(x) * vy;
  }

  /// (i,k) = d b^i / d x_k at (x, y).
  SmallMat db(const SmallVec& x, const Point& y) const {
    if (form_ == Form::general) return db_fn_(x, y);
    SmallVec vy;
    v_values(y, vy);
    SmallMat out = SmallMat::Zero(d_, d_);
    for (const auto& t : b_terms_)
      for (int k = 0; k < d_; ++k) out(t.component, k) += t.coef * t.x.partial(x, k) * vy[t.obs];
    return out;
  }

  /// Max |b - h v| over the given points (product-form consistency).
  double product_mismatch(const std::vector<SmallVec>& xs, const std::vector<Point>& ys) const {
    require_product("product_mismatch");
    double worst = 0.0;
    for (const auto& x : xs)
      for (const auto& y : ys) {
        SmallVec direct = SmallVec::Zero(d_);
        for (const auto& t : b_terms_) direct[t.component] += t.coef * t.x.value(x) * v_[static_cast<std::size_t>(t.obs)].scalar(y);
        worst = std::max(worst, (direct - b(x, y)).cwiseAbs().maxCoeff());
      }
    return worst;
  }

 private:
  void require_product(const char* what) const {
    if (form_ != Form::product) throw InvalidArgument(std::string(what) + " needs a product-form slow system");
  }

  void assemble(const std::vector<Term>& ts, std::size_t nobs, const SmallVec& x, SmallMat& out) const {
    require_product("product field");
    out.setZero(d_, static_cast<Eigen::Index>(nobs));
    for (const auto& t : ts) out(t.component, t.obs) += t.coef * t.x.value(x);
  }

  static void stack_values(const std::vector<Observable>& os, const Point& y, SmallVec& out) {
    out.resize(static_cast<Eigen::Index>(os.size()));
    for (std::size_t i = 0; i < os.size(); ++i) out[static_cast<Eigen::Index>(i)] = os[i].scalar(y);
  }

  Form form_ = Form::product;
  int d_ = 1;
  std::vector<Observable> u_, v_;
  std::vector<Term> a_terms_, b_terms_;
  VecFn a_fn_, b_fn_;
  JacFn db_fn_;
};

}  // namespace fastslow::slow
