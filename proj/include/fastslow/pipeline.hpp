#pragma once

// Commands of the experiment runner. Each writes CSV data and JSON reports
// into `out` and returns the report with its verdict. Nothing that depends on
// the worker count or the wall clock reaches the files.

#include "fastslow/config.hpp"
#include "fastslow/suites.hpp"

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

namespace fastslow::pipeline {

using config::Experiment;
using io::json;
namespace fs = std::filesystem;

enum class Failure { none, numerical, acceptance };

struct Outcome {
  json report = json::object();
  Failure failure = Failure::none;

  bool pass() const { return failure == Failure::none; }
  void fail(Failure f) {
    if (failure == Failure::none) failure = f;
  }
};

namespace detail {

inline void write_csv(const fs::path& p, const std::string& csv, const io::Provenance& prov) {
  io::write_file(p, io::stamped(csv, prov));
}

inline const slow::SlowSystem& system(const Experiment& e) {
  if (!e.system) throw ConfigError("this command needs a slow block");
  return *e.system;
}

inline std::vector<std::string> names(const std::vector<observables::Observable>& os) {
  std::vector<std::string> out;
  for (const auto& o : os) out.push_back(o.name());
  return out;
}

inline SmallVec small(const std::vector<double>& xs) {
  SmallVec v(static_cast<Eigen::Index>(xs.size()));
  for (std::size_t i = 0; i < xs.size(); ++i) v[static_cast<Eigen::Index>(i)] = xs[i];
  return v;
}

inline Vec flat(const Mat& m) { return Eigen::Map<const Vec>(m.data(), m.size()); }

inline double method_parameter(const config::EstimatorBlock& b) {
  switch (b.method) {
    case homog::Method::window: return b.n;
    case homog::Method::correlation: return b.t_max;
    case homog::Method::suspension: return b.n_max;
  }
  return 0.0;
}

/// The configured section, or one through the middle of the attractor.
inline flow::SectionSpec section(const Experiment& e) {
  if (e.cfg.estimator.section) return *e.cfg.estimator.section;
  flow::SectionSpec s;
  const int d = e.flow.dimension();
  s.normal = flow::Point::Zero(d);
  s.normal[d - 1] = 1.0;
  s.offset = e.cfg.flow_name == "lorenz" ? e.flow.param("rho") - 1.0 : 0.0;
  s.direction = flow::Direction::downward;
  s.min_return_time = 0.05;
  return s;
}

inline std::vector<observables::Observable> coordinates(const flow::FlowSpec& spec) {
  std::vector<observables::Observable> out;
  for (int i = 0; i < spec.dimension(); ++i) out.push_back(observables::coordinate(i));
  return out;
}

inline json suite_list(const std::vector<suites::SuiteResult>& rs, Outcome& o, Failure f) {
  json j = json::array();
  for (const auto& r : rs) {
    j.push_back(r.to_json());
    if (!r.pass) o.fail(f);
  }
  return j;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// estimate

struct FieldRun {
  homog::CoeffField field;
  homog::ProductStatistics stats;
};

inline FieldRun estimate_field(const Experiment& e) {
  const auto& sys = detail::system(e);
  if (!e.cfg.grid) throw ConfigError("this command needs a grid block");
  FieldRun r;
  r.field = homog::estimate_coefficients(e.flow, sys, e.cfg.grid->grid, e.settings("estimate"), e.cfg.grid->interpolation,
                                         e.cfg.grid->extrapolation, &r.stats);
  return r;
}

/// Window (each configured n), correlation and suspension estimates of B on
/// the cross-check observables, compared pairwise entry by entry.
inline Outcome crosscheck(const Experiment& e, const fs::path& out) {
  const auto& x = *e.cfg.crosscheck;
  const auto& est = e.cfg.estimator;
  const auto prov = e.provenance("crosscheck");
  const auto vs = e.observables_named(x.observables);
  struct Entry {
    std::string label;
    double parameter;
    homog::BMatrix B;
  };
  std::vector<Entry> runs;
  for (double n : x.windows)
    runs.push_back({"window", n, homog::window_matrix(e.flow, vs, {}, n, e.plan("crosscheck:window:" + io::num(n)))});
  runs.push_back({"correlation", est.t_max,
                  homog::correlation_matrix(e.flow, vs, {}, est.t_max, e.plan("crosscheck:correlation"))});
  runs.push_back({"suspension", static_cast<double>(est.n_max),
                  homog::suspension_matrix(e.flow, *est.section, vs, {}, est.n_max, e.plan("crosscheck:suspension"))});

  io::CsvWriter csv(io::bestimate_header());
  json estimates = json::array();
  for (const auto& r : runs) {
    io::bmatrix_rows(csv, r.B, r.parameter, x.observables, x.observables);
    auto j = io::bmatrix_json(r.B);
    j["parameter"] = r.parameter;
    estimates.push_back(j);
  }
  detail::write_csv(out / "crosscheck.csv", csv.str(), prov);

  Outcome o;
  const auto m = static_cast<Eigen::Index>(vs.size());
  json pairs = json::array(), diagonal = json::array();
  double worst_z = 0.0;
  for (std::size_t a = 0; a < runs.size(); ++a)
    for (std::size_t b = a + 1; b < runs.size(); ++b)
      for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j) {
          const double diff = runs[a].B.value(i, j) - runs[b].B.value(i, j);
          const double se = std::hypot(runs[a].B.std_error(i, j), runs[b].B.std_error(i, j));
          const double z = se > 0.0 ? std::abs(diff) / se : (diff == 0.0 ? 0.0 : 1e300);
          const bool ok = z <= x.z_threshold;
          worst_z = std::max(worst_z, z);
          if (!ok) o.fail(Failure::acceptance);
          pairs.push_back({{"a", runs[a].label + ":" + io::num(runs[a].parameter)},
                           {"b", runs[b].label + ":" + io::num(runs[b].parameter)},
                           {"v", x.observables[static_cast<std::size_t>(i)]},
                           {"w", x.observables[static_cast<std::size_t>(j)]},
                           {"difference", diff},
                           {"combined_se", se},
                           {"z", z},
                           {"pass", ok}});
        }
  for (const auto& r : runs)
    for (Eigen::Index i = 0; i < m; ++i) {
      const bool ok = r.B.value(i, i) >= -2.0 * r.B.std_error(i, i);
      if (!ok) o.fail(Failure::acceptance);
      diagonal.push_back({{"estimator", r.label + ":" + io::num(r.parameter)},
                          {"v", x.observables[static_cast<std::size_t>(i)]},
                          {"value", r.B.value(i, i)},
                          {"std_error", r.B.std_error(i, i)},
                          {"pass", ok}});
    }
  o.report = {{"command", "crosscheck"}, {"provenance", prov.to_json()}, {"observables", x.observables},
              {"estimates", estimates},   {"pairs", pairs},                {"max_z", worst_z},
              {"z_threshold", x.z_threshold}, {"diagonal", diagonal},     {"pass", o.pass()}};
  io::write_json(out / "crosscheck.json", o.report);
  return o;
}

/// Coefficient field from the slow block and, when configured, the estimator
/// cross-check. Either part may be absent but not both.
inline Outcome estimate(const Experiment& e, const fs::path& out) {
  if (!e.system && !e.cfg.crosscheck) throw ConfigError("estimate needs a slow block or a crosscheck block");
  const auto prov = e.provenance("estimate");
  Outcome o;
  o.report = {{"command", "estimate"}, {"provenance", prov.to_json()}};
  if (e.system) {
    const auto run = estimate_field(e);
    const auto check = homog::check_field(run.field);
    io::write_json(out / "coeff_field.json", io::coeff_field_json(run.field, prov));
    const auto vn = detail::names(e.system->v());
    io::CsvWriter w(io::bestimate_header());
    if (run.stats.B.value.size() > 0) io::bmatrix_rows(w, run.stats.B, detail::method_parameter(e.cfg.estimator), vn, vn);
    detail::write_csv(out / "b_estimates.csv", w.str(), prov);
    if (!check.pass) o.fail(Failure::numerical);
    o.report["field_check"] = io::report_json(check);
    o.report["noise_observables"] = vn;
    o.report["B"] = run.stats.B.value.size() > 0 ? io::bmatrix_json(run.stats.B) : json(nullptr);
    o.report["u_mean"] = io::vec_json(run.stats.u_mean);
  }
  if (e.cfg.crosscheck) {
    const auto x = crosscheck(e, out);
    o.report["crosscheck"] = {{"pass", x.pass()}, {"max_z", x.report["max_z"]}};
    if (!x.pass()) o.fail(x.failure);
  }
  o.report["pass"] = o.pass();
  io::write_json(out / "estimate_report.json", o.report);
  return o;
}

// ---------------------------------------------------------------------------
// wip

/// W_{v,n}(1) over an ensemble against B + B^T from independent orbits, and
/// optionally the moment-scaling slopes.
inline Outcome wip(const Experiment& e, const fs::path& out) {
  if (!e.cfg.wip) throw ConfigError("wip needs a wip block");
  const auto& b = *e.cfg.wip;
  const auto prov = e.provenance("wip");
  const auto vs = e.observables_named(b.observables);
  const auto v = observables::stack(vs, "wip");
  const auto m = static_cast<int>(vs.size());
  const auto grid = observables::uniform_grid(1.0, b.points);
  const auto seed = config::derive_seed(e.cfg.seed, "wip:paths");
  auto paths = parallel_map(b.members, e.cfg.workers, [&](std::size_t k) {
    const auto y0 = flow::member_state(e.flow, seed, static_cast<std::uint32_t>(k), e.cfg.sampling);
    auto p = observables::wip_path(e.flow, v, y0, b.n, grid, e.cfg.dt);
    if (!b.write_paths) p.W.values.erase(p.W.values.begin(), p.W.values.end() - 1);
    return std::move(p.W);
  });

  std::vector<Vec> W1;
  auto header = io::indexed("W", m);
  header.insert(header.begin(), "member");
  io::CsvWriter ends(header);
  for (std::size_t k = 0; k < paths.size(); ++k) {
    W1.push_back(detail::flat(paths[k].values.back()));
    ends.cells(k);
    for (int i = 0; i < m; ++i) ends.more(W1.back()[i]);
    ends.end();
  }
  detail::write_csv(out / "wip_endpoints.csv", ends.str(), prov);
  if (b.write_paths) {
    header.insert(header.begin() + 1, "t");
    io::CsvWriter w(header);
    for (std::size_t k = 0; k < paths.size(); ++k)
      for (std::size_t j = 0; j < grid.size(); ++j) {
        w.cells(k, grid[j]);
        const Vec x = detail::flat(paths[k].values[j]);
        for (int i = 0; i < m; ++i) w.more(x[i]);
        w.end();
      }
    detail::write_csv(out / "wip_paths.csv", w.str(), prov);
  }

  const auto B = homog::window_matrix(e.flow, vs, {}, b.n, e.plan("wip:B"));
  const auto cov = stats::covariance_check(W1, B);
  Outcome o;
  if (!cov.pass) o.fail(Failure::acceptance);
  o.report = {{"command", "wip"},
              {"provenance", prov.to_json()},
              {"observables", b.observables},
              {"n", b.n},
              {"members", b.members},
              {"B", io::bmatrix_json(B)},
              {"covariance", io::report_json(cov)}};
  io::write_json(out / "covariance.json", o.report);

  if (e.cfg.scaling) {
    const auto& s = *e.cfg.scaling;
    stats::ScalingPlan plan;
    plan.members = s.members;
    plan.seed = config::derive_seed(e.cfg.seed, "scaling");
    plan.sampling = e.cfg.sampling;
    plan.dt = e.cfg.dt;
    plan.workers = e.cfg.workers;
    const auto ts = stats::log_grid(s.t_min, s.t_max, s.points);
    const auto [rv, rs] = stats::moment_scaling(e.flow, e.observable(s.v), e.observable(s.w), ts, plan);
    io::CsvWriter w({"t", "norm_v", "norm_S"});
    for (std::size_t k = 0; k < ts.size(); ++k) {
      w.cells(ts[k], rv.norms[k], rs.norms[k]);
      w.end();
    }
    detail::write_csv(out / "scaling.csv", w.str(), prov);
    const json sj = {{"provenance", prov.to_json()}, {"v", s.v}, {"w", s.w},
                     {"members", s.members},        {"moments", {plan.high_moment, plan.low_moment}},
                     {"level1", io::report_json(rv)}, {"level2", io::report_json(rs)}};
    io::write_json(out / "scaling.json", sj);
    o.report["scaling"] = sj;
    if (!rv.pass || !rs.pass) o.fail(Failure::acceptance);
  }
  o.report["pass"] = o.pass();
  io::write_json(out / "wip_report.json", o.report);
  return o;
}

// ---------------------------------------------------------------------------
// converge

inline homog::CoeffField converge_field(const Experiment& e, const fs::path& out, const io::Provenance& prov) {
  const auto& s = *e.cfg.simulation;
  homog::CoeffField f;
  if (!s.coefficients.empty()) {
    try {
      f = io::coeff_field_from_json(json::parse(io::read_file(s.coefficients)));
    } catch (const json::exception& ex) {
      throw ConfigError(std::string("coefficient file: ") + ex.what());
    }
  } else {
    f = estimate_field(e).field;
  }
  if (f.dim() != detail::system(e).dimension()) throw ConfigError("coefficient field dimension differs from the slow system");
  io::write_json(out / "coeff_field.json", io::coeff_field_json(f, prov));
  return f;
}

/// Fast-slow ensembles along the eps ladder (common initial fast states)
/// against one SDE ensemble driven by the homogenized coefficients.
inline Outcome converge(const Experiment& e, const fs::path& out) {
  const auto& sys = detail::system(e);
  if (!e.cfg.simulation) throw ConfigError("converge needs a simulation block");
  const auto& s = *e.cfg.simulation;
  const auto prov = e.provenance("converge");
  const auto field = converge_field(e, out, prov);
  const auto check = homog::check_field(field);
  if (!check.pass) throw Error("coefficient field fails the PSD/reconstruction check");
  const auto xi = detail::small(s.xi);
  const int d = sys.dimension();

  sim::SdeOptions so;
  so.guard = s.guard;
  so.workers = e.cfg.workers;
  so.path_points = s.path_points;
  const auto sde = sim::solve_sde(field, xi, s.T, s.sde_dt, s.sde_N, config::derive_seed(e.cfg.seed, "converge:sde"), so);
  detail::write_csv(out / "sde.csv", io::ensemble_csv(sde), prov);
  io::write_json(out / "sde.json", io::ensemble_json(sde, prov));
  if (s.path_points >= 2) detail::write_csv(out / "sde_paths.csv", io::ensemble_paths_csv(sde), prov);

  sim::EnsembleOptions eo;
  eo.fast.dt_fast = s.dt_fast;
  eo.fast.guard = s.guard;
  eo.sampling = e.cfg.sampling;
  eo.workers = e.cfg.workers;
  eo.path_points = s.path_points;
  const auto y0_seed = config::derive_seed(e.cfg.seed, "converge:y0");
  auto eps = s.eps;
  std::stable_sort(eps.begin(), eps.end(), std::greater<>());

  using F = sim::EnsembleResult::Functional;
  const std::vector<std::pair<F, const char*>> functionals{
      {F::endpoint, "endpoint"}, {F::running_max, "running_max"}, {F::time_average, "time_average"}};
  io::CsvWriter rows({"eps", "coordinate", "functional", "statistic", "order", "value", "threshold", "pass"});
  json levels = json::array();
  std::vector<double> trend;
  std::size_t escapes = 0;
  for (double ep : eps) {
    const auto r = sim::run_ensemble(e.flow, sys, ep, xi, s.T, s.N, y0_seed, eo);
    const auto tag = "eps" + io::num(ep);
    detail::write_csv(out / ("ensemble_" + tag + ".csv"), io::ensemble_csv(r), prov);
    io::write_json(out / ("ensemble_" + tag + ".json"), io::ensemble_json(r, prov));
    if (s.path_points >= 2) detail::write_csv(out / ("ensemble_" + tag + "_paths.csv"), io::ensemble_paths_csv(r), prov);
    escapes += r.escapes();

    json reports = json::array();
    double worst = 0.0;
    auto log = [&](int i, const char* fn, const stats::TwoSampleReport& rep) {
      rows.cells(ep, i + 1, fn, stats::to_string(rep.statistic), rep.order, rep.value, rep.threshold, rep.pass ? 1 : 0);
      rows.end();
      auto j = io::report_json(rep);
      j["coordinate"] = i + 1;
      j["functional"] = fn;
      reports.push_back(j);
    };
    for (int i = 0; i < d; ++i)
      for (const auto& [f, fn] : functionals) {
        const auto a = r.samples(i, f), b = sde.samples(i, f);
        if (a.empty() || b.empty()) {
          if (f == F::endpoint) worst = 1.0;
          continue;
        }
        const auto ks = stats::ks_distance(a, b, s.ks_threshold);
        log(i, fn, ks);
        if (f != F::endpoint) continue;
        worst = std::max(worst, ks.value);
        log(i, fn, stats::energy_distance(a, b, s.ks_threshold));
        for (int k = 1; k <= 4; ++k) log(i, fn, stats::moment_report(a, b, k));
      }
    trend.push_back(worst);
    levels.push_back({{"eps", ep}, {"escapes", r.escapes()}, {"endpoint_ks", worst}, {"warnings", r.warnings},
                      {"reports", reports}});
  }
  detail::write_csv(out / "converge_ks.csv", rows.str(), prov);

  Outcome o;
  json verdict = nullptr;
  if (trend.size() >= 2) {
    const auto v = stats::trend_verdict(trend, s.trend_slack, s.ks_threshold);
    verdict = {{"non_increasing", v.non_increasing}, {"final_below", v.final_below}, {"pass", v.pass}};
    if (!v.pass) o.fail(Failure::acceptance);
  } else if (trend.front() > s.ks_threshold) {
    o.fail(Failure::acceptance);
  }
  if (s.acceptance && escapes > 0) o.fail(Failure::acceptance);
  o.report = {{"command", "converge"},
              {"provenance", prov.to_json()},
              {"field_check", io::report_json(check)},
              {"T", s.T},
              {"N", s.N},
              {"sde", {{"N", s.sde_N}, {"dt", s.sde_dt}, {"escapes", sde.escapes()}}},
              {"eps", eps},
              {"endpoint_ks", trend},
              {"ks_threshold", s.ks_threshold},
              {"trend_slack", s.trend_slack},
              {"escapes", escapes},
              {"acceptance_mode", s.acceptance},
              {"trend", verdict},
              {"levels", levels}};
  o.report["pass"] = o.pass();
  io::write_json(out / "converge_report.json", o.report);
  return o;
}

// ---------------------------------------------------------------------------
// selftest, rough, suspension

enum class Inject { none, chen, psd };

inline Outcome selftest(const Experiment& e, const fs::path& out, Inject inject = Inject::none) {
  const auto prov = e.provenance("selftest");
  const auto seed = [&](const char* p) { return config::derive_seed(e.cfg.seed, p); };
  const auto coords = detail::coordinates(e.flow);
  const auto start = flow::member_state(e.flow, seed("selftest:returns"), 0, e.cfg.sampling);
  std::vector<suites::SuiteResult> rs;
  rs.push_back(suites::chen_suite(seed("selftest:chen"), 10, inject == Inject::chen));
  rs.push_back(suites::psd_suite(seed("selftest:psd"), inject == Inject::psd));
  rs.push_back(suites::product_rule_suite(e.flow, detail::section(e), coords, coords, start, 200));
  rs.push_back(suites::chain_rule_suite(seed("selftest:chain")));
  rs.push_back(suites::integrator_order_suite(e.flow));
  rs.push_back(suites::bilinearity_suite(e.flow, seed("selftest:bilinear")));
  Outcome o;
  o.report = {{"command", "selftest"}, {"provenance", prov.to_json()}};
  o.report["suites"] = detail::suite_list(rs, o, Failure::acceptance);
  o.report["pass"] = o.pass();
  io::write_json(out / "selftest_report.json", o.report);
  return o;
}

/// ODE and RDE solutions of the product-form system on the same fast orbits.
inline suites::SuiteResult identity_suite(const Experiment& e, const fs::path& out, const io::Provenance& prov) {
  const auto& sys = detail::system(e);
  const auto& b = *e.cfg.rough.identity;
  if (static_cast<int>(b.xi.size()) != sys.dimension()) throw ConfigError("rough.identity.xi must have slow.dimension entries");
  const auto xi = detail::small(b.xi);
  const auto grid = observables::uniform_grid(b.T, b.points);
  const auto seed = config::derive_seed(e.cfg.seed, "identity");
  const auto fields = sim::rde_fields(sys);
  sim::FastSlowOptions fo;
  fo.dt_fast = b.dt_fast;
  struct Member {
    Mat ode, rde;
    rough::RoughDriver W;
    double error;
  };
  const auto members = parallel_map(b.members, e.cfg.workers, [&](std::size_t m) {
    const auto y0 = flow::member_state(e.flow, seed, static_cast<std::uint32_t>(m), e.cfg.sampling);
    auto path = sim::integrate_fast_slow(e.flow, sys, b.eps, xi, y0, b.T, fo, grid);
    if (path.escaped) throw IntegrationDiverged(path.escape_time);
    auto drv = sim::product_case_drivers(e.flow, sys, b.eps, y0, grid, b.dt_fast);
    const auto X = rough::solve_rde(fields, drv.V, drv.W, Vec(xi));
    return Member{path.values, X.values, std::move(drv.W), (path.values - X.values).cwiseAbs().maxCoeff()};
  });
  const int d = sys.dimension();
  auto header = io::indexed("x_ode", d);
  const auto rde = io::indexed("x_rde", d);
  header.insert(header.end(), rde.begin(), rde.end());
  header.insert(header.begin(), {"member", "t"});
  io::CsvWriter w(header);
  double worst = 0.0;
  json errors = json::array();
  for (std::size_t m = 0; m < members.size(); ++m) {
    const auto& mm = members[m];
    worst = std::max(worst, mm.error);
    errors.push_back(mm.error);
    for (std::size_t k = 0; k < grid.size(); ++k) {
      w.cells(m, grid[k]);
      for (const Mat* x : {&mm.ode, &mm.rde})
        for (int i = 0; i < d; ++i) w.more((*x)(i, static_cast<Eigen::Index>(k)));
      w.end();
    }
  }
  detail::write_csv(out / "identity_paths.csv", w.str(), prov);
  if (!members.empty()) {
    detail::write_csv(out / "identity_driver.csv", io::driver_csv(members.front().W), prov);
    io::write_json(out / "identity_driver.json",
                   io::driver_sidecar(members.front().W, prov, {{"eps", b.eps}, {"member", 0}}));
  }
  return suites::at_most("fast_slow_rde_identity", worst, b.tolerance,
                         {{"eps", b.eps}, {"T", b.T}, {"points", b.points}, {"dt_fast", b.dt_fast}, {"errors", errors}});
}

inline Outcome rough(const Experiment& e, const fs::path& out) {
  const auto prov = e.provenance("rough");
  const auto seed = [&](const char* p) { return config::derive_seed(e.cfg.seed, p); };
  const auto coords = detail::coordinates(e.flow);
  const auto start = flow::member_state(e.flow, seed("rough:returns"), 0, e.cfg.sampling);
  const auto& r = e.cfg.rough;
  std::vector<suites::SuiteResult> self{
      suites::chen_suite(seed("rough:chen")),
      suites::product_rule_suite(e.flow, detail::section(e), coords, coords, start, 200),
      suites::circle_area_suite()};
  std::vector<suites::SuiteResult> oracle{
      suites::rde_oracle_suite(seed("rough:oracle"), r.oracle_drivers, r.oracle_dt, r.oracle_tolerance)};
  Outcome o;
  o.report = {{"command", "rough"}, {"provenance", prov.to_json()}};
  o.report["self_consistency"] = detail::suite_list(self, o, Failure::acceptance);
  o.report["rde_oracle"] = detail::suite_list(oracle, o, Failure::acceptance);
  if (r.identity) o.report["identity"] = detail::suite_list({identity_suite(e, out, prov)}, o, Failure::acceptance);
  o.report["pass"] = o.pass();
  io::write_json(out / "rough_report.json", o.report);
  return o;
}

/// Return times and induced observables on the section, with the suspension
/// estimate of B.
inline Outcome suspension(const Experiment& e, const fs::path& out) {
  if (!e.cfg.suspension) throw ConfigError("suspension needs a suspension block");
  const auto& b = *e.cfg.suspension;
  const auto& section = *e.cfg.estimator.section;
  const auto prov = e.provenance("suspension");
  const auto vs = e.observables_named(b.observables);
  const auto m = static_cast<int>(vs.size());
  const auto seed = config::derive_seed(e.cfg.seed, "suspension:returns");
  const auto recs = parallel_map(b.members, e.cfg.workers, [&](std::size_t k) {
    const auto y0 = flow::member_state(e.flow, seed, static_cast<std::uint32_t>(k), e.cfg.sampling);
    return homog::induced_returns(e.flow, section, vs, vs, y0, b.returns, -1.0);
  });
  auto header = io::indexed("v", m);
  header.insert(header.begin(), {"member", "index", "r"});
  io::CsvWriter w(header);
  std::vector<double> rs;
  double product_rule = 0.0;
  for (std::size_t k = 0; k < recs.size(); ++k)
    for (std::size_t j = 0; j < recs[k].size(); ++j) {
      const auto& rec = recs[k][j];
      rs.push_back(rec.r);
      const Mat outer = rec.v_tilde * rec.w_tilde.transpose();
      product_rule = std::max(product_rule, (rec.S_vw + rec.S_wv.transpose() - outer).cwiseAbs().maxCoeff() /
                                                (1.0 + outer.cwiseAbs().maxCoeff()));
      w.cells(k, j, rec.r);
      for (int i = 0; i < m; ++i) w.more(rec.v_tilde[i]);
      w.end();
    }
  detail::write_csv(out / "returns.csv", w.str(), prov);
  if (rs.empty()) throw NoCrossingFound("no returns to the section");
  const auto rbar = batch_means(rs);
  const auto B = homog::suspension_matrix(e.flow, section, vs, {}, e.cfg.estimator.n_max, e.plan("suspension:B"));
  Outcome o;
  if (product_rule > 1e-8) o.fail(Failure::numerical);
  o.report = {{"command", "suspension"},
              {"provenance", prov.to_json()},
              {"observables", b.observables},
              {"returns", rs.size()},
              {"mean_return_time", rbar.mean},
              {"mean_return_time_se", rbar.std_error},
              {"min_return_time", *std::min_element(rs.begin(), rs.end())},
              {"max_return_time", *std::max_element(rs.begin(), rs.end())},
              {"return_time_q95", stats::quantile(rs, 0.95)},
              {"product_rule_residual", product_rule},
              {"B", io::bmatrix_json(B)},
              {"n_max", e.cfg.estimator.n_max}};
  o.report["pass"] = o.pass();
  io::write_json(out / "suspension_report.json", o.report);
  return o;
}

}  // namespace fastslow::pipeline
