#pragma once

// Experiment configuration: a versioned JSON document with a strict schema
// (unknown keys are errors). Parsing only validates; build() turns the blocks
// into flows, centered observables and slow systems.

#include "fastslow/io.hpp"

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace fastslow::config {

using io::json;

inline constexpr int kConfigVersion = 1;

/// Object reader that records which keys were consumed.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(&j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const std::string& k) const { return j_->contains(k); }

  const json& at(const std::string& k) {
    seen_.insert(k);
    if (!j_->contains(k)) throw ConfigError(where_ + ": missing key '" + k + "'");
    return j_->at(k);
  }

  template <class T>
  T get(const std::string& k) {
    try {
      return at(k).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + k + ": " + e.what());
    }
  }

  template <class T>
  T get(const std::string& k, T fallback) {
    seen_.insert(k);
    return has(k) ? get<T>(k) : fallback;
  }

  Reader sub(const std::string& k) { return Reader(at(k), where_ + "." + k); }
  std::string path(const std::string& k) const { return where_ + "." + k; }

  void finish() const {
    for (const auto& [k, _] : j_->items())
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
  }

 private:
  const json* j_;
  std::string where_;
  std::set<std::string> seen_;
};

enum class CenterMode { none, given, time_average };

struct ObservableBlock {
  std::string name;
  std::string kind;  ///< coordinate | constant | polynomial
  int index = 0;
  double scale = 1.0;
  double value = 0.0;
  std::vector<observables::Monomial> terms;
  CenterMode center = CenterMode::none;
  std::vector<double> mean;
};

struct TermBlock {
  int component = 0;
  double coef = 1.0;
  slow::XForm x;
  std::string observable;
};

struct SlowBlock {
  int dimension = 1;
  std::vector<TermBlock> a, b;
};

struct EstimatorBlock {
  homog::Method method = homog::Method::window;
  double n = 200.0;
  double t_max = 50.0;
  int n_max = 20;
  std::uint32_t members = 40;
  double orbit_length = 1000.0;
  double origin_gap = 5.0;
  double lag_step = 0.05;
  std::optional<flow::SectionSpec> section;
  std::uint32_t calibration_members = 20;
  double calibration_length = 5000.0;
};

struct CrosscheckBlock {
  std::vector<std::string> observables;
  std::vector<double> windows{200.0, 400.0};
  double z_threshold = 3.0;
};

struct GridBlock {
  homog::TensorGrid grid;
  homog::Interpolation interpolation = homog::Interpolation::multilinear;
  homog::Extrapolation extrapolation = homog::Extrapolation::error;
};

struct SimulationBlock {
  std::vector<double> eps;
  double T = 1.0;
  std::uint32_t N = 2000;
  std::vector<double> xi;
  double dt_fast = 0.01;
  double guard = 1e3;
  double sde_dt = 1e-3;
  std::uint32_t sde_N = 20000;
  double ks_threshold = 0.05;
  double trend_slack = 0.01;
  bool acceptance = false;
  int path_points = 0;
  std::string coefficients;  ///< optional CoeffField JSON to use instead of estimating
};

struct WipBlock {
  std::vector<std::string> observables;
  double n = 200.0;
  std::uint32_t members = 2000;
  int points = 101;
  bool write_paths = false;
};

struct ScalingBlock {
  std::string v, w;
  double t_min = 1.0, t_max = 100.0;
  int points = 9;
  std::uint32_t members = 1000;
};

struct IdentityBlock {
  double eps = 0.1;
  double T = 1.0;
  int points = 2001;
  double dt_fast = 0.005;
  std::uint32_t members = 3;
  std::vector<double> xi;
  double tolerance = 1e-3;
};

struct RoughBlock {
  int oracle_drivers = 10;
  double oracle_dt = 1e-4;
  double oracle_tolerance = 1e-5;
  std::optional<IdentityBlock> identity;
};

struct SuspensionBlock {
  std::vector<std::string> observables;
  std::uint32_t members = 20;
  int returns = 500;
};

struct Config {
  int version = kConfigVersion;
  std::uint64_t seed = 1;
  int workers = 1;
  std::string flow_name = "lorenz";
  std::map<std::string, double> flow_params;
  double dt = 0.01;
  flow::InvariantSampling sampling;
  std::vector<ObservableBlock> observables;
  std::optional<SlowBlock> slow;
  EstimatorBlock estimator;
  std::optional<CrosscheckBlock> crosscheck;
  std::optional<GridBlock> grid;
  std::optional<SimulationBlock> simulation;
  std::optional<WipBlock> wip;
  std::optional<ScalingBlock> scaling;
  RoughBlock rough;
  std::optional<SuspensionBlock> suspension;
  std::string output_directory = "out";
  std::string hash;  ///< FNV-1a of the canonical document
};

namespace detail {

inline slow::XForm parse_xform(Reader r) {
  const auto kind = r.get<std::string>("kind", "monomial");
  slow::XForm x;
  if (kind == "monomial") {
    x = slow::XForm::monomial(r.get<std::vector<int>>("powers", {}));
  } else if (kind == "sin" || kind == "cos") {
    const int k = r.get<int>("index");
    const double f = r.get<double>("freq", 1.0), ph = r.get<double>("phase", 0.0);
    x = kind == "sin" ? slow::XForm::sine(k, f, ph) : slow::XForm::cosine(k, f, ph);
  } else {
    throw ConfigError("unknown x-form kind '" + kind + "'");
  }
  r.finish();
  return x;
}

inline std::vector<TermBlock> parse_terms(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw ConfigError(where + ": expected an array of terms");
  std::vector<TermBlock> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    Reader r(arr[i], where + "[" + std::to_string(i) + "]");
    TermBlock t;
    t.component = r.get<int>("component", 0);
    t.coef = r.get<double>("coef", 1.0);
    t.observable = r.get<std::string>("observable");
    t.x = r.has("x") ? parse_xform(r.sub("x")) : slow::XForm::one();
    r.finish();
    out.push_back(std::move(t));
  }
  return out;
}

inline ObservableBlock parse_observable(const std::string& name, Reader r) {
  ObservableBlock o;
  o.name = name;
  o.kind = r.get<std::string>("kind");
  if (o.kind == "coordinate") {
    o.index = r.get<int>("index");
    o.scale = r.get<double>("scale", 1.0);
  } else if (o.kind == "constant") {
    o.value = r.get<double>("value");
  } else if (o.kind == "polynomial") {
    const auto& terms = r.at("terms");
    if (!terms.is_array() || terms.empty()) throw ConfigError(r.path("terms") + ": expected a non-empty array");
    for (std::size_t i = 0; i < terms.size(); ++i) {
      Reader t(terms[i], r.path("terms") + "[" + std::to_string(i) + "]");
      o.terms.push_back({t.get<double>("coef", 1.0), t.get<std::vector<int>>("powers")});
      t.finish();
    }
  } else {
    throw ConfigError("observable '" + name + "': unknown kind '" + o.kind + "'");
  }
  if (r.has("center")) {
    const auto& c = r.at("center");
    if (c.is_string()) {
      const auto s = c.get<std::string>();
      if (s == "time_average") o.center = CenterMode::time_average;
      else if (s == "none") o.center = CenterMode::none;
      else throw ConfigError("observable '" + name + "': center must be \"none\", \"time_average\" or a mean");
    } else if (c.is_number()) {
      o.center = CenterMode::given;
      o.mean = {c.get<double>()};
    } else {
      throw ConfigError("observable '" + name + "': bad center");
    }
  }
  r.finish();
  return o;
}

inline flow::SectionSpec parse_section(Reader r) {
  flow::SectionSpec s;
  const auto n = r.get<std::vector<double>>("normal");
  s.normal = flow::Point(static_cast<Eigen::Index>(n.size()));
  for (std::size_t i = 0; i < n.size(); ++i) s.normal[static_cast<Eigen::Index>(i)] = n[i];
  s.offset = r.get<double>("offset", 0.0);
  const auto dir = r.get<std::string>("direction", "upward");
  if (dir == "upward") s.direction = flow::Direction::upward;
  else if (dir == "downward") s.direction = flow::Direction::downward;
  else throw ConfigError("section direction must be upward or downward");
  s.min_return_time = r.get<double>("min_return_time", 1e-3);
  r.finish();
  return s;
}

inline void positive(double x, const std::string& what) {
  if (!(x > 0.0)) throw ConfigError(what + " must be positive");
}

}  // namespace detail

inline Config parse(const json& doc) {
  Config c;
  Reader r(doc, "config");
  c.version = r.get<int>("version");
  if (c.version != kConfigVersion) throw ConfigError("unsupported config version " + std::to_string(c.version));
  c.seed = r.get<std::uint64_t>("seed", 1);
  c.workers = r.get<int>("workers", 1);
  if (c.workers < 1) throw ConfigError("workers must be >= 1");

  {
    auto f = r.sub("flow");
    c.flow_name = f.get<std::string>("name");
    c.flow_params = f.get<std::map<std::string, double>>("params", {});
    c.dt = f.get<double>("dt", 0.01);
    detail::positive(c.dt, "flow.dt");
    if (f.has("sampling")) {
      auto s = f.sub("sampling");
      c.sampling.burn_in = s.get<double>("burn_in", c.sampling.burn_in);
      c.sampling.gap = s.get<double>("gap", c.sampling.gap);
      c.sampling.perturbation = s.get<double>("perturbation", c.sampling.perturbation);
      s.finish();
    }
    c.sampling.dt = c.dt;
    f.finish();
  }

  if (r.has("observables")) {
    const auto& obs = r.at("observables");
    if (!obs.is_object()) throw ConfigError("observables: expected an object of named observables");
    for (const auto& [name, body] : obs.items())
      c.observables.push_back(detail::parse_observable(name, Reader(body, "observables." + name)));
  }

  if (r.has("slow")) {
    auto s = r.sub("slow");
    SlowBlock b;
    b.dimension = s.get<int>("dimension");
    if (s.has("a")) b.a = detail::parse_terms(s.at("a"), "slow.a");
    if (s.has("b")) b.b = detail::parse_terms(s.at("b"), "slow.b");
    s.finish();
    c.slow = b;
  }

  if (r.has("estimator")) {
    auto e = r.sub("estimator");
    auto& b = c.estimator;
    b.method = homog::method_from_string(e.get<std::string>("method", "window"));
    b.n = e.get<double>("n", b.n);
    b.t_max = e.get<double>("t_max", b.t_max);
    b.n_max = e.get<int>("n_max", b.n_max);
    b.members = e.get<std::uint32_t>("members", b.members);
    b.orbit_length = e.get<double>("orbit_length", b.orbit_length);
    b.origin_gap = e.get<double>("origin_gap", b.origin_gap);
    b.lag_step = e.get<double>("lag_step", b.lag_step);
    b.calibration_members = e.get<std::uint32_t>("calibration_members", b.calibration_members);
    b.calibration_length = e.get<double>("calibration_length", b.calibration_length);
    if (e.has("section")) b.section = detail::parse_section(e.sub("section"));
    e.finish();
    if (b.members < 2) throw ConfigError("estimator.members must be >= 2");
    if (b.method == homog::Method::suspension && !b.section)
      throw ConfigError("estimator: the suspension method needs a section");
  }

  if (r.has("crosscheck")) {
    auto x = r.sub("crosscheck");
    CrosscheckBlock b;
    b.observables = x.get<std::vector<std::string>>("observables");
    b.windows = x.get<std::vector<double>>("windows", b.windows);
    b.z_threshold = x.get<double>("z_threshold", b.z_threshold);
    x.finish();
    if (!c.estimator.section) throw ConfigError("crosscheck needs estimator.section for the suspension estimate");
    c.crosscheck = b;
  }

  if (r.has("grid")) {
    auto g = r.sub("grid");
    GridBlock b;
    b.grid.lower = g.get<std::vector<double>>("lower");
    b.grid.upper = g.get<std::vector<double>>("upper");
    b.grid.points = g.get<std::vector<int>>("points");
    b.interpolation = io::interpolation_from(g.get<std::string>("interpolation", "multilinear"));
    b.extrapolation = io::extrapolation_from(g.get<std::string>("extrapolation", "error"));
    g.finish();
    try {
      b.grid.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
    c.grid = b;
  }

  if (r.has("simulation")) {
    auto s = r.sub("simulation");
    SimulationBlock b;
    b.eps = s.get<std::vector<double>>("eps");
    if (b.eps.empty()) throw ConfigError("simulation.eps must not be empty");
    for (double e : b.eps) detail::positive(e, "simulation.eps entries");
    b.T = s.get<double>("T", b.T);
    b.N = s.get<std::uint32_t>("N", b.N);
    b.xi = s.get<std::vector<double>>("xi");
    b.dt_fast = s.get<double>("dt_fast", b.dt_fast);
    b.guard = s.get<double>("guard", b.guard);
    b.sde_dt = s.get<double>("sde_dt", b.sde_dt);
    b.sde_N = s.get<std::uint32_t>("sde_N", b.sde_N);
    b.ks_threshold = s.get<double>("ks_threshold", b.ks_threshold);
    b.trend_slack = s.get<double>("trend_slack", b.trend_slack);
    b.acceptance = s.get<bool>("acceptance", b.acceptance);
    b.path_points = s.get<int>("path_points", b.path_points);
    b.coefficients = s.get<std::string>("coefficients", "");
    s.finish();
    detail::positive(b.T, "simulation.T");
    detail::positive(b.dt_fast, "simulation.dt_fast");
    detail::positive(b.sde_dt, "simulation.sde_dt");
    if (b.N < 1 || b.sde_N < 1) throw ConfigError("simulation.N and sde_N must be >= 1");
    c.simulation = b;
  }

  if (r.has("wip")) {
    auto w = r.sub("wip");
    WipBlock b;
    b.observables = w.get<std::vector<std::string>>("observables");
    b.n = w.get<double>("n", b.n);
    b.members = w.get<std::uint32_t>("members", b.members);
    b.points = w.get<int>("points", b.points);
    b.write_paths = w.get<bool>("write_paths", b.write_paths);
    w.finish();
    if (b.points < 2) throw ConfigError("wip.points must be >= 2");
    c.wip = b;
  }

  if (r.has("scaling")) {
    auto s = r.sub("scaling");
    ScalingBlock b;
    b.v = s.get<std::string>("v");
    b.w = s.get<std::string>("w");
    b.t_min = s.get<double>("t_min", b.t_min);
    b.t_max = s.get<double>("t_max", b.t_max);
    b.points = s.get<int>("points", b.points);
    b.members = s.get<std::uint32_t>("members", b.members);
    s.finish();
    c.scaling = b;
  }

  if (r.has("rough")) {
    auto s = r.sub("rough");
    c.rough.oracle_drivers = s.get<int>("oracle_drivers", c.rough.oracle_drivers);
    c.rough.oracle_dt = s.get<double>("oracle_dt", c.rough.oracle_dt);
    c.rough.oracle_tolerance = s.get<double>("oracle_tolerance", c.rough.oracle_tolerance);
    if (s.has("identity")) {
      auto i = s.sub("identity");
      IdentityBlock b;
      b.eps = i.get<double>("eps", b.eps);
      b.T = i.get<double>("T", b.T);
      b.points = i.get<int>("points", b.points);
      b.dt_fast = i.get<double>("dt_fast", b.dt_fast);
      b.members = i.get<std::uint32_t>("members", b.members);
      b.xi = i.get<std::vector<double>>("xi");
      b.tolerance = i.get<double>("tolerance", b.tolerance);
      i.finish();
      c.rough.identity = b;
    }
    s.finish();
  }

  if (r.has("suspension")) {
    auto s = r.sub("suspension");
    SuspensionBlock b;
    b.observables = s.get<std::vector<std::string>>("observables");
    b.members = s.get<std::uint32_t>("members", b.members);
    b.returns = s.get<int>("returns", b.returns);
    s.finish();
    if (!c.estimator.section) throw ConfigError("suspension needs estimator.section");
    c.suspension = b;
  }

  if (r.has("output")) {
    auto o = r.sub("output");
    c.output_directory = o.get<std::string>("directory", c.output_directory);
    o.finish();
  }
  r.finish();
  c.hash = io::hex64(io::fnv1a64(doc.dump()));
  return c;
}

inline Config parse_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse(doc);
}

inline Config load(const std::string& path) { return parse_text(io::read_file(path)); }

/// Independent seed for a named purpose.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  return rng::splitmix64(seed ^ io::fnv1a64(purpose));
}

// ---------------------------------------------------------------------------
// Built experiment

struct Experiment {
  Config cfg;
  flow::FlowSpec flow = flow::FlowSpec::lorenz();
  std::map<std::string, observables::Observable> obs;
  std::optional<slow::SlowSystem> system;

  const observables::Observable& observable(const std::string& name) const {
    auto it = obs.find(name);
    if (it == obs.end()) throw ConfigError("unknown observable '" + name + "'");
    return it->second;
  }

  std::vector<observables::Observable> observables_named(const std::vector<std::string>& names) const {
    std::vector<observables::Observable> out;
    for (const auto& n : names) out.push_back(observable(n));
    return out;
  }

  homog::EnsemblePlan plan(std::string_view purpose) const {
    homog::EnsemblePlan p;
    p.members = cfg.estimator.members;
    p.seed = derive_seed(cfg.seed, purpose);
    p.sampling = cfg.sampling;
    p.orbit_length = cfg.estimator.orbit_length;
    p.dt = cfg.dt;
    p.origin_gap = cfg.estimator.origin_gap;
    p.workers = cfg.workers;
    p.lag_step = cfg.estimator.lag_step;
    return p;
  }

  homog::EstimatorSettings settings(std::string_view purpose) const {
    homog::EstimatorSettings es;
    es.method = cfg.estimator.method;
    es.n = cfg.estimator.n;
    es.t_max = cfg.estimator.t_max;
    es.n_max = cfg.estimator.n_max;
    if (cfg.estimator.section) es.section = *cfg.estimator.section;
    es.plan = plan(purpose);
    es.calibration_members = cfg.estimator.calibration_members;
    es.calibration_length = cfg.estimator.calibration_length;
    return es;
  }

  io::Provenance provenance(std::string command) const { return {cfg.hash, cfg.seed, std::move(command)}; }
};

inline observables::Observable build_observable(const ObservableBlock& b, const flow::FlowSpec& spec, const Config& c) {
  observables::Observable o = [&] {
    if (b.kind == "coordinate") {
      if (b.index < 0 || b.index >= spec.dimension())
        throw ConfigError("observable '" + b.name + "': coordinate index out of range");
      return observables::coordinate(b.index, b.scale);
    }
    if (b.kind == "constant") return observables::constant(b.value);
    for (const auto& t : b.terms)
      if (static_cast<int>(t.powers.size()) > spec.dimension())
        throw ConfigError("observable '" + b.name + "': too many exponents");
    return observables::polynomial(b.terms, b.name);
  }().renamed(b.name);
  switch (b.center) {
    case CenterMode::none: return o;
    case CenterMode::given: {
      SmallVec m(1);
      m[0] = b.mean.at(0);
      return o.as_centered(m);
    }
    case CenterMode::time_average:
      return observables::center_by_time_average(spec, o, derive_seed(c.seed, "center:" + b.name),
                                                 c.estimator.calibration_members, c.estimator.calibration_length,
                                                 c.sampling);
  }
  return o;
}

inline Experiment build(const Config& c) {
  Experiment e;
  e.cfg = c;
  try {
    e.flow = flow::FlowSpec::from_name(c.flow_name, c.flow_params);
    if (c.estimator.section) c.estimator.section->validate(e.flow.dimension());
    for (const auto& b : c.observables) e.obs.emplace(b.name, build_observable(b, e.flow, c));
    if (c.slow) {
      const auto& s = *c.slow;
      std::vector<observables::Observable> u, v;
      std::map<std::string, int> ui, vi;
      auto terms = [&](const std::vector<TermBlock>& ts, std::vector<observables::Observable>& list,
                       std::map<std::string, int>& index) {
        std::vector<slow::Term> out;
        for (const auto& t : ts) {
          if (!index.count(t.observable)) {
            index[t.observable] = static_cast<int>(list.size());
            list.push_back(e.observable(t.observable));
          }
          out.push_back({t.component, t.coef, t.x, index[t.observable]});
        }
        return out;
      };
      auto at = terms(s.a, u, ui);
      auto bt = terms(s.b, v, vi);
      e.system = slow::SlowSystem::product(s.dimension, u, at, v, bt);
    }
    if (c.grid && c.slow && c.grid->grid.dim() != c.slow->dimension)
      throw ConfigError("grid dimension must equal slow.dimension");
    if (c.simulation && c.slow && static_cast<int>(c.simulation->xi.size()) != c.slow->dimension)
      throw ConfigError("simulation.xi must have slow.dimension entries");
  } catch (const InvalidArgument& ex) {
    throw ConfigError(ex.what());
  }
  return e;
}

}  // namespace fastslow::config
