#pragma once

// CSV and JSON serialization. Numbers are written in shortest round-trip
// form, so identical results give identical bytes.

#include "fastslow/homog.hpp"
#include "fastslow/sim.hpp"
#include "fastslow/stats.hpp"

#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fastslow::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// What every output file carries to be re-run bit-identically.
struct Provenance {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string command;

  json to_json() const { return {{"config_hash", config_hash}, {"seed", seed}, {"command", command}}; }
};

inline std::string num(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

/// JSON cannot hold NaN; non-finite values become null.
inline json jnum(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline json to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(jnum(m(i, j)));
    rows.push_back(r);
  }
  return rows;
}

inline json vec_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(jnum(v[i]));
  return a;
}

inline Mat mat_from_json(const json& j) {
  if (!j.is_array()) throw ConfigError("expected a matrix (array of rows)");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j.at(0).size());
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& r = j.at(static_cast<std::size_t>(i));
    if (!r.is_array() || static_cast<Eigen::Index>(r.size()) != cols) throw ConfigError("ragged matrix");
    for (Eigen::Index k = 0; k < cols; ++k) {
      const auto& x = r.at(static_cast<std::size_t>(k));
      m(i, k) = x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>();
    }
  }
  return m;
}

inline void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
}

inline void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

inline std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) { row_strings(header); }

  void row_strings(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os_ << (i ? "," : "") << cells[i];
    os_ << "\n";
  }

  template <class... Cells>
  CsvWriter& cells(Cells&&... c) {
    bool first = true;
    ((os_ << (first ? "" : ",") << cell(c), first = false), ...);
    return *this;
  }
  CsvWriter& more(double x) {
    os_ << "," << num(x);
    return *this;
  }
  void end() { os_ << "\n"; }

  std::string str() const { return os_.str(); }

 private:
  static std::string cell(double x) { return num(x); }
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  template <class I>
    requires std::is_integral_v<I>
  static std::string cell(I i) {
    return std::to_string(i);
  }

  std::ostringstream os_;
};

/// Prefixes a CSV body with a comment line carrying the provenance.
inline std::string stamped(const std::string& csv, const Provenance& p) {
  return "# config_hash=" + p.config_hash + " seed=" + std::to_string(p.seed) + " command=" + p.command + "\n" + csv;
}

inline std::vector<std::string> indexed(const std::string& prefix, int count, int base = 1) {
  std::vector<std::string> out;
  for (int i = 0; i < count; ++i) out.push_back(prefix + std::to_string(i + base));
  return out;
}

// ---------------------------------------------------------------------------
// Orbits, paths, drivers

inline std::string orbit_csv(const flow::Orbit& o) {
  const int M = o.points.empty() ? 0 : static_cast<int>(o.points.front().size());
  auto header = indexed("y", M);
  header.insert(header.begin(), "t");
  CsvWriter w(header);
  for (std::size_t k = 0; k < o.size(); ++k) {
    w.cells(o.grid[k]);
    for (int i = 0; i < M; ++i) w.more(o.points[k][i]);
    w.end();
  }
  return w.str();
}

/// t, then the entries of each value matrix in row-major order.
inline std::string path_sample_csv(const observables::PathSample& p, const std::string& prefix = "c") {
  const auto& first = p.values.front();
  const int n = static_cast<int>(first.size());
  auto header = indexed(prefix, n);
  header.insert(header.begin(), "t");
  CsvWriter w(header);
  for (std::size_t k = 0; k < p.grid.size(); ++k) {
    w.cells(p.grid[k]);
    const Mat& m = p.values[k];
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) w.more(m(i, j));
    w.end();
  }
  return w.str();
}

/// Columns t, W1..We, WW11..WWee (row-major).
inline std::string driver_csv(const rough::RoughDriver& d) {
  const int e = d.dim();
  auto header = indexed("W", e);
  header.insert(header.begin(), "t");
  for (int i = 1; i <= e; ++i)
    for (int j = 1; j <= e; ++j) header.push_back("WW" + std::to_string(i) + std::to_string(j));
  CsvWriter w(header);
  for (std::size_t k = 0; k < d.size(); ++k) {
    w.cells(d.W.grid[k]);
    for (int i = 0; i < e; ++i) w.more(d.W.values(i, static_cast<Eigen::Index>(k)));
    for (int i = 0; i < e; ++i)
      for (int j = 0; j < e; ++j) w.more(d.WW[k](i, j));
    w.end();
  }
  return w.str();
}

inline json driver_sidecar(const rough::RoughDriver& d, const Provenance& p, const json& extra = json::object()) {
  json j = {{"kind", "rough_driver"},
            {"gamma", d.gamma},
            {"dimension", d.dim()},
            {"points", d.size()},
            {"chen_defect", rough::chen_defect(d)},
            {"provenance", p.to_json()}};
  j.update(extra);
  return j;
}

// ---------------------------------------------------------------------------
// Coefficient fields

inline constexpr int kCoeffFieldVersion = 1;

inline const char* to_string(homog::Interpolation i) {
  return i == homog::Interpolation::nearest ? "nearest" : "multilinear";
}
inline const char* to_string(homog::Extrapolation e) { return e == homog::Extrapolation::clamp ? "clamp" : "error"; }

inline homog::Interpolation interpolation_from(const std::string& s) {
  if (s == "nearest") return homog::Interpolation::nearest;
  if (s == "multilinear") return homog::Interpolation::multilinear;
  throw ConfigError("unknown interpolation '" + s + "'");
}
inline homog::Extrapolation extrapolation_from(const std::string& s) {
  if (s == "clamp") return homog::Extrapolation::clamp;
  if (s == "error") return homog::Extrapolation::error;
  throw ConfigError("unknown extrapolation '" + s + "'");
}

inline json coeff_field_json(const homog::CoeffField& f, const Provenance& p) {
  json ds = json::array(), dq = json::array(), dqse = json::array();
  for (const auto& m : f.diffusion) ds.push_back(to_json(m));
  for (const auto& m : f.diffusion_sq) dq.push_back(to_json(m));
  for (const auto& m : f.diffusion_sq_std_error) dqse.push_back(to_json(m));
  json prov = p.to_json();
  for (const auto& [k, v] : f.provenance)
    if (!prov.contains(k)) prov[k] = v;
  return {{"kind", "coeff_field"},
          {"version", kCoeffFieldVersion},
          {"grid", {{"lower", f.grid.lower}, {"upper", f.grid.upper}, {"points", f.grid.points}}},
          {"interpolation", to_string(f.interpolation)},
          {"extrapolation", to_string(f.extrapolation)},
          {"tol_psd_rel", f.tol_psd_rel},
          {"drift", to_json(f.drift)},
          {"drift_std_error", to_json(f.drift_std_error)},
          {"diffusion_sq", dq},
          {"diffusion_sq_std_error", dqse},
          {"diffusion", ds},
          {"provenance", prov}};
}

inline homog::CoeffField coeff_field_from_json(const json& j) {
  if (j.value("kind", "") != "coeff_field") throw ConfigError("not a coefficient-field document");
  if (j.value("version", 0) != kCoeffFieldVersion)
    throw ConfigError("unsupported coefficient-field version " + std::to_string(j.value("version", 0)));
  homog::CoeffField f;
  const auto& g = j.at("grid");
  f.grid.lower = g.at("lower").get<std::vector<double>>();
  f.grid.upper = g.at("upper").get<std::vector<double>>();
  f.grid.points = g.at("points").get<std::vector<int>>();
  f.grid.validate();
  f.interpolation = interpolation_from(j.at("interpolation").get<std::string>());
  f.extrapolation = extrapolation_from(j.at("extrapolation").get<std::string>());
  f.tol_psd_rel = j.at("tol_psd_rel").get<double>();
  f.drift = mat_from_json(j.at("drift"));
  f.drift_std_error = mat_from_json(j.at("drift_std_error"));
  for (const auto& m : j.at("diffusion_sq")) f.diffusion_sq.push_back(mat_from_json(m));
  for (const auto& m : j.at("diffusion_sq_std_error")) f.diffusion_sq_std_error.push_back(mat_from_json(m));
  for (const auto& m : j.at("diffusion")) f.diffusion.push_back(mat_from_json(m));
  const auto P = f.grid.size();
  if (static_cast<std::size_t>(f.drift.cols()) != P || f.drift.rows() != f.dim() || f.diffusion.size() != P ||
      f.diffusion_sq.size() != P)
    throw ConfigError("coefficient field arrays do not match the grid");
  for (const auto& [k, v] : j.at("provenance").items()) f.provenance[k] = v.is_string() ? v.get<std::string>() : v.dump();
  return f;
}

// ---------------------------------------------------------------------------
// Ensembles

/// member, escaped, x1..xd at T, then running max and time average per coordinate.
inline std::string ensemble_csv(const sim::EnsembleResult& r) {
  const int d = r.members.empty() ? 0 : static_cast<int>(r.members.front().endpoint.size());
  std::vector<std::string> header{"member", "escaped"};
  for (const auto& part : {indexed("x", d), indexed("max_x", d), indexed("avg_x", d)})
    header.insert(header.end(), part.begin(), part.end());
  CsvWriter w(header);
  for (const auto& m : r.members) {
    w.cells(m.member, m.escaped ? 1 : 0);
    for (const Vec* v : {&m.endpoint, &m.running_max, &m.time_average})
      for (int i = 0; i < d; ++i) w.more((*v)[i]);
    w.end();
  }
  return w.str();
}

/// member, t, x1..xd for members with recorded paths.
inline std::string ensemble_paths_csv(const sim::EnsembleResult& r) {
  const int d = r.paths.empty() ? 0 : static_cast<int>(r.paths.front().rows());
  auto header = indexed("x", d);
  header.insert(header.begin(), {"member", "t"});
  CsvWriter w(header);
  for (std::size_t m = 0; m < r.paths.size(); ++m)
    for (std::size_t k = 0; k < r.path_grid.size(); ++k) {
      w.cells(m, r.path_grid[k]);
      for (int i = 0; i < d; ++i) w.more(r.paths[m](i, static_cast<Eigen::Index>(k)));
      w.end();
    }
  return w.str();
}

inline json ensemble_json(const sim::EnsembleResult& r, const Provenance& p) {
  return {{"kind", r.kind},
          {"eps", r.eps},
          {"T", r.T},
          {"dt", r.dt},
          {"seed", r.seed},
          {"N", r.requested},
          {"escapes", r.escapes()},
          {"completed", r.endpoints().size()},
          {"warnings", r.warnings},
          {"provenance", p.to_json()}};
}

// ---------------------------------------------------------------------------
// Estimates and reports

inline std::vector<std::string> bestimate_header() {
  return {"method", "parameter", "v", "w", "value", "std_error", "members"};
}

/// One row per (v, w) entry of a B matrix.
inline void bmatrix_rows(CsvWriter& w, const homog::BMatrix& b, double parameter, const std::vector<std::string>& vnames,
                         const std::vector<std::string>& wnames) {
  for (Eigen::Index i = 0; i < b.value.rows(); ++i)
    for (Eigen::Index j = 0; j < b.value.cols(); ++j) {
      w.cells(std::string(homog::to_string(b.method)), parameter, vnames.at(static_cast<std::size_t>(i)),
              wnames.at(static_cast<std::size_t>(j)), b.value(i, j), b.std_error(i, j), b.member_values.size());
      w.end();
    }
}

inline json bmatrix_json(const homog::BMatrix& b) {
  json meta = json::object();
  for (const auto& [k, v] : b.meta) meta[k] = jnum(v);
  return {{"method", homog::to_string(b.method)},
          {"value", to_json(b.value)},
          {"std_error", to_json(b.std_error)},
          {"members", b.member_values.size()},
          {"meta", meta},
          {"warnings", b.warnings}};
}

inline json report_json(const stats::TwoSampleReport& r) {
  json j = {{"statistic", stats::to_string(r.statistic)}, {"value", r.value}, {"threshold", r.threshold},
            {"pass", r.pass}, {"n1", r.n1}, {"n2", r.n2}};
  if (r.statistic == stats::Statistic::moment) j["order"] = r.order;
  return j;
}

inline json report_json(const stats::ScalingReport& r) {
  return {{"exponent_fit", r.exponent_fit}, {"std_error", r.std_error}, {"target", r.target}, {"band", r.band},
          {"pass", r.pass}, {"times", r.times}, {"norms", r.norms}};
}

inline json report_json(const stats::CovarianceReport& r) {
  return {{"empirical", to_json(r.empirical)}, {"empirical_se", to_json(r.empirical_se)},
          {"target", to_json(r.target)},       {"target_se", to_json(r.target_se)},
          {"z", to_json(r.z)},                 {"max_abs_z", r.max_abs_z},
          {"threshold", r.threshold},          {"pass", r.pass},
          {"samples", r.samples}};
}

inline json report_json(const stats::HolderTailReport& r) {
  json levels = json::array();
  for (const auto& l : r.levels)
    levels.push_back({{"label", l.label}, {"q_level1", l.q_level1}, {"q_level2", l.q_level2}, {"drivers", l.drivers}});
  return {{"gamma", r.gamma},
          {"quantile", r.quantile},
          {"tolerance", r.tolerance},
          {"levels", levels},
          {"variation_level1", r.variation_level1},
          {"variation_level2", r.variation_level2},
          {"non_increasing", r.non_increasing},
          {"pass", r.pass}};
}

inline json report_json(const homog::FieldReport& r) {
  return {{"max_asymmetry", r.max_asymmetry},
          {"min_eigenvalue", jnum(r.min_eigenvalue)},
          {"max_reconstruction_error", r.max_reconstruction_error},
          {"pass", r.pass}};
}

}  // namespace fastslow::io
