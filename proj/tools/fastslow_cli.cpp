#include "fastslow/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

using namespace fastslow;

namespace {

constexpr int kOk = 0, kConfigError = 2, kNumericalError = 3, kAcceptanceFailure = 4;

config::Experiment load(const std::string& path, std::optional<std::uint64_t> seed, std::optional<int> workers) {
  config::Config c;
  if (path.empty()) {
    c.hash = io::hex64(io::fnv1a64(""));
  } else {
    c = config::load(path);
  }
  if (seed) c.seed = *seed;
  if (workers) {
    if (*workers < 1) throw ConfigError("--workers must be >= 1");
    c.workers = *workers;
  }
  return config::build(c);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Homogenization experiments for fast-slow systems"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  app.add_option("--config", config_path, "experiment configuration (JSON)");
  app.add_option("--seed", seed, "override the configured seed");
  app.add_option("--workers", workers, "worker threads");
  app.add_option("--out", out_dir, "output directory (default: output.directory from the config)");

  auto* estimate = app.add_subcommand("estimate", "estimate the drift and diffusion fields");
  auto* converge = app.add_subcommand("converge", "compare fast-slow ensembles with the limiting SDE");
  auto* selftest = app.add_subcommand("selftest", "run the invariant suites");
  auto* wip = app.add_subcommand("wip", "sample rescaled Birkhoff paths and check their covariance");
  auto* suspension = app.add_subcommand("suspension", "section returns and the suspension estimate");
  auto* rough = app.add_subcommand("rough", "rough-path suites");
  std::string inject = "none";
  selftest->add_option("--inject", inject, "deliberate fault: none, chen or psd")
      ->check(CLI::IsMember({"none", "chen", "psd"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfigError;
  }

  try {
    for (auto* sub : {estimate, converge, wip, suspension, rough})
      if (sub->parsed() && config_path.empty()) throw ConfigError(sub->get_name() + " needs --config");
    const auto e = load(config_path, seed, workers);
    const std::filesystem::path out = out_dir.empty() ? std::filesystem::path(e.cfg.output_directory) : std::filesystem::path(out_dir);
    pipeline::Outcome o;
    std::string name;
    if (estimate->parsed()) name = "estimate", o = pipeline::estimate(e, out);
    if (converge->parsed()) name = "converge", o = pipeline::converge(e, out);
    if (wip->parsed()) name = "wip", o = pipeline::wip(e, out);
    if (suspension->parsed()) name = "suspension", o = pipeline::suspension(e, out);
    if (rough->parsed()) name = "rough", o = pipeline::rough(e, out);
    if (selftest->parsed()) {
      name = "selftest";
      const auto inj = inject == "chen" ? pipeline::Inject::chen
                       : inject == "psd" ? pipeline::Inject::psd
                                         : pipeline::Inject::none;
      o = pipeline::selftest(e, out, inj);
    }
    std::cout << name << ": " << (o.pass() ? "pass" : "FAIL") << " (" << out.string() << ")\n";
    if (!o.pass()) std::cout << o.report.dump(2) << "\n";
    if (o.failure == pipeline::Failure::numerical) return kNumericalError;
    if (o.failure == pipeline::Failure::acceptance) return kAcceptanceFailure;
    return kOk;
  } catch (const ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const io::json::exception& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const std::exception& ex) {
    std::cerr << "numerical error: " << ex.what() << "\n";
    return kNumericalError;
  }
}
