// cpbounds command-line tool.
//
// Exit status: 0 on success, 1 on usage / validation / configuration errors,
// 2 on numerical failures.

#include "cpbounds/experiments.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

namespace {

using namespace cpbounds;

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> noise_seed;
  std::string out;
  unsigned threads = 1;
  std::optional<std::int64_t> samples;
};

SystemConfig resolve_config(const GlobalOptions& g) {
  SystemConfig cfg = g.config.empty() ? SystemConfig{} : load_config(g.config);
  if (g.seed) cfg.geometry_seed = *g.seed;
  if (g.noise_seed) cfg.noise_seed = *g.noise_seed;
  if (g.samples) cfg.micrb_samples = *g.samples;
  cfg.validate();
  return cfg;
}

/// Writes to --out when given, stdout otherwise.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty()) {
      file_ = std::make_unique<std::ofstream>(path, std::ios::binary);
      if (!*file_) throw ValidationError("cannot open output file '" + path + "'");
    }
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

Vec3 parse_axis(const std::string& s) {
  if (s == "x") return Vec3::UnitX();
  if (s == "y") return Vec3::UnitY();
  if (s == "z") return Vec3::UnitZ();
  std::stringstream ss(s);
  Vec3 v;
  std::string item;
  int k = 0;
  while (std::getline(ss, item, ',')) {
    if (k >= 3) throw ValidationError("axis must have three components");
    try {
      v(k++) = std::stod(item);
    } catch (const std::exception&) {
      throw ValidationError("axis component '" + item + "' is not a number");
    }
  }
  if (k != 3) throw ValidationError("axis must be x, y, z or three comma-separated numbers");
  return v;
}

std::set<EstimatorMethod> parse_methods(const std::string& list) {
  std::set<EstimatorMethod> out;
  if (list.empty() || list == "none") return out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) out.insert(parse_method(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Positioning error bounds and reference estimators for carrier-phase positioning"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "Scenario config file, or inline JSON text");
  app.add_option("--seed", g.seed, "Geometry seed (overrides the config)");
  app.add_option("--noise-seed", g.noise_seed, "Noise seed (overrides the config)");
  app.add_option("--out", g.out, "Output file (default: stdout)");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::Range(1u, 1024u));
  app.add_option("--samples", g.samples, "Integer-error samples for the mixed-integer bound")
      ->check(CLI::PositiveNumber);

  auto* scenario = app.add_subcommand("scenario", "Scenario configuration");
  scenario->require_subcommand(1);
  auto* print_defaults = scenario->add_subcommand("print-defaults", "Print the default configuration");

  auto* bounds = app.add_subcommand("bounds", "Error bounds");
  bounds->require_subcommand(1);
  auto* bounds_eval = bounds->add_subcommand("eval", "Evaluate the bounds for one scenario");
  bool with_micrb = false;
  bool bias_jacobian = false;
  bounds_eval->add_flag("--micrb", with_micrb, "Also evaluate the mixed-integer bound");
  bounds_eval->add_flag("--bias-jacobian", bias_jacobian, "Include the finite-difference bias Jacobian");
  bounds_eval->add_option("--samples", g.samples, "Integer-error samples")->check(CLI::PositiveNumber);

  auto* estimate = app.add_subcommand("estimate", "Run an estimator over noise realizations");
  std::string method = "delay";
  std::int64_t trials = 100;
  estimate->add_option("--method", method, "delay, mi or ds")->check(CLI::IsMember({"delay", "mi", "ds"}));
  estimate->add_option("--trials", trials, "Number of trials")->check(CLI::PositiveNumber);

  auto* sweep = app.add_subcommand("sweep", "Sweep one scenario parameter");
  std::string param;
  double from = 0.0, to = 0.0;
  int points = 10;
  std::int64_t sweep_trials = 0;
  bool log_grid = false, linear_grid = false, no_micrb = false, redraw = false;
  std::string sweep_methods = "delay,mi,ds";
  sweep->add_option("--param", param, "carrier_frequency [Hz], bandwidth [Hz], tx_power [dBm] or num_bs")
      ->required()
      ->check(CLI::IsMember({"carrier_frequency", "bandwidth", "tx_power", "num_bs"}));
  sweep->add_option("--from", from, "First grid value")->required();
  sweep->add_option("--to", to, "Last grid value")->required();
  sweep->add_option("--points", points, "Number of grid points")->check(CLI::PositiveNumber);
  sweep->add_option("--trials", sweep_trials, "Estimator trials per point (0: bounds only)")
      ->check(CLI::NonNegativeNumber);
  sweep->add_option("--estimators", sweep_methods, "Comma-separated subset of delay,mi,ds, or none");
  sweep->add_flag("--log", log_grid, "Log-spaced grid (default for carrier_frequency and bandwidth)");
  sweep->add_flag("--linear", linear_grid, "Linearly spaced grid (default for tx_power and num_bs)");
  sweep->add_flag("--no-micrb", no_micrb, "Skip the mixed-integer bound");
  sweep->add_flag("--redraw-geometry", redraw, "Draw a new geometry at every point");
  sweep->add_flag("--bias-jacobian", bias_jacobian, "Include the finite-difference bias Jacobian");

  auto* llf = app.add_subcommand("llf-cut", "Likelihood along a line through the true position");
  std::string axis = "x";
  double half_width = 0.5;
  int cut_points = 2001;
  std::int64_t cut_trial = 0;
  llf->add_option("--axis", axis, "x, y, z or three comma-separated components");
  llf->add_option("--half-width", half_width, "Half-width of the cut in meters")->check(CLI::PositiveNumber);
  llf->add_option("--points", cut_points, "Number of points")->check(CLI::Range(2, 100000000));
  llf->add_option("--trial", cut_trial, "Noise realization")->check(CLI::NonNegativeNumber);

  auto* meas = app.add_subcommand("measurements", "Synthesized observations");
  meas->require_subcommand(1);
  auto* dump = meas->add_subcommand("dump", "Write synthesized observations as CSV");
  std::int64_t dump_trials = 1;
  dump->add_option("--trials", dump_trials, "Number of trials")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (e.get_exit_code() != 0) std::cerr << app.help();
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  try {
    if (print_defaults->parsed()) {
      Output out(g.out);
      out.stream() << config_to_text(SystemConfig{});
      return 0;
    }
    const SystemConfig cfg = resolve_config(g);

    if (bounds_eval->parsed()) {
      const ScenarioPoint p = make_scenario_point(cfg);
      BoundsReport report = p.bounds;
      std::optional<MicrbResult> detail;
      if (with_micrb) {
        MicrbOptions mo = MicrbOptions::from_config(cfg, g.threads);
        mo.bias_jacobian = bias_jacobian;
        detail = micrb(p.geometry, p.link_budget, cfg.wavelength_m(), p.bounds, mo);
        report.cov_mi = detail->cov_position;
        report.peb_mi = detail->peb;
        report.p_fix = detail->p_fix;
      }
      Output out(g.out);
      out.stream() << bounds_report_json(cfg, report, detail ? &*detail : nullptr).dump(2) << "\n";
      return 0;
    }

    if (estimate->parsed()) {
      const ScenarioPoint p = make_scenario_point(cfg);
      const auto records = run_trials(p, parse_method(method), trials, g.threads);
      Output out(g.out);
      write_trials_csv(out.stream(), cfg, records);
      return 0;
    }

    if (sweep->parsed()) {
      if (log_grid && linear_grid) throw ValidationError("--log and --linear are mutually exclusive");
      SweepSpec spec;
      spec.parameter = parse_parameter(param);
      const bool default_log =
          spec.parameter == SweepParameter::kCarrierFrequency || spec.parameter == SweepParameter::kBandwidth;
      spec.grid = make_grid(from, to, points, log_grid || (!linear_grid && default_log));
      spec.trials_per_point = sweep_trials;
      spec.micrb = !no_micrb;
      if (sweep_trials > 0) spec.estimators = parse_methods(sweep_methods);
      spec.base_config = cfg;
      spec.redraw_geometry = redraw;
      spec.bias_jacobian = bias_jacobian;
      spec.threads = g.threads;
      const auto rows = run_sweep(spec);
      Output out(g.out);
      write_sweep_csv(out.stream(), spec, rows);
      return 0;
    }

    if (llf->parsed()) {
      const auto cut = run_llf_cut(cfg, parse_axis(axis), half_width, cut_points, cut_trial);
      Output out(g.out);
      write_llf_csv(out.stream(), cfg, cut);
      return 0;
    }

    if (dump->parsed()) {
      const ScenarioPoint p = make_scenario_point(cfg);
      std::vector<MeasurementSet> sets;
      for (std::int64_t t = 0; t < dump_trials; ++t)
        sets.push_back(synthesize(p.geometry, p.link_budget, p.truth, p.wavelength_m(), cfg.noise_seed,
                                  static_cast<std::uint64_t>(t)));
      Output out(g.out);
      write_measurements_csv(out.stream(), cfg, sets);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::cerr << app.help();
  return 1;
}
