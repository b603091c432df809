#pragma once

// Parameter sweeps, likelihood cuts and per-trial estimator runs, plus the
// CSV / JSON writers used by the command-line tool.

#include "cpbounds/bounds.hpp"
#include "cpbounds/core.hpp"
#include "cpbounds/estimators.hpp"
#include "cpbounds/measurements.hpp"
#include "cpbounds/micrb.hpp"
#include "cpbounds/parallel.hpp"
#include "cpbounds/scenario.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace cpbounds {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kSweepSchema = 1;

/// Shortest decimal that round-trips (at most 17 significant digits).
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Estimator trials

inline EstimatorMethod parse_method(std::string_view s) {
  if (s == "delay" || s == "delay_only") return EstimatorMethod::kDelayOnly;
  if (s == "mi" || s == "mixed_integer") return EstimatorMethod::kMixedInteger;
  if (s == "ds" || s == "directional") return EstimatorMethod::kDirectional;
  throw ValidationError("unknown estimator '" + std::string(s) + "' (expected delay, mi or ds)");
}

struct TrialRecord {
  std::int64_t trial = 0;
  EstimatorMethod method = EstimatorMethod::kDelayOnly;
  Vec3 position_m = Vec3::Zero();
  double clock_bias_m = 0.0;
  double position_error_m = 0.0;
  bool converged = false;
  std::optional<bool> fixed_correctly;
};

/// Everything a trial needs that does not depend on the noise draw.
struct ScenarioPoint {
  SystemConfig config;
  Geometry geometry;
  LinkBudget link_budget;
  BoundsReport bounds;
  StateVector truth;

  double wavelength_m() const { return config.wavelength_m(); }
};

inline ScenarioPoint make_scenario_point(const SystemConfig& cfg, const Geometry& geom) {
  cfg.validate();
  if (geom.num_bs() != cfg.num_bs) throw ValidationError("geometry does not match num_bs");
  ScenarioPoint p{cfg, geom, compute_link_budget(cfg, geom), {}, true_state(cfg)};
  p.bounds = compute_classical_bounds(p.geometry, p.link_budget, cfg.wavelength_m());
  return p;
}

inline ScenarioPoint make_scenario_point(const SystemConfig& cfg) { return make_scenario_point(cfg, sample_geometry(cfg)); }

struct EstimatorSettings {
  DelayOnlyOptions delay;
  MixedIntegerOptions mixed_integer;
  DirectionalOptions directional;
};

inline TrialRecord run_trial(const ScenarioPoint& p, EstimatorMethod method, std::int64_t trial,
                             const EstimatorSettings& settings = {}) {
  const MeasurementSet meas = synthesize(p.geometry, p.link_budget, p.truth, p.wavelength_m(), p.config.noise_seed,
                                         static_cast<std::uint64_t>(trial));
  EstimateResult e;
  switch (method) {
    case EstimatorMethod::kDelayOnly:
      e = estimate_delay_only(meas, p.geometry.bs_positions_m, p.link_budget, settings.delay);
      break;
    case EstimatorMethod::kMixedInteger:
      e = estimate_mixed_integer(meas, p.geometry, p.link_budget,
                                 make_ambiguity_structure(p.geometry.num_bs(), p.wavelength_m()),
                                 settings.mixed_integer);
      break;
    case EstimatorMethod::kDirectional:
      e = estimate_directional(meas, p.geometry, p.link_budget, p.bounds.cov_known, p.bounds.cov_delay,
                               settings.directional);
      break;
  }
  TrialRecord r;
  r.trial = trial;
  r.method = method;
  r.position_m = e.state.position_m;
  r.clock_bias_m = e.state.clock_bias_m;
  r.position_error_m = (e.state.position_m - p.truth.position_m).norm();
  r.converged = e.converged;
  if (e.fixed_integers) r.fixed_correctly = *e.fixed_integers == true_differenced_ambiguities(meas);
  return r;
}

/// Trials 0..trials-1; record i always uses noise substream i.
inline std::vector<TrialRecord> run_trials(const ScenarioPoint& p, EstimatorMethod method, std::int64_t trials,
                                           unsigned threads = 1, const EstimatorSettings& settings = {}) {
  if (trials < 1) throw ValidationError("trial count must be positive");
  std::vector<TrialRecord> out(static_cast<std::size_t>(trials));
  parallel_for(out.size(), threads,
               [&](std::size_t i) { out[i] = run_trial(p, method, static_cast<std::int64_t>(i), settings); });
  return out;
}

struct ErrorStatistics {
  double rmse = 0.0;
  /// Monte-Carlo standard error of the RMSE (delta method).
  double rmse_stderr = 0.0;
  std::int64_t trials = 0;
  std::int64_t converged = 0;
};

inline ErrorStatistics error_statistics(const std::vector<TrialRecord>& records) {
  ErrorStatistics s;
  s.trials = static_cast<std::int64_t>(records.size());
  if (records.empty()) return s;
  double sum = 0.0, sum2 = 0.0;
  for (const auto& r : records) {
    const double e2 = r.position_error_m * r.position_error_m;
    sum += e2;
    sum2 += e2 * e2;
    s.converged += r.converged ? 1 : 0;
  }
  const double n = static_cast<double>(records.size());
  const double mse = sum / n;
  s.rmse = std::sqrt(mse);
  const double var = std::max(0.0, sum2 / n - mse * mse);
  s.rmse_stderr = s.rmse > 0.0 ? std::sqrt(var / n) / (2.0 * s.rmse) : 0.0;
  return s;
}

inline void write_trials_csv(std::ostream& os, const SystemConfig& cfg, const std::vector<TrialRecord>& records) {
  os << "# cpbounds " << kToolVersion << " schema=estimate/" << kSweepSchema << " config_hash=" << hex64(config_hash(cfg))
     << " geometry_seed=" << cfg.geometry_seed << " noise_seed=" << cfg.noise_seed << "\n";
  os << "trial,method,x_m,y_m,z_m,clock_bias_m,position_error_m,fixed_correctly\n";
  for (const auto& r : records) {
    os << r.trial << ',' << method_tag(r.method) << ',' << format_number(r.position_m(0)) << ','
       << format_number(r.position_m(1)) << ',' << format_number(r.position_m(2)) << ','
       << format_number(r.clock_bias_m) << ',' << format_number(r.position_error_m) << ',';
    if (r.fixed_correctly) os << (*r.fixed_correctly ? "true" : "false");
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepParameter { kCarrierFrequency, kBandwidth, kTxPower, kNumBs };

inline const char* parameter_name(SweepParameter p) {
  switch (p) {
    case SweepParameter::kCarrierFrequency: return "carrier_frequency";
    case SweepParameter::kBandwidth: return "bandwidth";
    case SweepParameter::kTxPower: return "tx_power";
    case SweepParameter::kNumBs: return "num_bs";
  }
  return "unknown";
}

inline SweepParameter parse_parameter(std::string_view s) {
  for (auto p : {SweepParameter::kCarrierFrequency, SweepParameter::kBandwidth, SweepParameter::kTxPower,
                 SweepParameter::kNumBs})
    if (s == parameter_name(p)) return p;
  throw ValidationError("unknown sweep parameter '" + std::string(s) +
                        "' (expected carrier_frequency, bandwidth, tx_power or num_bs)");
}

/// Sets the swept field. Units: Hz, Hz, dBm, count. A bandwidth is realized
/// through the subcarrier count at fixed spacing.
inline SystemConfig apply_parameter(SystemConfig cfg, SweepParameter p, double value) {
  switch (p) {
    case SweepParameter::kCarrierFrequency: cfg.carrier_frequency_hz = value; break;
    case SweepParameter::kBandwidth: {
      const double n = std::round(value / cfg.subcarrier_spacing_hz);
      if (!(n >= 1.0) || n > 9e15) throw ValidationError("bandwidth must be at least one subcarrier");
      cfg.num_subcarriers = static_cast<std::int64_t>(n);
      break;
    }
    case SweepParameter::kTxPower: cfg.tx_power_dbm = value; break;
    case SweepParameter::kNumBs: {
      const double m = std::round(value);
      if (std::abs(m - value) > 1e-9) throw ValidationError("num_bs sweep values must be integers");
      cfg.num_bs = static_cast<std::int64_t>(m);
      break;
    }
  }
  cfg.validate();
  return cfg;
}

/// The value actually realized by apply_parameter (bandwidth is quantized).
inline double realized_value(const SystemConfig& cfg, SweepParameter p) {
  switch (p) {
    case SweepParameter::kCarrierFrequency: return cfg.carrier_frequency_hz;
    case SweepParameter::kBandwidth: return cfg.bandwidth_hz();
    case SweepParameter::kTxPower: return cfg.tx_power_dbm;
    case SweepParameter::kNumBs: return static_cast<double>(cfg.num_bs);
  }
  return 0.0;
}

inline std::vector<double> make_grid(double from, double to, int points, bool log_spaced) {
  if (points < 1) throw ValidationError("grid needs at least one point");
  if (!std::isfinite(from) || !std::isfinite(to)) throw ValidationError("grid limits must be finite");
  if (log_spaced && !(from > 0.0 && to > 0.0)) throw ValidationError("log grid limits must be positive");
  std::vector<double> g(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) {
    const double t = points == 1 ? 0.0 : static_cast<double>(i) / (points - 1);
    g[static_cast<std::size_t>(i)] =
        log_spaced ? std::exp(std::log(from) + t * (std::log(to) - std::log(from))) : from + t * (to - from);
  }
  if (points > 1) {
    g.front() = from;
    g.back() = to;
  }
  return g;
}

struct SweepSpec {
  SweepParameter parameter = SweepParameter::kTxPower;
  std::vector<double> grid;
  std::int64_t trials_per_point = 0;
  bool micrb = true;
  std::set<EstimatorMethod> estimators;
  SystemConfig base_config;
  /// Draw a new geometry at every point instead of one per sweep.
  bool redraw_geometry = false;
  bool bias_jacobian = false;
  unsigned threads = 1;
  EstimatorSettings settings;

  void validate() const {
    base_config.validate();
    if (grid.empty()) throw ValidationError("sweep grid is empty");
    const bool up = grid.size() < 2 || grid[1] > grid[0];
    for (std::size_t i = 1; i < grid.size(); ++i)
      if (up ? !(grid[i] > grid[i - 1]) : !(grid[i] < grid[i - 1]))
        throw ValidationError("sweep grid must be strictly monotone");
    if (!estimators.empty() && trials_per_point < 1)
      throw ValidationError("estimators requested with no trials per point");
    if (trials_per_point < 0) throw ValidationError("trial count must be non-negative");
  }
};

struct EstimatorColumn {
  double rmse = 0.0;
  double rmse_stderr = 0.0;
  std::int64_t converged = 0;
};

struct SweepRow {
  std::string parameter;
  double value = 0.0;
  double peb_delay = std::numeric_limits<double>::quiet_NaN();
  double peb_known = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> peb_mi;
  std::optional<double> p_fix;
  std::optional<EstimatorColumn> delay, mixed_integer, directional;
  std::int64_t trials = 0;
  std::uint64_t geometry_seed = 0;
  std::string status = "ok";

  std::optional<double> rmse(EstimatorMethod m) const {
    const auto& c = m == EstimatorMethod::kDelayOnly ? delay : m == EstimatorMethod::kMixedInteger ? mixed_integer : directional;
    return c ? std::optional<double>(c->rmse) : std::nullopt;
  }
};

namespace detail {

inline std::string status_token(const std::string& what) {
  std::string s = what;
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r' || c == '"') c = ' ';
  return s;
}

inline void append_status(std::string& status, const std::string& item) {
  if (status == "ok") status.clear();
  if (!status.empty()) status += "; ";
  status += item;
}

}  // namespace detail

/// One row per grid value. Under the fixed-geometry policy the BSs are drawn
/// once from the base config (num_bs sweeps draw the largest M and use
/// prefixes). Failures at a point are recorded in its status.
inline std::vector<SweepRow> run_sweep(const SweepSpec& spec) {
  spec.validate();
  Geometry shared;
  if (!spec.redraw_geometry) {
    SystemConfig draw = spec.base_config;
    if (spec.parameter == SweepParameter::kNumBs) {
      double m_max = static_cast<double>(draw.num_bs);
      for (double v : spec.grid) m_max = std::max(m_max, std::round(v));
      draw.num_bs = static_cast<std::int64_t>(m_max);
    }
    shared = sample_geometry(draw);
  }

  std::vector<SweepRow> rows;
  rows.reserve(spec.grid.size());
  for (double value : spec.grid) {
    SweepRow row;
    row.parameter = parameter_name(spec.parameter);
    row.value = value;
    row.geometry_seed = spec.base_config.geometry_seed;
    row.trials = spec.trials_per_point;
    try {
      const SystemConfig cfg = apply_parameter(spec.base_config, spec.parameter, value);
      row.value = realized_value(cfg, spec.parameter);
      const Geometry geom = spec.redraw_geometry ? sample_geometry(cfg) : shared.prefix(cfg.num_bs);
      ScenarioPoint point = make_scenario_point(cfg, geom);
      row.peb_delay = point.bounds.peb_delay;
      row.peb_known = point.bounds.peb_known;
      if (spec.micrb) {
        try {
          MicrbOptions mo = MicrbOptions::from_config(cfg, spec.threads);
          mo.bias_jacobian = spec.bias_jacobian;
          const MicrbResult mi = micrb(point.geometry, point.link_budget, cfg.wavelength_m(), point.bounds, mo);
          row.peb_mi = mi.peb;
          row.p_fix = mi.p_fix;
        } catch (const std::exception& e) {
          detail::append_status(row.status, std::string("mi: ") + detail::status_token(e.what()));
        }
      }
      for (EstimatorMethod m : spec.estimators) {
        try {
          const ErrorStatistics st =
              error_statistics(run_trials(point, m, spec.trials_per_point, spec.threads, spec.settings));
          EstimatorColumn col{st.rmse, st.rmse_stderr, st.converged};
          if (m == EstimatorMethod::kDelayOnly) row.delay = col;
          else if (m == EstimatorMethod::kMixedInteger) row.mixed_integer = col;
          else row.directional = col;
        } catch (const std::exception& e) {
          detail::append_status(row.status, std::string(method_tag(m)) + ": " + detail::status_token(e.what()));
        }
      }
    } catch (const std::exception& e) {
      detail::append_status(row.status, detail::status_token(e.what()));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_sweep_csv(std::ostream& os, const SweepSpec& spec, const std::vector<SweepRow>& rows) {
  os << "# cpbounds " << kToolVersion << " schema=sweep/" << kSweepSchema
     << " config_hash=" << hex64(config_hash(spec.base_config)) << " geometry_seed=" << spec.base_config.geometry_seed
     << " noise_seed=" << spec.base_config.noise_seed << " param=" << parameter_name(spec.parameter)
     << " geometry=" << (spec.redraw_geometry ? "redraw" : "fixed") << "\n";
  os << "param,value,peb_delay,peb_known,peb_mi,p_fix,rmse_delay,rmse_mi,rmse_ds,trials,status\n";
  for (const auto& r : rows) {
    os << r.parameter << ',' << format_number(r.value) << ',' << format_number(r.peb_delay) << ','
       << format_number(r.peb_known) << ',' << format_optional(r.peb_mi) << ',' << format_optional(r.p_fix) << ','
       << format_optional(r.rmse(EstimatorMethod::kDelayOnly)) << ','
       << format_optional(r.rmse(EstimatorMethod::kMixedInteger)) << ','
       << format_optional(r.rmse(EstimatorMethod::kDirectional)) << ',' << r.trials << ',' << r.status << '\n';
  }
}

// ---------------------------------------------------------------------------
// Likelihood cuts

struct LlfPoint {
  double offset_m = 0.0;
  double nll_delay = 0.0;     // B profiled
  double nll_combined = 0.0;  // B and phi profiled
};

/// NLLs along center + t * axis / |axis| for t evenly spaced in [-half_width, half_width].
inline std::vector<LlfPoint> llf_cut(const MeasurementSet& meas, const Mat& bs_positions_m, const LinkBudget& lb,
                                     const Vec3& center, const Vec3& axis, double half_width_m, int points) {
  detail::check_measurements(meas, bs_positions_m, lb);
  if (!(axis.norm() > 0.0)) throw ValidationError("cut axis must be nonzero");
  if (!(half_width_m > 0.0)) throw ValidationError("cut half-width must be positive");
  if (points < 2) throw ValidationError("cut needs at least 2 points");
  const Vec3 dir = axis.normalized();
  const Vec w_tau = lb.sigma_tau_m.array().square().inverse();
  const detail::ProfiledNll combined{meas, bs_positions_m, w_tau, von_mises_concentration(lb, meas.wavelength_m),
                                     kTwoPi / meas.wavelength_m};
  std::vector<LlfPoint> out(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) {
    const double t = -half_width_m + 2.0 * half_width_m * i / (points - 1);
    const Vec3 x = center + t * dir;
    out[static_cast<std::size_t>(i)] = {t, detail::delay_cost_profiled(x, meas, bs_positions_m, w_tau), combined(x)};
  }
  return out;
}

/// Cut through the true UE position for trial `trial` of the configured scenario.
inline std::vector<LlfPoint> run_llf_cut(const SystemConfig& cfg, const Vec3& axis, double half_width_m, int points,
                                         std::int64_t trial = 0) {
  const ScenarioPoint p = make_scenario_point(cfg);
  const MeasurementSet meas = synthesize(p.geometry, p.link_budget, p.truth, p.wavelength_m(), cfg.noise_seed,
                                         static_cast<std::uint64_t>(trial));
  return llf_cut(meas, p.geometry.bs_positions_m, p.link_budget, p.truth.position_m, axis, half_width_m, points);
}

inline void write_llf_csv(std::ostream& os, const SystemConfig& cfg, const std::vector<LlfPoint>& cut) {
  os << "# cpbounds " << kToolVersion << " schema=llf/" << kSweepSchema << " config_hash=" << hex64(config_hash(cfg))
     << " geometry_seed=" << cfg.geometry_seed << " noise_seed=" << cfg.noise_seed << "\n";
  os << "offset_m,nll_delay,nll_combined\n";
  for (const auto& p : cut)
    os << format_number(p.offset_m) << ',' << format_number(p.nll_delay) << ',' << format_number(p.nll_combined) << '\n';
}

// ---------------------------------------------------------------------------
// Reports

inline void write_measurements_csv(std::ostream& os, const SystemConfig& cfg, const std::vector<MeasurementSet>& sets) {
  os << "# cpbounds " << kToolVersion << " schema=measurements/" << kSweepSchema
     << " config_hash=" << hex64(config_hash(cfg)) << " geometry_seed=" << cfg.geometry_seed
     << " noise_seed=" << cfg.noise_seed << "\n";
  os << "trial,bs_index,y_tau_m,y_theta_m,z_true\n";
  char buf[64];
  for (std::size_t t = 0; t < sets.size(); ++t)
    for (Eigen::Index i = 0; i < sets[t].size(); ++i) {
      os << t << ',' << i << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", sets[t].y_tau_m(i));
      os << buf << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", sets[t].y_theta_m(i));
      os << buf << ',' << sets[t].true_integers[static_cast<std::size_t>(i)] << '\n';
    }
}

inline nlohmann::ordered_json bounds_report_json(const SystemConfig& cfg, const BoundsReport& r,
                                                 const MicrbResult* mi = nullptr, std::size_t top = 5) {
  nlohmann::ordered_json j;
  j["tool"] = std::string("cpbounds ") + kToolVersion;
  j["config_hash"] = hex64(config_hash(cfg));
  j["num_bs"] = cfg.num_bs;
  j["geometry_seed"] = cfg.geometry_seed;
  j["noise_seed"] = cfg.noise_seed;
  j["peb_delay"] = r.peb_delay;
  j["peb_known"] = r.peb_known;
  j["cond_known"] = r.cond_known;
  j["cond_delay"] = r.cond_delay;
  if (r.peb_mi) j["peb_mi"] = *r.peb_mi;
  if (r.p_fix) j["p_fix"] = *r.p_fix;
  if (mi) {
    j["micrb_samples"] = mi->samples;
    nlohmann::ordered_json list = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < std::min(top, mi->histogram.size()); ++i) {
      nlohmann::ordered_json e;
      e["delta"] = mi->histogram[i].delta;
      e["frequency"] = static_cast<double>(mi->histogram[i].count) / static_cast<double>(mi->samples);
      list.push_back(e);
    }
    j["top_delta"] = list;
  }
  return j;
}

}  // namespace cpbounds
