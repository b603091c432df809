#pragma once

// Scenario configuration, base-station geometry and per-link noise budget.

#include "cpbounds/core.hpp"
#include "cpbounds/random.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

namespace cpbounds {

/// Radio and deployment parameters. Units are fixed by the field names.
struct SystemConfig {
  double carrier_frequency_hz = 28e9;
  double subcarrier_spacing_hz = 20e3;
  std::int64_t num_subcarriers = 300;
  double tx_power_dbm = 0.0;
  double noise_psd_dbm_hz = -174.0;
  double noise_figure_db = 13.0;
  std::int64_t num_bs = 7;
  double bs_placement_std_m = 100.0;
  Vec3 ue_position_m{0.0, 0.0, 5.0};
  double clock_bias_s = 1e-7;
  /// Unset means: drawn uniformly in [0, 2pi) from noise_seed.
  std::optional<double> phase_bias_rad;
  std::uint64_t geometry_seed = 1846;
  std::uint64_t noise_seed = 1;
  std::int64_t micrb_samples = 1000;

  double wavelength_m() const { return kSpeedOfLight / carrier_frequency_hz; }
  double bandwidth_hz() const { return static_cast<double>(num_subcarriers) * subcarrier_spacing_hz; }
  double tx_power_w() const { return 1e-3 * std::pow(10.0, tx_power_dbm / 10.0); }
  /// E_s = P_tx / (N * delta_f), joules per subcarrier.
  double energy_per_subcarrier_j() const { return tx_power_w() / bandwidth_hz(); }
  /// N_0 in W/Hz: PSD and noise figure add in dB.
  double noise_psd_w_hz() const { return 1e-3 * std::pow(10.0, (noise_psd_dbm_hz + noise_figure_db) / 10.0); }

  /// Phase bias in radians; draws it from noise_seed when not configured.
  double resolved_phase_bias_rad() const {
    if (phase_bias_rad) return *phase_bias_rad;
    auto rng = substream(noise_seed, StreamTag::kPhaseBias, 0);
    return std::uniform_real_distribution<double>(0.0, kTwoPi)(rng);
  }

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(name, "must be positive and finite");
    };
    auto finite = [](double v, const char* name) {
      if (!std::isfinite(v)) throw ConfigError(name, "must be finite");
    };
    positive(carrier_frequency_hz, "carrier_frequency_hz");
    positive(subcarrier_spacing_hz, "subcarrier_spacing_hz");
    positive(bs_placement_std_m, "bs_placement_std_m");
    finite(tx_power_dbm, "tx_power_dbm");
    finite(noise_psd_dbm_hz, "noise_psd_dbm_hz");
    finite(noise_figure_db, "noise_figure_db");
    finite(clock_bias_s, "clock_bias_s");
    if (num_subcarriers < 1) throw ConfigError("num_subcarriers", "must be a positive integer");
    if (num_bs < 4) throw ConfigError("num_bs", "at least 4 base stations are needed (5 unknowns)");
    if (micrb_samples < 1) throw ConfigError("micrb_samples", "must be a positive integer");
    if (!ue_position_m.allFinite()) throw ConfigError("ue_position_m", "must be finite");
    const double lambda = wavelength_m();
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("carrier_frequency_hz", "wavelength not finite");
    if (!(bandwidth_hz() < carrier_frequency_hz))
      throw ConfigError("num_subcarriers", "bandwidth N*delta_f must stay below the carrier frequency");
    if (phase_bias_rad && !(*phase_bias_rad >= 0.0 && *phase_bias_rad < kTwoPi))
      throw ConfigError("phase_bias_rad", "must lie in [0, 2pi)");
  }
};

// ---------------------------------------------------------------------------
// Structured-text configuration (JSON object, exact SystemConfig field names).

inline nlohmann::ordered_json config_to_json(const SystemConfig& cfg) {
  nlohmann::ordered_json j;
  j["carrier_frequency_hz"] = cfg.carrier_frequency_hz;
  j["subcarrier_spacing_hz"] = cfg.subcarrier_spacing_hz;
  j["num_subcarriers"] = cfg.num_subcarriers;
  j["tx_power_dbm"] = cfg.tx_power_dbm;
  j["noise_psd_dbm_hz"] = cfg.noise_psd_dbm_hz;
  j["noise_figure_db"] = cfg.noise_figure_db;
  j["num_bs"] = cfg.num_bs;
  j["bs_placement_std_m"] = cfg.bs_placement_std_m;
  j["ue_position_m"] = {cfg.ue_position_m.x(), cfg.ue_position_m.y(), cfg.ue_position_m.z()};
  j["clock_bias_s"] = cfg.clock_bias_s;
  if (cfg.phase_bias_rad)
    j["phase_bias_rad"] = *cfg.phase_bias_rad;
  else
    j["phase_bias_rad"] = nullptr;
  j["geometry_seed"] = cfg.geometry_seed;
  j["noise_seed"] = cfg.noise_seed;
  j["micrb_samples"] = cfg.micrb_samples;
  return j;
}

inline std::string config_to_text(const SystemConfig& cfg) { return config_to_json(cfg).dump(2) + "\n"; }

namespace detail {

template <typename T>
T read_field(const nlohmann::json& value, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, double>) {
      if (!value.is_number()) throw ConfigError(key, "expected a number");
      return value.get<double>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!value.is_number_unsigned() && !(value.is_number_integer() && value.get<std::int64_t>() >= 0))
        throw ConfigError(key, "expected a non-negative integer");
      return value.get<std::uint64_t>();
    } else {
      if (!value.is_number_integer()) throw ConfigError(key, "expected an integer");
      return value.get<T>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(key, e.what());
  }
}

}  // namespace detail

/// Applies the fields present in `j` on top of the defaults.
inline SystemConfig config_from_json(const nlohmann::json& j) {
  SystemConfig cfg;
  if (j.is_null()) return cfg;
  if (!j.is_object()) throw ConfigError("<root>", "configuration must be an object");
  using detail::read_field;
  for (const auto& [key, value] : j.items()) {
    if (key == "carrier_frequency_hz") cfg.carrier_frequency_hz = read_field<double>(value, key);
    else if (key == "subcarrier_spacing_hz") cfg.subcarrier_spacing_hz = read_field<double>(value, key);
    else if (key == "num_subcarriers") cfg.num_subcarriers = read_field<std::int64_t>(value, key);
    else if (key == "tx_power_dbm") cfg.tx_power_dbm = read_field<double>(value, key);
    else if (key == "noise_psd_dbm_hz") cfg.noise_psd_dbm_hz = read_field<double>(value, key);
    else if (key == "noise_figure_db") cfg.noise_figure_db = read_field<double>(value, key);
    else if (key == "num_bs") cfg.num_bs = read_field<std::int64_t>(value, key);
    else if (key == "bs_placement_std_m") cfg.bs_placement_std_m = read_field<double>(value, key);
    else if (key == "ue_position_m") {
      if (!value.is_array() || value.size() != 3) throw ConfigError(key, "expected an array of 3 numbers");
      for (int i = 0; i < 3; ++i) cfg.ue_position_m(i) = read_field<double>(value[static_cast<std::size_t>(i)], key);
    } else if (key == "clock_bias_s") cfg.clock_bias_s = read_field<double>(value, key);
    else if (key == "phase_bias_rad") {
      if (value.is_null()) cfg.phase_bias_rad.reset();
      else cfg.phase_bias_rad = read_field<double>(value, key);
    } else if (key == "geometry_seed") cfg.geometry_seed = read_field<std::uint64_t>(value, key);
    else if (key == "noise_seed") cfg.noise_seed = read_field<std::uint64_t>(value, key);
    else if (key == "micrb_samples") cfg.micrb_samples = read_field<std::int64_t>(value, key);
    else throw ConfigError(key, "unknown field");
  }
  cfg.validate();
  return cfg;
}

/// Parses configuration text. Empty (or whitespace-only) text yields the defaults.
inline SystemConfig load_config_text(std::string_view text) {
  if (text.find_first_not_of(" \t\r\n") == std::string_view::npos) {
    SystemConfig cfg;
    cfg.validate();
    return cfg;
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text.begin(), text.end(), nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<parse>", e.what());
  }
  return config_from_json(j);
}

/// Accepts either a path or inline text (anything starting with '{').
inline SystemConfig load_config(std::string_view path_or_text) {
  const auto first = path_or_text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return load_config_text("");
  if (path_or_text[first] == '{') return load_config_text(path_or_text);
  std::ifstream in{std::string(path_or_text)};
  if (!in) throw ConfigError("<file>", "cannot open '" + std::string(path_or_text) + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return load_config_text(buffer.str());
}

/// 64-bit FNV-1a over the canonical config text; stable across platforms.
inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t config_hash(const SystemConfig& cfg) { return fnv1a64(config_to_json(cfg).dump()); }

// ---------------------------------------------------------------------------
// Geometry

struct Geometry {
  Mat bs_positions_m;  // 3 x M
  Vec3 ue_position_m;
  Vec distances_m;  // M
  Mat unit_vectors;  // 3 x M, columns (x_ue - x_bs,m) / d_m
  int redraws = 0;

  Eigen::Index num_bs() const { return bs_positions_m.cols(); }

  /// First `m` base stations (used by the progressive num_bs sweep).
  Geometry prefix(Eigen::Index m) const;
};

/// Builds distances and unit vectors for the given placement.
inline Geometry make_geometry(const Mat& bs_positions_m, const Vec3& ue_position_m) {
  if (bs_positions_m.rows() != 3) throw ValidationError("base-station positions must be 3 x M");
  Geometry g;
  g.bs_positions_m = bs_positions_m;
  g.ue_position_m = ue_position_m;
  const Eigen::Index m = bs_positions_m.cols();
  g.distances_m.resize(m);
  g.unit_vectors.resize(3, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Vec3 diff = ue_position_m - bs_positions_m.col(i);
    const double d = diff.norm();
    if (!(d > 0.0)) throw ValidationError("base station " + std::to_string(i) + " is co-located with the UE");
    g.distances_m(i) = d;
    g.unit_vectors.col(i) = diff / d;
  }
  return g;
}

inline Geometry Geometry::prefix(Eigen::Index m) const {
  if (m > num_bs() || m < 1) throw ValidationError("prefix larger than the drawn geometry");
  Geometry g = make_geometry(bs_positions_m.leftCols(m), ue_position_m);
  g.redraws = redraws;
  return g;
}

/// Draws M base stations i.i.d. N(0, std^2 I) around the origin. A draw closer
/// than 1 m to the UE is redrawn (and counted). BS k always consumes the same
/// substream position, so a larger M extends a smaller draw.
inline Geometry sample_geometry(const SystemConfig& cfg) {
  cfg.validate();
  auto rng = substream(cfg.geometry_seed, StreamTag::kGeometry, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat bs(3, cfg.num_bs);
  int redraws = 0;
  for (Eigen::Index m = 0; m < cfg.num_bs; ++m) {
    for (;;) {
      Vec3 p;
      for (int k = 0; k < 3; ++k) p(k) = cfg.bs_placement_std_m * normal(rng);
      if ((p - cfg.ue_position_m).norm() >= 1.0) {
        bs.col(m) = p;
        break;
      }
      ++redraws;
    }
  }
  Geometry g = make_geometry(bs, cfg.ue_position_m);
  g.redraws = redraws;
  return g;
}

// ---------------------------------------------------------------------------
// Link budget

/// Per-link SNR and distance-domain noise standard deviations.
struct LinkBudget {
  Vec snr_linear;
  Vec sigma_tau_m;
  Vec sigma_theta_m;
  Vec rho;

  Eigen::Index size() const { return snr_linear.size(); }
};

/// Free-space gain rho = lambda / (4 pi d), SNR = N E_s rho^2 / N_0,
/// sigma_tau  = sqrt(3 c^2 / (2 SNR pi^2 W^2)),
/// sigma_theta = lambda / (2 pi sqrt(2 SNR)).
inline LinkBudget compute_link_budget(const SystemConfig& cfg, const Geometry& geom) {
  const double lambda = cfg.wavelength_m();
  const double w = cfg.bandwidth_hz();
  const double es = cfg.energy_per_subcarrier_j();
  const double n0 = cfg.noise_psd_w_hz();
  const double n = static_cast<double>(cfg.num_subcarriers);
  const Eigen::Index m = geom.num_bs();
  LinkBudget lb;
  lb.rho.resize(m);
  lb.snr_linear.resize(m);
  lb.sigma_tau_m.resize(m);
  lb.sigma_theta_m.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double rho = lambda / (4.0 * kPi * geom.distances_m(i));
    const double snr = n * es * rho * rho / n0;
    lb.rho(i) = rho;
    lb.snr_linear(i) = snr;
    lb.sigma_tau_m(i) = std::sqrt(3.0 * kSpeedOfLight * kSpeedOfLight / (2.0 * snr * kPi * kPi * w * w));
    lb.sigma_theta_m(i) = lambda / (kTwoPi * std::sqrt(2.0 * snr));
  }
  return lb;
}

/// Exact per-link delay Fisher information (1/s^2) from the centred subcarrier
/// sum, 2/N_0 E_s rho^2 sum_n (2 pi n delta_f)^2.
inline double exact_delay_information(const SystemConfig& cfg, double rho) {
  const double n = static_cast<double>(cfg.num_subcarriers);
  double sum = 0.0;
  for (std::int64_t k = 0; k < cfg.num_subcarriers; ++k) {
    const double idx = static_cast<double>(k) - (n - 1.0) / 2.0;
    const double omega = kTwoPi * idx * cfg.subcarrier_spacing_hz;
    sum += omega * omega;
  }
  return 2.0 / cfg.noise_psd_w_hz() * cfg.energy_per_subcarrier_j() * rho * rho * sum;
}

}  // namespace cpbounds
