#pragma once

// Distance-domain time-of-arrival and wrapped carrier-phase observations.

#include "cpbounds/core.hpp"
#include "cpbounds/random.hpp"
#include "cpbounds/scenario.hpp"

#include <cmath>
#include <cstdint>

namespace cpbounds {

/// Unknown state in distance-domain units: clock bias in meters (c * B_ue)
/// and phase bias as a fraction of a cycle (phi_ue / 2pi).
struct StateVector {
  Vec3 position_m = Vec3::Zero();
  double clock_bias_m = 0.0;
  double phase_bias_frac = 0.0;

  /// [x, y, z, c*B, kappa]
  Vec to_vector() const {
    Vec s(5);
    s << position_m, clock_bias_m, phase_bias_frac;
    return s;
  }
  static StateVector from_vector(const Vec& s) {
    return StateVector{s.head<3>(), s(3), s(4)};
  }
};

/// Ground-truth state of a scenario.
inline StateVector true_state(const SystemConfig& cfg) {
  return StateVector{cfg.ue_position_m, cfg.clock_bias_s * kSpeedOfLight, cfg.resolved_phase_bias_rad() / kTwoPi};
}

struct CellWrap {
  double fraction_m;
  std::int64_t integer_part;
};

/// value = integer_part * lambda + fraction_m with fraction_m in [0, lambda).
inline CellWrap wrap_to_cell(double value_m, double wavelength_m) {
  if (!(wavelength_m > 0.0)) throw ValidationError("wavelength must be positive");
  double k = std::floor(value_m / wavelength_m);
  double frac = value_m - k * wavelength_m;
  if (frac < 0.0) {
    frac += wavelength_m;
    k -= 1.0;
  }
  if (frac >= wavelength_m) {
    frac -= wavelength_m;
    k += 1.0;
  }
  if (frac < 0.0) frac = 0.0;  // only reachable through -0.0 style roundoff
  return CellWrap{frac, static_cast<std::int64_t>(k)};
}

/// Wraps a distance residual into (-lambda/2, lambda/2].
inline double wrap_symmetric(double value_m, double wavelength_m) {
  double r = value_m - wavelength_m * std::round(value_m / wavelength_m);
  if (r <= -0.5 * wavelength_m) r += wavelength_m;
  if (r > 0.5 * wavelength_m) r -= wavelength_m;
  return r;
}

/// One snapshot of observations. The physical phase observable is stored
/// wrapped; y_theta = p - z*lambda where p is the unwrapped phase range and
/// z = floor(p / lambda) is kept for diagnostics. In the additive ambiguity
/// model y_theta = d + a*lambda + kappa*lambda + w the ambiguity is a = -z.
struct MeasurementSet {
  Vec y_tau_m;
  Vec y_theta_m;
  IntVector true_integers;
  double wavelength_m = 0.0;

  Eigen::Index size() const { return y_tau_m.size(); }
};

/// y_tau = d + c*B + w_tau, p = d + kappa*lambda + w_theta, y_theta = p mod lambda.
/// Noise for trial t comes from substream (noise_seed, t); each link draws
/// w_tau then w_theta from N(0, 1) scaled by its sigma.
inline MeasurementSet synthesize(const Geometry& geom, const LinkBudget& lb, const StateVector& state,
                                 double wavelength_m, std::uint64_t noise_seed, std::uint64_t trial_index) {
  const Eigen::Index m = geom.num_bs();
  if (lb.size() != m) throw ValidationError("link budget and geometry disagree on M");
  auto rng = substream(noise_seed, StreamTag::kNoise, trial_index);
  std::normal_distribution<double> normal(0.0, 1.0);
  MeasurementSet out;
  out.wavelength_m = wavelength_m;
  out.y_tau_m.resize(m);
  out.y_theta_m.resize(m);
  out.true_integers.resize(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    // Distance from the state's position, not the geometry's UE, so callers
    // can synthesize at perturbed states.
    const double d = (geom.bs_positions_m.col(i) - state.position_m).norm();
    const double w_tau = lb.sigma_tau_m(i) * normal(rng);
    const double w_theta = lb.sigma_theta_m(i) * normal(rng);
    out.y_tau_m(i) = d + state.clock_bias_m + w_tau;
    const double phase_range = d + state.phase_bias_frac * wavelength_m + w_theta;
    const CellWrap cell = wrap_to_cell(phase_range, wavelength_m);
    out.y_theta_m(i) = cell.fraction_m;
    out.true_integers[static_cast<std::size_t>(i)] = cell.integer_part;
  }
  return out;
}

/// Differenced ambiguity vector a_d = D a for the additive model, a = -z.
inline IntVector true_differenced_ambiguities(const MeasurementSet& meas) {
  IntVector out;
  out.reserve(meas.true_integers.size() - 1);
  for (std::size_t i = 1; i < meas.true_integers.size(); ++i)
    out.push_back(-(meas.true_integers[i] - meas.true_integers[0]));
  return out;
}

}  // namespace cpbounds
