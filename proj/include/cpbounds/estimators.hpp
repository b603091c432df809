#pragma once

// Reference position estimators: delay-only (TDoA with a common clock
// bias), mixed-integer (float solve, integer fix, re-solve) and a grid search
// over the directional (von Mises) likelihood of the wrapped phases.

#include "cpbounds/core.hpp"
#include "cpbounds/ils.hpp"
#include "cpbounds/measurements.hpp"
#include "cpbounds/micrb.hpp"
#include "cpbounds/scenario.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace cpbounds {

enum class EstimatorMethod { kDelayOnly, kMixedInteger, kDirectional };

inline const char* method_tag(EstimatorMethod m) {
  switch (m) {
    case EstimatorMethod::kDelayOnly: return "delay_only";
    case EstimatorMethod::kMixedInteger: return "mixed_integer";
    case EstimatorMethod::kDirectional: return "directional";
  }
  return "unknown";
}

struct EstimateResult {
  StateVector state;
  bool converged = false;
  int iterations = 0;
  EstimatorMethod method = EstimatorMethod::kDelayOnly;
  /// Differenced ambiguities a_d = D a of the additive model (mixed integer).
  std::optional<IntVector> fixed_integers;
  /// Final value of the method's own objective.
  double objective = std::numeric_limits<double>::quiet_NaN();
};

/// Thrown when a requested grid would exceed the point budget.
class GridTooLarge : public ValidationError {
 public:
  GridTooLarge(double points, double bytes)
      : ValidationError("directional grid of " + std::to_string(points) + " points exceeds the limit (" +
                        std::to_string(bytes / 1e9) + " GB to hold every objective value); increase the step or shrink the box"),
        points_(points) {}
  double points() const { return points_; }

 private:
  double points_;
};

namespace detail {

struct LmResult {
  Vec params;
  double cost = 0.0;  // 0.5 * ||r||^2
  int iterations = 0;
  bool converged = false;
};

/// Levenberg-Marquardt on whitened residuals with Marquardt (diagonal)
/// scaling. f(p, r, J) fills r(p) and dr/dp. Converged means the undamped
/// Gauss-Newton step is below xtol relative to |p|.
template <class F>
LmResult levenberg_marquardt(F&& f, Vec p, int max_iterations, double xtol = 1e-12) {
  Vec r;
  Mat j;
  f(p, r, j);
  double cost = 0.5 * r.squaredNorm();
  double mu = 1e-3;
  double nu = 2.0;
  LmResult out;
  for (int it = 1; it <= max_iterations; ++it) {
    out.iterations = it;
    const Mat jtj = j.transpose() * j;
    const Vec g = j.transpose() * r;
    const Vec scale = jtj.diagonal().cwiseMax(1e-300);
    const Vec gn = -jtj.ldlt().solve(g);
    if (!(g.lpNorm<Eigen::Infinity>() > 0.0) || (gn.allFinite() && gn.norm() <= xtol * (p.norm() + xtol))) {
      out.converged = true;
      break;
    }
    bool accepted = false;
    while (!accepted && mu < 1e30) {
      Mat lhs = jtj;
      lhs.diagonal() += mu * scale;
      const Vec dp = -lhs.ldlt().solve(g);
      if (!dp.allFinite()) {
        mu *= nu;
        nu *= 2.0;
        continue;
      }
      Vec r_new;
      Mat j_new;
      const Vec trial = p + dp;
      f(trial, r_new, j_new);
      const double cost_new = 0.5 * r_new.squaredNorm();
      // Predicted decrease of the damped quadratic model.
      const double predicted = 0.5 * dp.dot(mu * scale.cwiseProduct(dp) - g);
      if (std::isfinite(cost_new) && cost_new < cost) {
        const double rho = predicted > 0.0 ? (cost - cost_new) / predicted : 1.0;
        p = trial;
        r = std::move(r_new);
        j = std::move(j_new);
        cost = cost_new;
        mu *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
        mu = std::max(mu, 1e-15);
        nu = 2.0;
        accepted = true;
      } else if (std::isfinite(cost_new) && cost_new == cost && dp.norm() <= xtol * (p.norm() + xtol)) {
        out.converged = true;
        break;
      } else {
        mu *= nu;
        nu *= 2.0;
      }
    }
    if (out.converged) break;
    if (!accepted) {
      // No decrease at machine precision: p is a stationary point.
      out.converged = true;
      break;
    }
  }
  out.params = std::move(p);
  out.cost = cost;
  return out;
}

inline void check_measurements(const MeasurementSet& meas, const Mat& bs_positions_m, const LinkBudget& lb) {
  const Eigen::Index m = bs_positions_m.cols();
  if (m < 4) throw ValidationError("at least 4 base stations are required (5 unknowns)");
  if (bs_positions_m.rows() != 3) throw ValidationError("base-station positions must be 3 x M");
  if (meas.y_tau_m.size() != m || meas.y_theta_m.size() != m || lb.size() != m)
    throw ValidationError("measurements, link budget and geometry disagree on M");
  if (!(meas.wavelength_m > 0.0)) throw ValidationError("measurement wavelength must be positive");
}

inline double delay_cost_profiled(const Vec3& x, const MeasurementSet& meas, const Mat& bs, const Vec& w_tau,
                                  double* bias_out = nullptr) {
  const Eigen::Index m = bs.cols();
  double sw = 0.0, swr = 0.0, swr2 = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double r = meas.y_tau_m(i) - (bs.col(i) - x).norm();
    sw += w_tau(i);
    swr += w_tau(i) * r;
    swr2 += w_tau(i) * r * r;
  }
  const double b = swr / sw;
  if (bias_out) *bias_out = b;
  return 0.5 * std::max(0.0, swr2 - b * swr);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Delay only

struct DelayOnlyOptions {
  /// Initial state [x, y, z, c*B]; a grid search is used when absent.
  std::optional<Vec> init;
  int grid_points_per_axis = 25;
  double box_sigmas = 3.0;
  int candidates = 4;
  int max_iterations = 100;
};

/// Minimizes sum_m (y_tau - ||x_bs - x|| - c*B)^2 / (2 sigma_tau^2). The phase
/// bias is set to zero since it does not enter the delays.
inline EstimateResult estimate_delay_only(const MeasurementSet& meas, const Mat& bs_positions_m, const LinkBudget& lb,
                                          const DelayOnlyOptions& options = {}) {
  detail::check_measurements(meas, bs_positions_m, lb);
  const Mat& bs = bs_positions_m;
  const Eigen::Index m = bs.cols();
  const Vec inv_sigma = lb.sigma_tau_m.cwiseInverse();
  const Vec w_tau = inv_sigma.array().square();

  auto residuals = [&](const Vec& p, Vec& r, Mat& j) {
    r.resize(m);
    j.resize(m, 4);
    const Vec3 x = p.head<3>();
    for (Eigen::Index i = 0; i < m; ++i) {
      const Vec3 diff = x - bs.col(i);
      const double d = diff.norm();
      r(i) = (meas.y_tau_m(i) - d - p(3)) * inv_sigma(i);
      j.block<1, 3>(i, 0) = -(diff / d).transpose() * inv_sigma(i);
      j(i, 3) = -inv_sigma(i);
    }
  };

  std::vector<Vec> starts;
  if (options.init) {
    if (options.init->size() != 4) throw ValidationError("delay-only init must be [x, y, z, c*B]");
    starts.push_back(*options.init);
  } else {
    const Vec3 centroid = bs.rowwise().mean();
    Vec3 half;
    for (int k = 0; k < 3; ++k) {
      const double var = (bs.row(k).array() - centroid(k)).square().mean();
      half(k) = options.box_sigmas * std::max(std::sqrt(var), 1.0);
    }
    const int n = std::max(options.grid_points_per_axis, 2);
    std::vector<std::pair<double, Vec>> scored;
    scored.reserve(static_cast<std::size_t>(n) * n * n);
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        for (int c = 0; c < n; ++c) {
          const Vec3 x = centroid + Vec3(-half(0) + 2.0 * half(0) * a / (n - 1), -half(1) + 2.0 * half(1) * b / (n - 1),
                                         -half(2) + 2.0 * half(2) * c / (n - 1));
          double bias = 0.0;
          const double cost = detail::delay_cost_profiled(x, meas, bs, w_tau, &bias);
          Vec p(4);
          p << x, bias;
          scored.emplace_back(cost, std::move(p));
        }
    const auto keep = std::min<std::size_t>(static_cast<std::size_t>(std::max(options.candidates, 1)), scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                      [](const auto& l, const auto& r) { return l.first < r.first; });
    for (std::size_t i = 0; i < keep; ++i) starts.push_back(scored[i].second);
  }

  std::optional<detail::LmResult> best;
  int iterations = 0;
  for (const Vec& s : starts) {
    detail::LmResult res = detail::levenberg_marquardt(residuals, s, options.max_iterations);
    iterations += res.iterations;
    if (!best || res.cost < best->cost) best = std::move(res);
  }
  EstimateResult out;
  out.method = EstimatorMethod::kDelayOnly;
  out.state = StateVector{best->params.head<3>(), best->params(3), 0.0};
  out.converged = best->converged && out.state.position_m.allFinite();
  out.iterations = iterations;
  out.objective = best->cost;
  return out;
}

// ---------------------------------------------------------------------------
// Mixed integer

struct MixedIntegerOptions {
  /// Linearization point; the delay-only estimate when absent.
  std::optional<StateVector> init;
  /// Bypasses the integer search with these differenced ambiguities.
  std::optional<IntVector> known_differenced_ambiguities;
  int max_iterations = 100;
  IlsOptions ils;
};

/// Linearize around s0, solve the float problem for (dx, dB, kappa, a_d),
/// fix a_d by integer least squares, then re-solve the state with a_d fixed.
/// The re-solve iterates Gauss-Newton from the conditional solution.
inline EstimateResult estimate_mixed_integer(const MeasurementSet& meas, const Geometry& geom, const LinkBudget& lb,
                                             const AmbiguityStructure& amb, const MixedIntegerOptions& options = {}) {
  const Mat& bs = geom.bs_positions_m;
  detail::check_measurements(meas, bs, lb);
  const Eigen::Index m = bs.cols();
  if (amb.reduced_dim != m - 1) throw ValidationError("ambiguity structure does not match M");
  const double lambda = meas.wavelength_m;
  const Vec inv_tau = lb.sigma_tau_m.cwiseInverse();
  const Vec inv_theta = lb.sigma_theta_m.cwiseInverse();

  EstimateResult out;
  out.method = EstimatorMethod::kMixedInteger;
  StateVector s0;
  if (options.init) {
    s0 = *options.init;
  } else {
    const EstimateResult d = estimate_delay_only(meas, bs, lb);
    s0 = d.state;
    out.iterations += d.iterations;
  }

  IntVector a_d;
  if (options.known_differenced_ambiguities) {
    a_d = *options.known_differenced_ambiguities;
    if (static_cast<Eigen::Index>(a_d.size()) != m - 1) throw ValidationError("known ambiguities have the wrong size");
  } else {
    // Residuals at s0; phases reduced to (-lambda/2, lambda/2] with the shift n
    // folded into the ambiguities: a' = a - n.
    Vec r(2 * m);
    IntVector n(static_cast<std::size_t>(m));
    Mat h = Mat::Zero(2 * m, m + 4);
    for (Eigen::Index i = 0; i < m; ++i) {
      const Vec3 diff = s0.position_m - bs.col(i);
      const double d = diff.norm();
      const Vec3 u = diff / d;
      r(i) = (meas.y_tau_m(i) - d - s0.clock_bias_m) * inv_tau(i);
      const double raw = meas.y_theta_m(i) - d;
      const double reduced = wrap_symmetric(raw, lambda);
      n[static_cast<std::size_t>(i)] = std::llround((raw - reduced) / lambda);
      r(m + i) = reduced * inv_theta(i);
      h.block<1, 3>(i, 0) = u.transpose() * inv_tau(i);
      h(i, 3) = inv_tau(i);
      h.block<1, 3>(m + i, 0) = u.transpose() * inv_theta(i);
      h(m + i, 4) = lambda * inv_theta(i);
      if (i > 0) h(m + i, 4 + i) = lambda * inv_theta(i);
    }
    const Mat normal = h.transpose() * h;
    const double cond = scaled_condition(normal);
    if (!(cond < kMaxCondition)) throw SingularMatrixError("float mixed-integer problem is singular", cond);
    const Mat q = invert_information(normal);
    const Vec theta = q * (h.transpose() * r);
    const Mat q_aa = q.bottomRightCorner(m - 1, m - 1);
    const Vec a_float = theta.tail(m - 1);
    const Mat g = whiten(q_aa);
    const IntVector z = LatticeSolver(g, options.ils).solve(g * a_float);
    a_d.resize(static_cast<std::size_t>(m - 1));
    for (Eigen::Index i = 1; i < m; ++i) {
      const auto k = static_cast<std::size_t>(i - 1);
      a_d[k] = z[k] + (n[static_cast<std::size_t>(i)] - n[0]);
    }
  }

  // With a_d fixed: y_theta - lambda [E a_d]_m = d_m + kappa'' lambda, where
  // kappa'' = kappa + a_1 is real-valued.
  Vec y_phase = meas.y_theta_m;
  for (Eigen::Index i = 1; i < m; ++i) y_phase(i) -= lambda * static_cast<double>(a_d[static_cast<std::size_t>(i - 1)]);
  auto residuals = [&](const Vec& p, Vec& r, Mat& j) {
    r.resize(2 * m);
    j = Mat::Zero(2 * m, 5);
    const Vec3 x = p.head<3>();
    for (Eigen::Index i = 0; i < m; ++i) {
      const Vec3 diff = x - bs.col(i);
      const double d = diff.norm();
      const Vec3 u = diff / d;
      r(i) = (meas.y_tau_m(i) - d - p(3)) * inv_tau(i);
      r(m + i) = (y_phase(i) - d - p(4) * lambda) * inv_theta(i);
      j.block<1, 3>(i, 0) = -u.transpose() * inv_tau(i);
      j(i, 3) = -inv_tau(i);
      j.block<1, 3>(m + i, 0) = -u.transpose() * inv_theta(i);
      j(m + i, 4) = -lambda * inv_theta(i);
    }
  };
  Vec p0(5);
  {
    const Vec w = inv_theta.array().square();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) acc += w(i) * (y_phase(i) - (bs.col(i) - s0.position_m).norm());
    p0 << s0.position_m, s0.clock_bias_m, acc / (w.sum() * lambda);
  }
  const detail::LmResult res = detail::levenberg_marquardt(residuals, p0, options.max_iterations);
  const double kappa = res.params(4) - std::floor(res.params(4));
  out.state = StateVector{res.params.head<3>(), res.params(3), kappa >= 1.0 ? 0.0 : kappa};
  out.converged = res.converged && out.state.position_m.allFinite();
  out.iterations += res.iterations;
  out.fixed_integers = std::move(a_d);
  out.objective = res.cost;
  return out;
}

// ---------------------------------------------------------------------------
// Directional statistics

struct CircularMean {
  double phase_rad = 0.0;  // in [0, 2pi)
  bool degenerate = false;
  double resultant = 0.0;  // |sum w exp(j angle)|
};

/// arg sum_m w_m exp(j angle_m), the maximizer of sum_m w_m cos(angle_m - phi).
inline CircularMean closed_form_phase(const Vec& angles_rad, const Vec& weights) {
  if (angles_rad.size() != weights.size()) throw ValidationError("angles and weights differ in length");
  if (!(weights.array() > 0.0).all()) throw ValidationError("circular-mean weights must be positive");
  double c = 0.0, s = 0.0;
  for (Eigen::Index i = 0; i < angles_rad.size(); ++i) {
    c += weights(i) * std::cos(angles_rad(i));
    s += weights(i) * std::sin(angles_rad(i));
  }
  CircularMean out;
  out.resultant = std::hypot(c, s);
  if (!(out.resultant > 1e-12 * weights.sum())) {
    out.degenerate = true;
    return out;
  }
  double phi = std::atan2(s, c);
  if (phi < 0.0) phi += kTwoPi;
  if (phi >= kTwoPi) phi = 0.0;
  out.phase_rad = phi;
  return out;
}

/// von Mises concentration kappa_m = lambda^2 / ((2 pi)^2 sigma_theta^2).
inline Vec von_mises_concentration(const LinkBudget& lb, double wavelength_m) {
  return (wavelength_m / kTwoPi) * (wavelength_m / kTwoPi) * lb.sigma_theta_m.array().square().inverse().matrix();
}

struct DirectionalTerms {
  Vec delay;  // (y_tau - d - B)^2 / (2 sigma_tau^2)
  Vec phase;  // -kappa_m cos((2 pi / lambda)(y_theta - d) - phi)
  double total() const { return delay.sum() + phase.sum(); }
};

inline DirectionalTerms directional_terms(const Vec3& x, double clock_bias_m, double phi_rad,
                                          const MeasurementSet& meas, const Mat& bs_positions_m, const LinkBudget& lb) {
  const Eigen::Index m = bs_positions_m.cols();
  const Vec conc = von_mises_concentration(lb, meas.wavelength_m);
  const double k = kTwoPi / meas.wavelength_m;
  DirectionalTerms t{Vec(m), Vec(m)};
  for (Eigen::Index i = 0; i < m; ++i) {
    const double d = (bs_positions_m.col(i) - x).norm();
    const double rt = (meas.y_tau_m(i) - d - clock_bias_m) / lb.sigma_tau_m(i);
    t.delay(i) = 0.5 * rt * rt;
    t.phase(i) = -conc(i) * std::cos(k * (meas.y_theta_m(i) - d) - phi_rad);
  }
  return t;
}

/// Negative log-likelihood (up to constants) with Gaussian delays and von
/// Mises phases; decreases as the phase residual cosines increase.
inline double nll_directional(const Vec3& x, double clock_bias_m, double phi_rad, const MeasurementSet& meas,
                              const Mat& bs_positions_m, const LinkBudget& lb) {
  return directional_terms(x, clock_bias_m, phi_rad, meas, bs_positions_m, lb).total();
}

namespace detail {

/// NLL minimized over B and phi in closed form at a fixed position.
struct ProfiledNll {
  const MeasurementSet& meas;
  const Mat& bs;
  Vec w_tau;
  Vec conc;
  double k;

  double operator()(const Vec3& x, double* bias = nullptr, double* phi = nullptr) const {
    const Eigen::Index m = bs.cols();
    double sw = 0.0, swr = 0.0, swr2 = 0.0, c = 0.0, s = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      const double d = (bs.col(i) - x).norm();
      const double r = meas.y_tau_m(i) - d;
      sw += w_tau(i);
      swr += w_tau(i) * r;
      swr2 += w_tau(i) * r * r;
      const double ang = k * (meas.y_theta_m(i) - d);
      c += conc(i) * std::cos(ang);
      s += conc(i) * std::sin(ang);
    }
    const double b = swr / sw;
    if (bias) *bias = b;
    if (phi) {
      double p = std::atan2(s, c);
      if (p < 0.0) p += kTwoPi;
      *phi = p >= kTwoPi ? 0.0 : p;
    }
    return 0.5 * std::max(0.0, swr2 - b * swr) - std::hypot(c, s);
  }

  /// Values at start + l * step * e_z for l in [0, n). Angles are reduced in
  /// double and their cosines taken in single precision; only grid ranking
  /// uses this path.
  void row(const Vec3& start, double step, Eigen::Index n, Eigen::ArrayXd& out) const {
    using ArrayXd = Eigen::ArrayXd;
    using ArrayXf = Eigen::ArrayXf;
    const Eigen::Index m = bs.cols();
    const double lambda = kTwoPi / k;
    const ArrayXd zs = ArrayXd::LinSpaced(n, 0.0, static_cast<double>(n - 1)) * step + start(2);
    ArrayXd swr = ArrayXd::Zero(n), swr2 = ArrayXd::Zero(n);
    ArrayXf c = ArrayXf::Zero(n), s = ArrayXf::Zero(n);
    const double sw = w_tau.sum();
    for (Eigen::Index i = 0; i < m; ++i) {
      const double dx = start(0) - bs(0, i);
      const double dy = start(1) - bs(1, i);
      const ArrayXd d = ((zs - bs(2, i)).square() + (dx * dx + dy * dy)).sqrt();
      const ArrayXd r = meas.y_tau_m(i) - d;
      swr += w_tau(i) * r;
      swr2 += w_tau(i) * r.square();
      ArrayXd f = (meas.y_theta_m(i) - d) / lambda;
      f -= f.floor();
      const ArrayXf ang = (kTwoPi * f).cast<float>();
      c += static_cast<float>(conc(i)) * ang.cos();
      s += static_cast<float>(conc(i)) * ang.sin();
    }
    const ArrayXd cd = c.cast<double>(), sd = s.cast<double>();
    out = 0.5 * (swr2 - swr.square() / sw).max(0.0) - (cd.square() + sd.square()).sqrt();
  }
};

}  // namespace detail

struct DirectionalOptions {
  /// Box half-width per axis in delay-only standard deviations.
  double box_sigmas = 4.0;
  /// Grid step as a fraction of the wavelength (used unless step_m is set).
  double step_wavelengths = 0.25;
  std::optional<double> step_m;
  double max_grid_points = 1e8;
  /// Grid local minima given a few cheap Gauss-Newton steps (best grid value first).
  std::size_t max_refine = 50000;
  int refine_iterations = 3;
  /// Refined candidates polished to convergence (best refined NLL first).
  std::size_t max_polish = 16;
  int polish_iterations = 50;
  DelayOnlyOptions delay;
};

/// Position grid around the delay-only estimate; B and phi are profiled in
/// closed form at each point. Grid local minima (26-neighbourhood) are
/// refined by Gauss-Newton on the wrapped phase residuals; a refined point
/// replaces its start only if it lowers the NLL.
inline EstimateResult estimate_directional(const MeasurementSet& meas, const Geometry& geom, const LinkBudget& lb,
                                           const Mat& cov_known, const Mat& cov_delay,
                                           const DirectionalOptions& options = {}) {
  const Mat& bs = geom.bs_positions_m;
  detail::check_measurements(meas, bs, lb);
  if (cov_known.rows() != 3 || cov_delay.rows() != 3) throw ValidationError("position covariances must be 3 x 3");
  const Eigen::Index m = bs.cols();
  const double lambda = meas.wavelength_m;

  const EstimateResult coarse = estimate_delay_only(meas, bs, lb, options.delay);
  const Vec3 center = coarse.state.position_m;
  const double step = options.step_m ? *options.step_m : options.step_wavelengths * lambda;
  if (!(step > 0.0) || !std::isfinite(step)) throw ValidationError("directional grid step must be positive");

  std::array<long long, 3> half{};
  double points = 1.0;
  for (int k = 0; k < 3; ++k) {
    const double w = options.box_sigmas * std::sqrt(std::max(cov_delay(k, k), 0.0));
    const double n = std::floor(w / step);
    if (!std::isfinite(n) || n > 1e9) throw GridTooLarge(std::numeric_limits<double>::infinity(), 0.0);
    half[static_cast<std::size_t>(k)] = static_cast<long long>(n);
    points *= 2.0 * n + 1.0;
  }
  if (points > options.max_grid_points) throw GridTooLarge(points, points * sizeof(double));

  const detail::ProfiledNll profiled{meas, bs, lb.sigma_tau_m.array().square().inverse().matrix(),
                                     von_mises_concentration(lb, lambda), kTwoPi / lambda};
  const long long nx = 2 * half[0] + 1, ny = 2 * half[1] + 1, nz = 2 * half[2] + 1;
  auto point = [&](long long i, long long j, long long l) {
    return Vec3(center(0) + static_cast<double>(i - half[0]) * step, center(1) + static_cast<double>(j - half[1]) * step,
                center(2) + static_cast<double>(l - half[2]) * step);
  };

  // Rolling window of three x-slabs for the local-minimum test.
  const double inf = std::numeric_limits<double>::infinity();
  std::array<std::vector<double>, 3> slabs;
  for (auto& s : slabs) s.assign(static_cast<std::size_t>(ny * nz), inf);
  Eigen::ArrayXd row_values;
  auto fill = [&](std::vector<double>& s, long long i) {
    for (long long j = 0; j < ny; ++j) {
      profiled.row(point(i, j, 0), step, nz, row_values);
      std::copy(row_values.data(), row_values.data() + nz, s.begin() + static_cast<std::ptrdiff_t>(j * nz));
    }
  };
  struct Candidate {
    double value;
    long long i, j, l;
  };
  std::vector<Candidate> minima;
  double grid_best = inf;
  Vec3 grid_best_x = center;
  if (nx > 0) fill(slabs[1], 0);
  for (long long i = 0; i < nx; ++i) {
    std::vector<double>& prev = slabs[0];
    std::vector<double>& cur = slabs[1];
    std::vector<double>& next = slabs[2];
    if (i + 1 < nx) fill(next, i + 1);
    else std::fill(next.begin(), next.end(), inf);
    for (long long j = 0; j < ny; ++j)
      for (long long l = 0; l < nz; ++l) {
        const double v = cur[static_cast<std::size_t>(j * nz + l)];
        if (v < grid_best) {
          grid_best = v;
          grid_best_x = point(i, j, l);
        }
        bool is_min = true;
        for (int dj = -1; dj <= 1 && is_min; ++dj)
          for (int dl = -1; dl <= 1 && is_min; ++dl) {
            const long long jj = j + dj, ll = l + dl;
            if (jj < 0 || jj >= ny || ll < 0 || ll >= nz) continue;
            const auto idx = static_cast<std::size_t>(jj * nz + ll);
            if (prev[idx] < v || next[idx] < v || ((dj != 0 || dl != 0) && cur[idx] < v)) is_min = false;
          }
        if (is_min) minima.push_back({v, i, j, l});
      }
    std::swap(slabs[0], slabs[1]);
    std::swap(slabs[1], slabs[2]);
  }
  std::sort(minima.begin(), minima.end(), [](const Candidate& a, const Candidate& b) {
    if (a.value != b.value) return a.value < b.value;
    return std::tie(a.i, a.j, a.l) < std::tie(b.i, b.j, b.l);
  });
  if (minima.size() > options.max_refine) minima.resize(options.max_refine);

  const Vec inv_tau = lb.sigma_tau_m.cwiseInverse();
  const Vec inv_theta = lb.sigma_theta_m.cwiseInverse();
  auto wrapped_residuals = [&](const Vec& p, Vec& r, Mat& j) {
    r.resize(2 * m);
    j = Mat::Zero(2 * m, 5);
    const Vec3 x = p.head<3>();
    for (Eigen::Index i = 0; i < m; ++i) {
      const Vec3 diff = x - bs.col(i);
      const double d = diff.norm();
      const Vec3 u = diff / d;
      r(i) = (meas.y_tau_m(i) - d - p(3)) * inv_tau(i);
      r(m + i) = wrap_symmetric(meas.y_theta_m(i) - d - p(4) * lambda, lambda) * inv_theta(i);
      j.block<1, 3>(i, 0) = -u.transpose() * inv_tau(i);
      j(i, 3) = -inv_tau(i);
      j.block<1, 3>(m + i, 0) = -u.transpose() * inv_theta(i);
      j(m + i, 4) = -lambda * inv_theta(i);
    }
  };
  const double xtol = 1e-3 * std::sqrt(std::max(cov_known.trace(), 0.0)) / (center.norm() + 1.0);

  double best_nll = inf;
  StateVector best_state;
  int iterations = coarse.iterations;
  auto consider = [&](const Vec3& x, double b, double phi) {
    const double v = nll_directional(x, b, phi, meas, bs, lb);
    if (v < best_nll) {
      best_nll = v;
      best_state = StateVector{x, b, phi / kTwoPi};
    }
    return v;
  };
  {
    double b = 0.0, phi = 0.0;
    profiled(grid_best_x, &b, &phi);
    consider(grid_best_x, b, phi);
  }
  // Stage 1: a few allocation-free Gauss-Newton steps per grid minimum.
  using Vec5 = Eigen::Matrix<double, 5, 1>;
  using Mat5 = Eigen::Matrix<double, 5, 5>;
  auto refine = [&](Vec5 p) {
    for (int it = 0; it < options.refine_iterations; ++it) {
      Mat5 h = Mat5::Zero();
      Vec5 g = Vec5::Zero();
      for (Eigen::Index i = 0; i < m; ++i) {
        const Vec3 diff = p.head<3>() - bs.col(i);
        const double d = diff.norm();
        const Vec3 u = diff / d;
        Vec5 jt = Vec5::Zero();
        jt.head<3>() = -u * inv_tau(i);
        jt(3) = -inv_tau(i);
        const double rt = (meas.y_tau_m(i) - d - p(3)) * inv_tau(i);
        h.noalias() += jt * jt.transpose();
        g.noalias() += jt * rt;
        Vec5 jp = Vec5::Zero();
        jp.head<3>() = -u * inv_theta(i);
        jp(4) = -lambda * inv_theta(i);
        const double rp = wrap_symmetric(meas.y_theta_m(i) - d - p(4) * lambda, lambda) * inv_theta(i);
        h.noalias() += jp * jp.transpose();
        g.noalias() += jp * rp;
      }
      const Vec5 dp = -h.ldlt().solve(g);
      if (!dp.allFinite()) break;
      p += dp;
    }
    return p;
  };
  struct Refined {
    double nll;
    std::size_t rank;
    Vec3 x;
  };
  std::vector<Refined> refined;
  refined.reserve(minima.size());
  for (std::size_t k = 0; k < minima.size(); ++k) {
    const Candidate& c = minima[k];
    const Vec3 x = point(c.i, c.j, c.l);
    double b = 0.0, phi = 0.0;
    const double start = profiled(x, &b, &phi);
    Vec5 p;
    p << x, b, phi / kTwoPi;
    const Vec3 xr = refine(p).head<3>();
    const double after = xr.allFinite() ? profiled(xr) : inf;
    if (after < start) refined.push_back({after, k, xr});
    else refined.push_back({start, k, x});
  }
  std::sort(refined.begin(), refined.end(), [](const Refined& a, const Refined& b) {
    if (a.nll != b.nll) return a.nll < b.nll;
    return a.rank < b.rank;
  });
  if (refined.size() > options.max_polish) refined.resize(options.max_polish);

  // Stage 2: polish the most promising basins to convergence.
  for (const Refined& c : refined) {
    double b = 0.0, phi = 0.0;
    profiled(c.x, &b, &phi);
    const double start = consider(c.x, b, phi);
    Vec p(5);
    p << c.x, b, phi / kTwoPi;
    const detail::LmResult res = detail::levenberg_marquardt(wrapped_residuals, p, options.polish_iterations, xtol);
    iterations += res.iterations;
    const Vec3 xp = res.params.head<3>();
    if (!xp.allFinite()) continue;
    double bp = 0.0, phip = 0.0;
    profiled(xp, &bp, &phip);
    if (nll_directional(xp, bp, phip, meas, bs, lb) < start) consider(xp, bp, phip);
  }

  EstimateResult out;
  out.method = EstimatorMethod::kDirectional;
  double frac = best_state.phase_bias_frac - std::floor(best_state.phase_bias_frac);
  if (frac >= 1.0) frac = 0.0;
  best_state.phase_bias_frac = frac;
  out.state = best_state;
  out.converged = out.state.position_m.allFinite() && std::isfinite(best_nll);
  out.iterations = iterations;
  out.objective = best_nll;
  return out;
}

}  // namespace cpbounds
