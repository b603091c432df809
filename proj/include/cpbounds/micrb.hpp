#pragma once

// Mixed-integer CRB: the known-ambiguity covariance inflated by the bias that
// each integer-fixing error causes, averaged over the error distribution.
//
// Pipeline for one scenario point:
//   1. float covariance Sigma_unc (bounds.hpp) and its differenced version
//      S = D Sigma_unc D^T over the M-1 identifiable ambiguities;
//   2. Monte-Carlo integer errors: r = S^-1/2 z_d + u, u ~ N(0, I), solve the
//      ILS and record delta = z_hat - z_d (z_d = 0 by translation invariance);
//   3. bias of the linearized weighted least-squares state estimate for each
//      delta, b = (W A)^+ W B E delta with W = Sigma_ch^-1/2;
//   4. Sigma_mi = sum_delta Pr(delta) (b b^T + (I + H_b) Sigma_known (I + H_b)^T).

#include "cpbounds/bounds.hpp"
#include "cpbounds/core.hpp"
#include "cpbounds/ils.hpp"
#include "cpbounds/parallel.hpp"
#include "cpbounds/random.hpp"
#include "cpbounds/scenario.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <vector>

namespace cpbounds {

/// B = [0; lambda I] (2M x M), D = [-1 | I] ((M-1) x M), E = [0^T; I] (M x (M-1)).
struct AmbiguityStructure {
  Mat b;
  Mat d;
  Mat e;
  Eigen::Index reduced_dim = 0;
};

inline AmbiguityStructure make_ambiguity_structure(Eigen::Index num_bs, double wavelength_m) {
  if (num_bs < 2) throw ValidationError("ambiguity structure needs at least 2 base stations");
  AmbiguityStructure a;
  const Eigen::Index m = num_bs;
  a.reduced_dim = m - 1;
  a.b = Mat::Zero(2 * m, m);
  a.b.bottomRows(m) = wavelength_m * Mat::Identity(m, m);
  a.d = Mat::Zero(m - 1, m);
  a.d.col(0).setConstant(-1.0);
  a.d.rightCols(m - 1) = Mat::Identity(m - 1, m - 1);
  a.e = Mat::Zero(m, m - 1);
  a.e.bottomRows(m - 1) = Mat::Identity(m - 1, m - 1);
  return a;
}

/// Jacobian of f(s) at the true state: delay row m = [u_m^T, 1, 0], phase row
/// M+m = [u_m^T, 0, lambda].
inline Mat jacobian_A(const Geometry& geom, double wavelength_m) {
  const Eigen::Index m = geom.num_bs();
  Mat a = Mat::Zero(2 * m, 5);
  for (Eigen::Index i = 0; i < m; ++i) {
    a.block<1, 3>(i, 0) = geom.unit_vectors.col(i).transpose();
    a(i, 3) = 1.0;
    a.block<1, 3>(m + i, 0) = geom.unit_vectors.col(i).transpose();
    a(m + i, 4) = wavelength_m;
  }
  return a;
}

/// blkdiag(Sigma_tau, Sigma_theta)
inline Mat channel_covariance(const LinkBudget& lb) {
  const Eigen::Index m = lb.size();
  Vec diag(2 * m);
  diag << lb.sigma_tau_m.array().square().matrix(), lb.sigma_theta_m.array().square().matrix();
  return diag.asDiagonal();
}

inline Mat differenced_covariance(const Mat& cov_float_int, const AmbiguityStructure& amb) {
  Mat s = amb.d * cov_float_int * amb.d.transpose();
  return 0.5 * (s + s.transpose());
}

struct IntegerErrorSample {
  IntVector delta;
  std::int64_t count = 0;
};

inline bool is_zero(const IntVector& v) {
  return std::all_of(v.begin(), v.end(), [](std::int64_t x) { return x == 0; });
}

/// Monte-Carlo histogram of integer-fixing errors for differenced covariance S.
/// Sample i draws u from substream (seed, kIntegerErrors, i). Sorted by count
/// (descending), then lexicographically.
inline std::vector<IntegerErrorSample> sample_integer_errors(const Mat& s, std::int64_t samples, std::uint64_t seed,
                                                             unsigned threads = 1,
                                                             const IntVector* true_zd = nullptr) {
  if (samples < 1) throw ValidationError("sample count must be positive");
  const Mat g = whiten(s);
  const Eigen::Index n = g.rows();
  Vec offset = Vec::Zero(n);
  if (true_zd) {
    if (static_cast<Eigen::Index>(true_zd->size()) != n) throw ValidationError("z_d has the wrong dimension");
    offset = g * to_eigen(*true_zd);
  }
  const LatticeSolver solver(g);
  std::vector<IntVector> deltas(static_cast<std::size_t>(samples));
  parallel_for(deltas.size(), threads, [&](std::size_t i) {
    auto rng = substream(seed, StreamTag::kIntegerErrors, i);
    std::normal_distribution<double> normal(0.0, 1.0);
    Vec r(n);
    for (Eigen::Index k = 0; k < n; ++k) r(k) = normal(rng);
    r += offset;
    IntVector z_hat;
    try {
      z_hat = solver.solve(r);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " at integer-error sample " + std::to_string(i));
    }
    if (true_zd)
      for (std::size_t k = 0; k < z_hat.size(); ++k) z_hat[k] -= (*true_zd)[k];
    deltas[i] = std::move(z_hat);
  });
  std::map<IntVector, std::int64_t> histogram;
  for (auto& d : deltas) ++histogram[d];
  std::vector<IntegerErrorSample> out;
  out.reserve(histogram.size());
  for (auto& [delta, count] : histogram) out.push_back({delta, count});
  std::stable_sort(out.begin(), out.end(),
                   [](const IntegerErrorSample& a, const IntegerErrorSample& b) { return a.count > b.count; });
  return out;
}

inline std::vector<IntegerErrorSample> sample_integer_errors(const Mat& s, const SystemConfig& cfg,
                                                             unsigned threads = 1) {
  return sample_integer_errors(s, cfg.micrb_samples, cfg.noise_seed, threads);
}

/// Linear map K with b(s|delta) = K delta, K = (W A)^+ W B E.
inline Mat bias_map(const Mat& a, const Mat& sigma_ch, const AmbiguityStructure& amb) {
  const Vec w = sigma_ch.diagonal().array().sqrt().inverse();
  const Mat wa = w.asDiagonal() * a;
  Eigen::ColPivHouseholderQR<Mat> qr(wa);
  if (qr.rank() < a.cols()) {
    const double cond = qr.maxPivot() / std::max(std::abs(qr.matrixQR()(a.cols() - 1, a.cols() - 1)), 1e-300);
    throw SingularMatrixError("whitened Jacobian is rank deficient", cond);
  }
  return qr.solve(w.asDiagonal() * amb.b * amb.e);
}

inline Vec bias_for_error(const Mat& a, const Mat& sigma_ch, const AmbiguityStructure& amb, const IntVector& delta) {
  if (static_cast<Eigen::Index>(delta.size()) != amb.reduced_dim) throw ValidationError("delta has the wrong dimension");
  return bias_map(a, sigma_ch, amb) * to_eigen(delta);
}

/// b b^T + (I + H_b) Sigma_known (I + H_b)^T; H_b = 0 when not provided.
inline Mat cov_given_error(const Vec& bias, const Mat& cov_known_full, const std::optional<Mat>& h_b = std::nullopt) {
  Mat out = bias * bias.transpose();
  if (h_b) {
    const Mat t = Mat::Identity(cov_known_full.rows(), cov_known_full.cols()) + *h_b;
    out += t * cov_known_full * t.transpose();
  } else {
    out += cov_known_full;
  }
  return 0.5 * (out + out.transpose());
}

/// H_b = d b(s|delta) / ds by central differences. Only the position enters
/// A (through the unit vectors); the noise budget is held at the true state,
/// so the clock-bias and phase-bias columns are zero up to roundoff.
inline Mat bias_jacobian(const Geometry& geom, const LinkBudget& lb, double wavelength_m,
                         const AmbiguityStructure& amb, const IntVector& delta, double relative_step = 1e-4) {
  const Mat sigma_ch = channel_covariance(lb);
  Mat h = Mat::Zero(5, 5);
  const Vec dz = to_eigen(delta);
  for (int k = 0; k < 3; ++k) {
    const double step = relative_step * std::max(std::abs(geom.ue_position_m(k)), 1.0);
    Vec3 plus = geom.ue_position_m;
    Vec3 minus = geom.ue_position_m;
    plus(k) += step;
    minus(k) -= step;
    const Vec bp = bias_map(jacobian_A(make_geometry(geom.bs_positions_m, plus), wavelength_m), sigma_ch, amb) * dz;
    const Vec bm = bias_map(jacobian_A(make_geometry(geom.bs_positions_m, minus), wavelength_m), sigma_ch, amb) * dz;
    h.col(k) = (bp - bm) / (2.0 * step);
  }
  return h;
}

struct MicrbOptions {
  std::int64_t samples = 1000;
  std::uint64_t seed = 1;
  bool bias_jacobian = false;
  unsigned threads = 1;

  static MicrbOptions from_config(const SystemConfig& cfg, unsigned threads = 1) {
    MicrbOptions o;
    o.samples = cfg.micrb_samples;
    o.seed = cfg.noise_seed;
    o.threads = threads;
    return o;
  }
};

struct MicrbResult {
  Mat cov_full;        // 5 x 5
  Mat cov_position;    // 3 x 3
  double peb = 0.0;
  double p_fix = 0.0;  // Pr(delta = 0)
  std::vector<IntegerErrorSample> histogram;
  Mat differenced_cov;  // S, (M-1) x (M-1)
  std::int64_t samples = 0;
};

/// Evaluates the mixed-integer bound given the classical bounds of the same point.
inline MicrbResult micrb(const Geometry& geom, const LinkBudget& lb, double wavelength_m,
                         const BoundsReport& classical, const MicrbOptions& options) {
  const AmbiguityStructure amb = make_ambiguity_structure(geom.num_bs(), wavelength_m);
  MicrbResult res;
  res.samples = options.samples;
  res.differenced_cov = differenced_covariance(classical.cov_float_int, amb);
  res.histogram = sample_integer_errors(res.differenced_cov, options.samples, options.seed, options.threads);

  const Mat a = jacobian_A(geom, wavelength_m);
  const Mat k = bias_map(a, channel_covariance(lb), amb);
  res.cov_full = Mat::Zero(5, 5);
  const double total = static_cast<double>(options.samples);
  // Histogram order is deterministic, so the reduction is too.
  for (const auto& entry : res.histogram) {
    const Vec b = k * to_eigen(entry.delta);
    std::optional<Mat> h;
    if (options.bias_jacobian && !is_zero(entry.delta))
      h = bias_jacobian(geom, lb, wavelength_m, amb, entry.delta);
    res.cov_full += (static_cast<double>(entry.count) / total) * cov_given_error(b, classical.cov_known_full, h);
    if (is_zero(entry.delta)) res.p_fix = static_cast<double>(entry.count) / total;
  }
  res.cov_full = (0.5 * (res.cov_full + res.cov_full.transpose())).eval();
  res.cov_position = res.cov_full.topLeftCorner<3, 3>();
  res.peb = position_error_bound(res.cov_position);
  return res;
}

/// Classical bounds plus, when requested, the mixed-integer bound.
inline BoundsReport evaluate_bounds(const Geometry& geom, const LinkBudget& lb, double wavelength_m,
                                    const std::optional<MicrbOptions>& mi = std::nullopt,
                                    MicrbResult* mi_detail = nullptr) {
  BoundsReport r = compute_classical_bounds(geom, lb, wavelength_m);
  if (mi) {
    MicrbResult res = micrb(geom, lb, wavelength_m, r, *mi);
    r.cov_mi = res.cov_position;
    r.peb_mi = res.peb;
    r.p_fix = res.p_fix;
    if (mi_detail) *mi_detail = std::move(res);
  }
  return r;
}

}  // namespace cpbounds
