#pragma once

// Classical CRB-type bounds: known integer ambiguity, delay only, and the
// float (real-relaxed) ambiguity covariance.
//
// All information matrices use the distance-domain state
//   s = [x (m), c*B_ue (m), kappa = phi_ue / 2pi (cycles)]
// so a delay row of the Jacobian is [u_m^T, 1, 0] and a phase row is
// [u_m^T, 0, lambda]. Position blocks of the inverse do not depend on how the
// nuisance parameters are scaled.

#include "cpbounds/core.hpp"
#include "cpbounds/scenario.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace cpbounds {

inline constexpr double kMaxCondition = 1e14;

struct InformationMatrix {
  Mat matrix;
  double condition_number = 0.0;  // after Jacobi (diagonal) equilibration

  bool singular() const { return !(condition_number < kMaxCondition); }
};

/// Condition number of D^-1/2 J D^-1/2 with D = diag(J); infinity when the
/// scaled matrix is not positive definite.
inline double scaled_condition(const Mat& fim) {
  const Eigen::Index n = fim.rows();
  Vec scale(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(fim(i, i) > 0.0)) return std::numeric_limits<double>::infinity();
    scale(i) = 1.0 / std::sqrt(fim(i, i));
  }
  const Mat scaled = scale.asDiagonal() * fim * scale.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (scaled + scaled.transpose()), Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0)) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

inline InformationMatrix make_information(Mat fim) {
  fim = (0.5 * (fim + fim.transpose())).eval();
  const double cond = scaled_condition(fim);
  return InformationMatrix{std::move(fim), cond};
}

/// FIM of s from delay and phase observations with the integers known.
/// Equals A^T Sigma_ch^-1 A. A sigma_theta of +inf removes a phase link.
inline InformationMatrix fim_known(const Geometry& geom, const LinkBudget& lb, double wavelength_m) {
  const Eigen::Index m = geom.num_bs();
  if (m < 4) throw ValidationError("at least 4 base stations are required");
  const Mat& u = geom.unit_vectors;
  const Vec j_tau = lb.sigma_tau_m.array().square().inverse();
  const Vec j_theta = lb.sigma_theta_m.array().square().inverse();
  Mat fim = Mat::Zero(5, 5);
  fim.topLeftCorner<3, 3>() = u * (j_tau + j_theta).asDiagonal() * u.transpose();
  fim.block<3, 1>(0, 3) = u * j_tau;
  fim.block<3, 1>(0, 4) = wavelength_m * (u * j_theta);
  fim(3, 3) = j_tau.sum();
  fim(4, 4) = wavelength_m * wavelength_m * j_theta.sum();
  fim.block<1, 3>(3, 0) = fim.block<3, 1>(0, 3).transpose();
  fim.block<1, 3>(4, 0) = fim.block<3, 1>(0, 4).transpose();
  return make_information(std::move(fim));
}

/// FIM of [x, c*B] from the delay observations only.
inline InformationMatrix fim_delay(const Geometry& geom, const LinkBudget& lb) {
  const Eigen::Index m = geom.num_bs();
  if (m < 4) throw ValidationError("at least 4 base stations are required");
  const Mat& u = geom.unit_vectors;
  const Vec j_tau = lb.sigma_tau_m.array().square().inverse();
  Mat fim = Mat::Zero(4, 4);
  fim.topLeftCorner<3, 3>() = u * j_tau.asDiagonal() * u.transpose();
  fim.block<3, 1>(0, 3) = u * j_tau;
  fim.block<1, 3>(3, 0) = fim.block<3, 1>(0, 3).transpose();
  fim(3, 3) = j_tau.sum();
  return make_information(std::move(fim));
}

/// Full inverse of a symmetric positive-definite information matrix, computed
/// on the equilibrated matrix. Throws SingularMatrixError above 1e14.
inline Mat invert_information(const Mat& fim) {
  if (fim.rows() != fim.cols()) throw ValidationError("information matrix must be square");
  const double cond = scaled_condition(fim);
  if (!(cond < kMaxCondition)) throw SingularMatrixError("information matrix is singular", cond);
  const Eigen::Index n = fim.rows();
  Vec scale(n);
  for (Eigen::Index i = 0; i < n; ++i) scale(i) = 1.0 / std::sqrt(fim(i, i));
  const Mat scaled = scale.asDiagonal() * (0.5 * (fim + fim.transpose())) * scale.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Mat> eig(scaled);
  const Mat inv_scaled = eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() *
                         eig.eigenvectors().transpose();
  Mat inv = scale.asDiagonal() * inv_scaled * scale.asDiagonal();
  return 0.5 * (inv + inv.transpose());
}

/// Block [first, first+count) x [first, first+count) of fim^-1, symmetrized.
inline Mat invert_and_extract(const Mat& fim, Eigen::Index first, Eigen::Index count) {
  if (first < 0 || count < 1 || first + count > fim.rows()) throw ValidationError("block outside the matrix");
  return invert_information(fim).block(first, first, count, count);
}

/// Float-ambiguity covariance in cycles^2:
/// (Sigma_theta + U^T Sigma_delay U) / lambda^2.
inline Mat cov_float(const Geometry& geom, const LinkBudget& lb, const Mat& cov_delay, double wavelength_m) {
  if (cov_delay.rows() != 3 || cov_delay.cols() != 3) throw ValidationError("cov_delay must be 3 x 3");
  const Mat& u = geom.unit_vectors;
  Mat s = u.transpose() * cov_delay * u;
  s.diagonal() += lb.sigma_theta_m.array().square().matrix();
  s /= wavelength_m * wavelength_m;
  return 0.5 * (s + s.transpose());
}

inline double position_error_bound(const Mat& cov) { return std::sqrt(std::max(0.0, cov.trace())); }

/// Four covariance bounds and their PEBs for one scenario point.
struct BoundsReport {
  Mat cov_known;        // 3 x 3
  Mat cov_known_full;   // 5 x 5, inverse of fim_known
  Mat cov_delay;        // 3 x 3
  Mat cov_float_int;    // M x M, cycles^2
  double peb_known = 0.0;
  double peb_delay = 0.0;
  double cond_known = 0.0;
  double cond_delay = 0.0;
  std::optional<Mat> cov_mi;  // filled by the mixed-integer bound
  std::optional<double> peb_mi;
  std::optional<double> p_fix;
};

inline BoundsReport compute_classical_bounds(const Geometry& geom, const LinkBudget& lb, double wavelength_m) {
  const InformationMatrix known = fim_known(geom, lb, wavelength_m);
  const InformationMatrix delay = fim_delay(geom, lb);
  if (known.singular()) throw SingularMatrixError("known-ambiguity FIM is singular", known.condition_number);
  if (delay.singular()) throw SingularMatrixError("delay-only FIM is singular", delay.condition_number);
  BoundsReport r;
  r.cov_known_full = invert_information(known.matrix);
  r.cov_known = r.cov_known_full.topLeftCorner<3, 3>();
  r.cov_delay = invert_and_extract(delay.matrix, 0, 3);
  r.cov_float_int = cov_float(geom, lb, r.cov_delay, wavelength_m);
  r.peb_known = position_error_bound(r.cov_known);
  r.peb_delay = position_error_bound(r.cov_delay);
  r.cond_known = known.condition_number;
  r.cond_delay = delay.condition_number;
  return r;
}

}  // namespace cpbounds
