#pragma once

// Integer least squares: argmin over z in Z^n of ||r - G z||.
//
// The generator is LLL-reduced in QR form (G Z = Q R with Z unimodular),
// then the closest point is found by depth-first Schnorr-Euchner enumeration
// whose radius starts at the Babai (successive rounding) point and shrinks
// with every improvement. Ties are resolved towards the lexicographically
// smallest z in the original basis.

#include "cpbounds/core.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <Eigen/SVD>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

namespace cpbounds {

inline constexpr Eigen::Index kMaxIlsDimension = 64;
inline constexpr Eigen::Index kMaxBruteForceDimension = 6;

/// Relative slack under which two squared distances count as a tie.
inline constexpr double kIlsTieTolerance = 1e-9;

struct LatticeProblem {
  Mat generator;  // G, square and nonsingular
  Vec target;     // r

  void validate() const {
    if (generator.rows() != generator.cols()) throw ValidationError("lattice generator must be square");
    if (generator.rows() != target.size()) throw ValidationError("lattice target has the wrong dimension");
    if (generator.rows() == 0) throw ValidationError("lattice dimension must be positive");
    if (!generator.allFinite() || !target.allFinite()) throw ValidationError("lattice problem has non-finite entries");
    Eigen::JacobiSVD<Mat> svd(generator);
    const Vec& sv = svd.singularValues();
    if (!(sv(sv.size() - 1) > 1e-12 * sv(0)))
      throw SingularMatrixError("lattice generator is singular", sv(0) / sv(sv.size() - 1));
  }
};

/// Whitening transform T = L^-1 with S = L L^T (lower Cholesky factor), so that
/// T S T^T = I.
inline Mat whiten(const Mat& s) {
  if (s.rows() != s.cols() || s.rows() == 0) throw ValidationError("whiten: matrix must be square and non-empty");
  if (!s.allFinite()) throw ValidationError("whiten: non-finite entries");
  const Mat sym = 0.5 * (s + s.transpose());
  const double floor = 1e-14 * std::abs(sym.trace());
  Eigen::LLT<Mat> llt(sym);
  if (llt.info() != Eigen::Success) throw ValidationError("whiten: matrix is not positive definite");
  const Mat l = llt.matrixL();
  if (!(l.diagonal().array().square().minCoeff() > floor))
    throw ValidationError("whiten: matrix is not positive definite");
  return l.triangularView<Eigen::Lower>().solve(Mat::Identity(s.rows(), s.cols()));
}

namespace detail {

inline bool better_lattice_point(double cost, const IntVector& z, double best_cost, const IntVector& best_z) {
  const double slack = kIlsTieTolerance * std::max(cost, best_cost);
  if (cost < best_cost - slack) return true;
  if (cost > best_cost + slack) return false;
  return z < best_z;
}

inline double lattice_residual2(const Mat& g, const Vec& r, const IntVector& z) {
  return (r - g * to_eigen(z)).squaredNorm();
}

}  // namespace detail

struct IlsOptions {
  double lll_delta = 0.99;
  std::uint64_t max_nodes = 200'000'000;
};

/// Preprocesses one generator; solve() can then be called for many targets.
class LatticeSolver {
 public:
  using IntMat = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

  explicit LatticeSolver(Mat generator, IlsOptions options = {})
      : g_(std::move(generator)), options_(options) {
    const Eigen::Index n = g_.rows();
    if (n > kMaxIlsDimension)
      throw ValidationError("ILS dimension " + std::to_string(n) + " exceeds the guard of " +
                            std::to_string(kMaxIlsDimension));
    LatticeProblem{g_, Vec::Zero(n)}.validate();
    reduce();
  }

  Eigen::Index dimension() const { return g_.rows(); }
  const Mat& generator() const { return g_; }
  /// Upper-triangular factor of the reduced basis.
  const Mat& reduced_r() const { return r_; }
  const IntMat& unimodular() const { return z_; }

  /// Exact closest lattice point to `target`.
  IntVector solve(const Vec& target) const {
    const Eigen::Index n = dimension();
    if (target.size() != n) throw ValidationError("ILS target has the wrong dimension");
    if (!target.allFinite()) throw ValidationError("ILS target is not finite");
    Search s{*this, qt_ * target, target};
    s.w.assign(static_cast<std::size_t>(n), 0);
    // The Babai point in the reduced basis sets the initial radius.
    s.best_z = babai(target);
    s.best_cost = detail::lattice_residual2(g_, target, s.best_z);
    s.enumerate(n - 1, 0.0);
    return s.best_z;
  }

  /// Successive-rounding point in the reduced basis (not optimal in general).
  IntVector babai(const Vec& target) const {
    const Eigen::Index n = dimension();
    const Vec y = qt_ * target;
    IntVector w(static_cast<std::size_t>(n));
    for (Eigen::Index k = n - 1; k >= 0; --k) {
      double acc = y(k);
      for (Eigen::Index j = k + 1; j < n; ++j) acc -= r_(k, j) * static_cast<double>(w[static_cast<std::size_t>(j)]);
      w[static_cast<std::size_t>(k)] = checked_round(acc / r_(k, k));
    }
    return to_original(w);
  }

 private:
  struct Search {
    const LatticeSolver& solver;
    Vec y;
    const Vec& target;
    IntVector w;
    IntVector best_z;
    double best_cost = std::numeric_limits<double>::infinity();
    std::uint64_t nodes = 0;

    double bound() const { return best_cost * (1.0 + 2.0 * kIlsTieTolerance) + 1e-300; }

    void enumerate(Eigen::Index k, double partial) {
      const Mat& r = solver.r_;
      const Eigen::Index n = r.rows();
      double acc = y(k);
      for (Eigen::Index j = k + 1; j < n; ++j) acc -= r(k, j) * static_cast<double>(w[static_cast<std::size_t>(j)]);
      const double center = acc / r(k, k);
      const double rkk2 = r(k, k) * r(k, k);
      const std::int64_t first = checked_round(center);
      const std::int64_t side = center >= static_cast<double>(first) ? 1 : -1;
      for (std::int64_t step = 0;; ++step) {
        // first, first+side, first-side, first+2side, ... (nondecreasing |center - t|)
        const std::int64_t offset = (step + 1) / 2;
        const std::int64_t t = first + ((step % 2 == 1) ? side * offset : -side * offset);
        const double diff = center - static_cast<double>(t);
        const double cost = partial + rkk2 * diff * diff;
        if (cost > bound()) break;
        if (++nodes > solver.options_.max_nodes)
          throw NumericalError("ILS enumeration exceeded " + std::to_string(solver.options_.max_nodes) +
                               " nodes (dimension " + std::to_string(n) + ", radius^2 " + std::to_string(best_cost) +
                               ")");
        w[static_cast<std::size_t>(k)] = t;
        if (k == 0) {
          IntVector z = solver.to_original(w);
          const double exact = detail::lattice_residual2(solver.g_, target, z);
          if (detail::better_lattice_point(exact, z, best_cost, best_z)) {
            best_cost = exact;
            best_z = std::move(z);
          }
        } else {
          enumerate(k - 1, cost);
        }
      }
    }
  };

  static std::int64_t checked_round(double v) {
    if (!std::isfinite(v) || std::abs(v) > 4.5e15) throw NumericalError("ILS coordinate out of integer range");
    return static_cast<std::int64_t>(std::llround(v));
  }

  IntVector to_original(const IntVector& w) const {
    const Eigen::Index n = dimension();
    IntVector z(static_cast<std::size_t>(n), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      std::int64_t acc = 0;
      for (Eigen::Index j = 0; j < n; ++j) acc += z_(i, j) * w[static_cast<std::size_t>(j)];
      z[static_cast<std::size_t>(i)] = acc;
    }
    return z;
  }

  void size_reduce(Eigen::Index i, Eigen::Index k) {
    const double mu = std::round(r_(i, k) / r_(i, i));
    if (mu == 0.0) return;
    const std::int64_t m = checked_round(mu);
    r_.col(k).head(i + 1) -= mu * r_.col(i).head(i + 1);
    z_.col(k) -= m * z_.col(i);
  }

  void swap_columns(Eigen::Index k) {
    const Eigen::Index n = dimension();
    r_.col(k - 1).swap(r_.col(k));
    z_.col(k - 1).swap(z_.col(k));
    // Restore triangularity on rows k-1, k with a Givens rotation.
    const double a = r_(k - 1, k - 1);
    const double b = r_(k, k - 1);
    const double h = std::hypot(a, b);
    const double c = a / h;
    const double s = b / h;
    for (Eigen::Index j = k - 1; j < n; ++j) {
      const double top = r_(k - 1, j);
      const double bot = r_(k, j);
      r_(k - 1, j) = c * top + s * bot;
      r_(k, j) = -s * top + c * bot;
    }
    r_(k, k - 1) = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double top = qt_(k - 1, j);
      const double bot = qt_(k, j);
      qt_(k - 1, j) = c * top + s * bot;
      qt_(k, j) = -s * top + c * bot;
    }
  }

  void reduce() {
    const Eigen::Index n = dimension();
    Eigen::HouseholderQR<Mat> qr(g_);
    r_ = qr.matrixQR().triangularView<Eigen::Upper>();
    qt_ = qr.householderQ().transpose();
    z_ = IntMat::Identity(n, n);
    Eigen::Index k = 1;
    std::uint64_t iterations = 0;
    while (k < n) {
      if (++iterations > 100'000'000ULL) throw NumericalError("LLL reduction did not terminate");
      size_reduce(k - 1, k);
      const double lhs = options_.lll_delta * r_(k - 1, k - 1) * r_(k - 1, k - 1);
      const double rhs = r_(k - 1, k) * r_(k - 1, k) + r_(k, k) * r_(k, k);
      if (lhs > rhs) {
        swap_columns(k);
        k = std::max<Eigen::Index>(k - 1, 1);
      } else {
        for (Eigen::Index i = k - 2; i >= 0; --i) size_reduce(i, k);
        ++k;
      }
    }
  }

  Mat g_;
  IlsOptions options_;
  Mat r_;
  Mat qt_;
  IntMat z_;
};

/// Exact closest lattice point for one problem.
inline IntVector solve_ils(const LatticeProblem& p, IlsOptions options = {}) {
  p.validate();
  return LatticeSolver(p.generator, options).solve(p.target);
}

/// Exhaustive search over the box round(G^-1 r) +- box_radius (test oracle).
inline IntVector brute_force_ils(const LatticeProblem& p, std::int64_t box_radius) {
  p.validate();
  const Eigen::Index n = p.generator.rows();
  if (n > kMaxBruteForceDimension) throw ValidationError("brute-force ILS limited to dimension 6");
  if (box_radius < 0) throw ValidationError("box radius must be non-negative");
  const Vec real = p.generator.partialPivLu().solve(p.target);
  IntVector center(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) center[static_cast<std::size_t>(i)] = std::llround(real(i));
  IntVector z(center);
  for (auto& v : z) v -= box_radius;
  IntVector best;
  double best_cost = std::numeric_limits<double>::infinity();
  for (;;) {
    const double cost = detail::lattice_residual2(p.generator, p.target, z);
    if (best.empty() || detail::better_lattice_point(cost, z, best_cost, best)) {
      best = z;
      best_cost = cost;
    }
    Eigen::Index i = n - 1;
    for (; i >= 0; --i) {
      auto& v = z[static_cast<std::size_t>(i)];
      if (v < center[static_cast<std::size_t>(i)] + box_radius) {
        ++v;
        break;
      }
      v = center[static_cast<std::size_t>(i)] - box_radius;
    }
    if (i < 0) break;
  }
  return best;
}

}  // namespace cpbounds
