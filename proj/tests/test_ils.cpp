#include "cpbounds/ils.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <random>

namespace cpbounds {
namespace {

Mat random_generator(Eigen::Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Mat g(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) g(i, j) = u(rng);
  g.diagonal().array() += 2.0;
  return g;
}

Vec random_target(Eigen::Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  Vec r(n);
  for (Eigen::Index i = 0; i < n; ++i) r(i) = u(rng);
  return r;
}

IntVector rounded(const Vec& v) {
  IntVector z(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) z[static_cast<std::size_t>(i)] = std::llround(v(i));
  return z;
}

double residual(const LatticeProblem& p, const IntVector& z) { return (p.target - p.generator * to_eigen(z)).norm(); }

/// Box radius guaranteed to contain the optimum: any z with |r - G z| <= rho
/// satisfies |z_i - (G^-1 r)_i| <= rho * |row_i(G^-1)|, where rho is the
/// residual of the rounded real solution.
std::int64_t sound_radius(const LatticeProblem& p) {
  const Mat ginv = p.generator.inverse();
  const double rho = residual(p, rounded(ginv * p.target));
  const double reach = rho * ginv.rowwise().norm().maxCoeff();
  return static_cast<std::int64_t>(std::ceil(reach + 0.5));
}

TEST(Whiten, Examples) {
  EXPECT_TRUE(whiten(4.0 * Mat::Identity(3, 3)).isApprox(0.5 * Mat::Identity(3, 3), 1e-15));
  Vec d(2);
  d << 1.0, 9.0;
  const Mat t = whiten(d.asDiagonal());
  EXPECT_NEAR(t(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(t(1, 1), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(t(0, 1), 0.0);
}

TEST(Whiten, RandomSpdIsWhitened) {
  std::mt19937_64 rng(5);
  for (int k = 0; k < 100; ++k) {
    const Mat s = testing::random_spd(6, rng, 0.1);
    const Mat t = whiten(s);
    EXPECT_LT((t * s * t.transpose() - Mat::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_TRUE(t.isLowerTriangular());
  }
}

TEST(Whiten, RejectsIndefinite) {
  Mat s = Mat::Identity(3, 3);
  s(2, 2) = -1.0;
  EXPECT_THROW(whiten(s), ValidationError);
  Mat z = Mat::Zero(2, 2);
  EXPECT_THROW(whiten(z), ValidationError);
}

TEST(SolveIls, IdentityReducesToRounding) {
  Vec r(2);
  r << 2.3, -0.6;
  EXPECT_EQ(solve_ils({Mat::Identity(2, 2), r}), (IntVector{2, -1}));
}

TEST(SolveIls, LatticePointIsRecovered) {
  std::mt19937_64 rng(3);
  const Mat g = random_generator(2, rng);
  Vec z(2);
  z << 5, -7;
  EXPECT_EQ(solve_ils({g, g * z}), (IntVector{5, -7}));
}

TEST(SolveIls, AgreesWithExhaustiveSearch) {
  std::mt19937_64 rng(20240611);
  int checked = 0;
  for (int k = 0; k < 1000; ++k) {
    const Eigen::Index n = 1 + k % 5;
    const LatticeProblem p{random_generator(n, rng), random_target(n, rng)};
    const IntVector fast = solve_ils(p);
    const IntVector slow = brute_force_ils(p, sound_radius(p));
    ASSERT_EQ(fast, slow) << "instance " << k;
    ++checked;
  }
  EXPECT_EQ(checked, 1000);
}

TEST(SolveIls, HighlyCorrelatedLatticeAgreesWithExhaustiveSearch) {
  // Elongated covariances like the differenced ambiguity covariance.
  std::mt19937_64 rng(99);
  for (int k = 0; k < 100; ++k) {
    const Eigen::Index n = 2 + k % 3;
    Mat s = 0.01 * Mat::Identity(n, n) + Mat::Ones(n, n);
    s += 0.02 * testing::random_spd(n, rng, 0.0);
    const LatticeProblem p{whiten(s), random_target(n, rng)};
    ASSERT_EQ(solve_ils(p), brute_force_ils(p, sound_radius(p))) << "instance " << k;
  }
}

TEST(SolveIls, TranslationInvariance) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::int64_t> shift(-50, 50);
  for (int k = 0; k < 300; ++k) {
    const Eigen::Index n = 1 + k % 6;
    const LatticeProblem p{random_generator(n, rng), random_target(n, rng)};
    IntVector kv(static_cast<std::size_t>(n));
    for (auto& v : kv) v = shift(rng);
    const IntVector base = solve_ils(p);
    const IntVector moved = solve_ils({p.generator, p.target + p.generator * to_eigen(kv)});
    for (std::size_t i = 0; i < kv.size(); ++i) ASSERT_EQ(moved[i], base[i] + kv[i]);
  }
}

TEST(SolveIls, NeverWorseThanRounding) {
  std::mt19937_64 rng(23);
  for (int k = 0; k < 500; ++k) {
    const Eigen::Index n = 1 + k % 8;
    const LatticeProblem p{random_generator(n, rng), random_target(n, rng)};
    const IntVector z = solve_ils(p);
    const IntVector naive = rounded(p.generator.inverse() * p.target);
    ASSERT_LE(residual(p, z), residual(p, naive) * (1.0 + 1e-12));
    const LatticeSolver solver(p.generator);
    ASSERT_LE(residual(p, z), residual(p, solver.babai(p.target)) * (1.0 + 1e-12));
  }
}

TEST(SolveIls, RepeatedCallsIdentical) {
  std::mt19937_64 rng(29);
  const LatticeProblem p{random_generator(6, rng), random_target(6, rng)};
  const IntVector first = solve_ils(p);
  for (int k = 0; k < 10; ++k) EXPECT_EQ(solve_ils(p), first);
}

TEST(SolveIls, TieBreakIsLexicographic) {
  Vec r(1);
  r << 0.5;
  EXPECT_EQ(solve_ils({Mat::Identity(1, 1), r}), IntVector{0});
  Vec r2(2);
  r2 << 0.5, -1.5;
  EXPECT_EQ(solve_ils({Mat::Identity(2, 2), r2}), (IntVector{0, -2}));
  EXPECT_EQ(brute_force_ils({Mat::Identity(2, 2), r2}, 2), (IntVector{0, -2}));
}

TEST(SolveIls, GuardsAndDiagnostics) {
  EXPECT_THROW(LatticeSolver(Mat::Identity(65, 65)), ValidationError);
  Mat singular = Mat::Identity(2, 2);
  singular(1, 1) = 0.0;
  EXPECT_THROW(solve_ils({singular, Vec::Zero(2)}), SingularMatrixError);
  EXPECT_THROW(solve_ils({Mat::Identity(2, 2), Vec::Zero(3)}), ValidationError);
  Vec bad(2);
  bad << 1.0, std::nan("");
  EXPECT_THROW(solve_ils({Mat::Identity(2, 2), bad}), ValidationError);
  // A node budget of one cannot finish a 10-dimensional search.
  std::mt19937_64 rng(31);
  IlsOptions tiny;
  tiny.max_nodes = 1;
  const LatticeSolver solver(random_generator(10, rng), tiny);
  try {
    solver.solve(random_target(10, rng));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("dimension 10"), std::string::npos);
  }
}

TEST(BruteForceIls, Examples) {
  Vec r(1);
  r << 0.49;
  EXPECT_EQ(brute_force_ils({Mat::Identity(1, 1), r}, 2), IntVector{0});
  r << 0.5;
  EXPECT_EQ(brute_force_ils({Mat::Identity(1, 1), r}, 2), IntVector{0});
  EXPECT_THROW(brute_force_ils({Mat::Identity(7, 7), Vec::Zero(7)}, 1), ValidationError);
}

TEST(SolveIls, HigherDimensionAgreesWithShiftedBabaiSearch) {
  // Dimension 12: cross-check by enumerating +-1 perturbations of the answer.
  std::mt19937_64 rng(37);
  for (int k = 0; k < 20; ++k) {
    const LatticeProblem p{random_generator(12, rng), random_target(12, rng)};
    const IntVector z = solve_ils(p);
    const double best = residual(p, z);
    for (std::size_t i = 0; i < z.size(); ++i)
      for (int s : {-1, 1}) {
        IntVector y = z;
        y[i] += s;
        ASSERT_GE(residual(p, y), best - 1e-12);
      }
  }
}

}  // namespace
}  // namespace cpbounds
