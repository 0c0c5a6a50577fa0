#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "d4s/numerics.hpp"
#include "support.hpp"

using namespace d4s;
using namespace d4s_test;

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& x : m.data()) x = g(rng);
  return m;
}

// Closed-form eigenvalues of a symmetric 3x3 matrix from its characteristic
// cubic (trigonometric solution), ascending.
std::array<double, 3> cubic_eigenvalues(const Matrix& a) {
  const double p1 = a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
  const double q = (a(0, 0) + a(1, 1) + a(2, 2)) / 3.0;
  const double p2 = (a(0, 0) - q) * (a(0, 0) - q) + (a(1, 1) - q) * (a(1, 1) - q) +
                    (a(2, 2) - q) * (a(2, 2) - q) + 2.0 * p1;
  const double p = std::sqrt(p2 / 6.0);
  Matrix b(3, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) b(i, j) = (a(i, j) - (i == j ? q : 0.0)) / p;
  const double det = b(0, 0) * (b(1, 1) * b(2, 2) - b(1, 2) * b(2, 1)) -
                     b(0, 1) * (b(1, 0) * b(2, 2) - b(1, 2) * b(2, 0)) +
                     b(0, 2) * (b(1, 0) * b(2, 1) - b(1, 1) * b(2, 0));
  const double r = std::clamp(det / 2.0, -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  const double e1 = q + 2.0 * p * std::cos(phi);
  const double e3 = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
  const double e2 = 3.0 * q - e1 - e3;
  std::array<double, 3> out = {e1, e2, e3};
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix a = {{1.5, -2.0}, {3.0, 4.25}};
  EXPECT_EQ(matmul(Matrix::identity(2), a), a);
}

TEST(Matmul, HandComputedProduct) {
  EXPECT_EQ(matmul(Matrix{{1, 2}, {3, 4}}, Matrix{{0}, {1}}), (Matrix{{2}, {4}}));
}

TEST(Matmul, MatchesNaiveTripleLoopExactly) {
  std::mt19937_64 rng(1);
  const Matrix a = random_matrix(rng, 8, 8), b = random_matrix(rng, 8, 8);
  Matrix want(8, 8);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 8; ++k) s += a(i, k) * b(k, j);
      want(i, j) = s;
    }
  EXPECT_EQ(matmul(a, b), want);
}

TEST(Matmul, DimensionMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
}

TEST(Matmul, TransposedVariantAgreesWithExplicitTranspose) {
  std::mt19937_64 rng(2);
  const Matrix a = random_matrix(rng, 5, 7), b = random_matrix(rng, 4, 7);
  EXPECT_EQ(matmul_bt(a, b), matmul(a, transpose(b)));
}

TEST(Rank1Update, OffDiagonalOuterProduct) {
  Matrix acc(2, 2);
  const Vector u = {1, 0}, v = {0, 1};
  rank1_update(acc, u, v, 1.0);
  EXPECT_EQ(acc, (Matrix{{0, 1}, {0, 0}}));
}

TEST(Rank1Update, AddsToExistingContents) {
  Matrix acc = Matrix::identity(2);
  const Vector u = {1, 1};
  rank1_update(acc, u, u, 1.0);
  EXPECT_EQ(acc, (Matrix{{2, 1}, {1, 2}}));
}

TEST(Rank1Update, SequenceEqualsStackedMatmul) {
  std::mt19937_64 rng(3);
  constexpr std::size_t n = 20, r = 5, c = 6;
  Matrix acc(r, c), us(r, n), vs(c, n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vector u = gaussian_vector(rng, r), v = gaussian_vector(rng, c);
    rank1_update(acc, u, v, 1.0);
    for (std::size_t j = 0; j < r; ++j) us(j, i) = u[j];
    for (std::size_t j = 0; j < c; ++j) vs(j, i) = v[j];
  }
  EXPECT_LT(max_abs_diff(acc, matmul_bt(us, vs)), 1e-12);
}

TEST(Rank1Update, LengthMismatchThrows) {
  Matrix acc(2, 2);
  const Vector u = {1, 2, 3}, v = {1, 2};
  EXPECT_THROW(rank1_update(acc, u, v, 1.0), ShapeError);
}

TEST(SolveSpd, IdentitySystemReturnsRhs) {
  const Matrix rhs = {{1, -2, 3}, {0.5, 7, -1}};
  EXPECT_EQ(solve_spd(SymmetricPD::identity(3), rhs), rhs);
}

TEST(SolveSpd, ScaledIdentity) {
  Matrix two = Matrix::identity(3);
  two *= 2.0;
  EXPECT_LT(max_abs_diff(solve_spd(SymmetricPD(two), Matrix{{2, 4, 6}}), Matrix{{1, 2, 3}}), 1e-15);
}

TEST(SolveSpd, MatchesExplicitInverseOracle) {
  std::mt19937_64 rng(4);
  for (std::size_t n = 1; n <= 6; ++n) {
    const Matrix b = random_matrix(rng, n, n);
    Matrix a = matmul_bt(b, b);
    for (std::size_t i = 0; i < n; ++i) a(i, i) += 1.0;
    const Matrix rhs = random_matrix(rng, 3, n);
    LMatrix la(n, std::vector<long double>(n)), id(n, std::vector<long double>(n, 0.0L));
    for (std::size_t i = 0; i < n; ++i) {
      id[i][i] = 1.0L;
      for (std::size_t j = 0; j < n; ++j) la[i][j] = a(i, j);
    }
    const LMatrix inv = gauss_jordan_solve(la, id);
    Matrix want(3, n);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t j = 0; j < n; ++j) {
        long double s = 0.0L;
        for (std::size_t k = 0; k < n; ++k) s += rhs(r, k) * inv[k][j];
        want(r, j) = static_cast<double>(s);
      }
    EXPECT_LT(max_abs_diff(solve_spd(SymmetricPD(a), rhs), want), 1e-8) << "dim " << n;
  }
}

TEST(SolveSpd, IndefiniteMatrixNamesLeadingMinor) {
  const SymmetricPD a(Matrix{{1, 0, 0}, {0, 1, 0}, {0, 0, -1}});
  try {
    solve_spd(a, Matrix{{1, 1, 1}});
    FAIL() << "expected SingularityError";
  } catch (const SingularityError& e) {
    EXPECT_EQ(e.leading_minor(), 3u);
    EXPECT_NE(std::string(e.what()).find("leading minor 3"), std::string::npos);
  }
}

TEST(SolveSpd, ZeroMatrixIsRejected) {
  EXPECT_THROW(solve_spd(SymmetricPD(Matrix(2, 2)), Matrix{{1, 1}}), SingularityError);
}

TEST(SolveSpd, ShapeMismatchThrows) {
  EXPECT_THROW(solve_spd(SymmetricPD::identity(3), Matrix{{1, 2}}), ShapeError);
}

TEST(SymmetricPD, MirrorsUpperTriangleExactly) {
  const SymmetricPD s(Matrix{{1, 2}, {99, 3}});
  EXPECT_EQ(s(1, 0), 2.0);
  EXPECT_EQ(s(0, 1), s(1, 0));
}

TEST(L1Norm, ZeroAndHandExample) {
  EXPECT_EQ(l1_norm(Matrix(3, 4)), 0.0);
  EXPECT_EQ(l1_norm(Matrix{{1, -2}, {3, -4}}), 10.0);
}

TEST(L1Norm, EqualsEntrywiseScan) {
  std::mt19937_64 rng(5);
  const Matrix m = random_matrix(rng, 7, 9);
  double s = 0.0;
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 9; ++j) s += std::abs(m(i, j));
  EXPECT_EQ(l1_norm(m), s);
}

TEST(Eigenvalues, DiagonalExtremes) {
  const SymmetricPD d(Matrix{{1, 0, 0}, {0, 2, 0}, {0, 0, 3}});
  EXPECT_EQ(extreme_eigenvalue(d, Extreme::max), 3.0);
  EXPECT_EQ(extreme_eigenvalue(d, Extreme::min), 1.0);
}

TEST(Eigenvalues, MatchCharacteristicPolynomialOracle) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const SymmetricPD a = random_spd(rng, 3, 0.5);
    const auto want = cubic_eigenvalues(a.matrix());
    const Vector got = symmetric_eigenvalues(a);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(got[i], want[i], 1e-6 * std::abs(want[i]));
  }
}

TEST(Eigenvalues, IterationCapReportsResidual) {
  std::mt19937_64 rng(7);
  const SymmetricPD a = random_spd(rng, 6, 0.1);
  EXPECT_THROW(symmetric_eigenvalues(a, 0), ConvergenceError);
}

TEST(Matrix, RaggedLiteralThrows) {
  EXPECT_THROW((Matrix{{1, 2}, {3}}), ShapeError);
}

TEST(Matrix, DataLengthMustMatchShape) {
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
}
