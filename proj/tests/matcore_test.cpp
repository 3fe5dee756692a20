#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <sstream>

#include "condlora/linalg.hpp"
#include "condlora/matrix.hpp"
#include "condlora/matrix_io.hpp"
#include "condlora/rng.hpp"

using namespace condlora;

namespace {

double orthogonality_error(const Matrix& q) {
  return frobenius_norm(subtract(matmul_tn(q, q), Matrix::identity(q.cols())));
}

double reconstruction_error(const Matrix& x, const SvdResult& r) {
  Matrix us = r.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t k = 0; k < us.cols(); ++k) us(i, k) *= r.s[k];
  return frobenius_norm(subtract(matmul(us, r.vt), x)) / std::max(1.0, frobenius_norm(x));
}

} // namespace

TEST(Matmul, IdentityAndHandArithmetic) {
  const Matrix a{{1, 2}, {3, 4}};
  EXPECT_EQ(matmul(a, Matrix::identity(2)), a);
  EXPECT_EQ(matmul(Matrix::identity(2), Matrix{{5}, {7}}), (Matrix{{5}, {7}}));
  EXPECT_EQ(matmul(a, Matrix{{5, 6}, {7, 8}}), (Matrix{{19, 22}, {43, 50}}));
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3 x 2x3"), std::string::npos) << msg;
  }
}

TEST(Matmul, TransposedVariantsMatchExplicitTranspose) {
  const Matrix a = gaussian(5, 7, 0, 1, 11);
  const Matrix b = gaussian(6, 7, 0, 1, 12);
  const Matrix c = gaussian(5, 3, 0, 1, 13);
  EXPECT_LT(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))), 1e-14);
  EXPECT_LT(max_abs_diff(matmul_tn(a, c), matmul(transpose(a), c)), 1e-14);
}

TEST(Matmul, AssociativityOnSeededTriples) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Matrix a = gaussian(6, 9, 0, 1, derive_seed(s, 1));
    const Matrix b = gaussian(9, 4, 0, 1, derive_seed(s, 2));
    const Matrix c = gaussian(4, 7, 0, 1, derive_seed(s, 3));
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    EXPECT_LT(frobenius_norm(subtract(left, right)) / frobenius_norm(left), 1e-9);
  }
}

TEST(Elementwise, NormsTransposeScaleAdd) {
  EXPECT_DOUBLE_EQ(frobenius_norm(Matrix::identity(3)), std::sqrt(3.0));
  EXPECT_DOUBLE_EQ(frobenius_norm(Matrix{{3, 4}}), 5.0);
  const Matrix a = gaussian(3, 5, 0, 1, 4);
  EXPECT_EQ(scale(a, 0), Matrix(3, 5));
  EXPECT_EQ(transpose(transpose(a)), a);
  EXPECT_THROW(add(Matrix(2, 2), Matrix(2, 3)), ShapeError);
}

TEST(Invert, IdentityAndDiagonal) {
  EXPECT_EQ(invert(Matrix::identity(4)), Matrix::identity(4));
  const Matrix inv = invert(Matrix{{2, 0}, {0, 4}});
  EXPECT_DOUBLE_EQ(inv(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(inv(1, 1), 0.25);
  EXPECT_DOUBLE_EQ(inv(0, 1), 0.0);
}

TEST(Invert, ResidualOnSeededMatrices) {
  int checked = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Matrix a = gaussian(8 + s % 24, 8 + s % 24, 0, 1, s);
    if (condition_estimate(a) >= 1e6) continue;
    ++checked;
    const Matrix x = invert(a);
    EXPECT_LT(frobenius_norm(subtract(matmul(a, x), Matrix::identity(a.rows()))), 1e-8);
  }
  EXPECT_GT(checked, 40);
}

TEST(Invert, SingularMatrixCarriesConditionEstimate) {
  try {
    invert(Matrix{{1, 2}, {2, 4}});
    FAIL() << "expected SingularMatrixError";
  } catch (const SingularMatrixError& e) {
    EXPECT_GT(e.condition(), 1e12);
    EXPECT_NE(std::string(e.what()).find("singular matrix"), std::string::npos);
  }
  EXPECT_THROW(invert(Matrix{{1, 0}, {0, 1e-14}}), SingularMatrixError);
  EXPECT_THROW(invert(Matrix(2, 3)), ShapeError);
}

TEST(Svd, DiagonalAndZero) {
  const SvdResult d = svd(Matrix{{3, 0}, {0, 1}});
  EXPECT_NEAR(d.s[0], 3.0, 1e-15);
  EXPECT_NEAR(d.s[1], 1.0, 1e-15);
  const SvdResult z = svd(Matrix(4, 4));
  for (double v : z.s) EXPECT_EQ(v, 0.0);
  EXPECT_LT(orthogonality_error(z.u), 1e-12);
}

TEST(Svd, ContractOverSeededShapes) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(derive_seed(77, s));
    const std::size_t rows = 1 + rng.below(64);
    const std::size_t cols = 1 + rng.below(64);
    const Matrix x = gaussian(rows, cols, 0, 1, s);
    const SvdResult r = svd(x);
    ASSERT_EQ(r.s.size(), std::min(rows, cols));
    EXPECT_LT(reconstruction_error(x, r), 1e-10) << rows << "x" << cols;
    EXPECT_LT(orthogonality_error(r.u), 1e-8);
    EXPECT_LT(orthogonality_error(transpose(r.vt)), 1e-8);
    for (std::size_t k = 0; k < r.s.size(); ++k) {
      EXPECT_GE(r.s[k], 0.0);
      if (k) {
        EXPECT_LE(r.s[k], r.s[k - 1]);
      }
    }
  }
}

TEST(Svd, TallSeededReconstruction) {
  const Matrix x = gaussian(16, 8, 0, 1, 5);
  EXPECT_LT(reconstruction_error(x, svd(x)), 1e-10);
}

TEST(Svd, RankDeficientKeepsOrthonormalFactors) {
  const Matrix x = matmul(gaussian(32, 4, 0, 1, 1), gaussian(4, 32, 0, 1, 2));
  const SvdResult r = svd(x);
  EXPECT_LT(r.s[4], 1e-9 * frobenius_norm(x));
  EXPECT_LT(orthogonality_error(r.u), 1e-8);
  EXPECT_LT(reconstruction_error(x, r), 1e-10);
}

TEST(Svd, SignConventionLargestEntryNonNegative) {
  const SvdResult r = svd(gaussian(12, 5, 0, 1, 9));
  for (std::size_t k = 0; k < r.u.cols(); ++k) {
    double best = 0.0;
    for (std::size_t i = 0; i < r.u.rows(); ++i)
      if (std::abs(r.u(i, k)) > std::abs(best)) best = r.u(i, k);
    EXPECT_GE(best, 0.0);
  }
}

TEST(Gaussian, ZeroVarianceAndDeterminism) {
  EXPECT_EQ(gaussian(2, 2, 0, 0, 3), Matrix(2, 2));
  EXPECT_EQ(gaussian(4, 6, 0, 1, 42), gaussian(4, 6, 0, 1, 42));
  EXPECT_NE(gaussian(4, 6, 0, 1, 42), gaussian(4, 6, 0, 1, 43));
  EXPECT_THROW(gaussian(1, 1, 0, -1, 0), ConfigError);
}

TEST(Gaussian, SampleMomentsOver6144Draws) {
  const Matrix g = gaussian(768, 8, 0, 1, 2024);
  double mean = 0.0;
  for (double v : g.data()) mean += v;
  mean /= static_cast<double>(g.size());
  double var = 0.0;
  for (double v : g.data()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(g.size() - 1));
  EXPECT_NEAR(mean, 0.0, 0.05);
  EXPECT_NEAR(sd, 1.0, 0.05);
}

TEST(Rng, CounterStreamMatchesDocumentedFormula) {
  Rng rng(123);
  EXPECT_EQ(rng.next_u64(), mix64(123 + 1 * kGoldenGamma));
  EXPECT_EQ(rng.next_u64(), mix64(123 + 2 * kGoldenGamma));
  // SplitMix64 reference output for seed 0.
  EXPECT_EQ(Rng(0).next_u64(), 0xE220A8397B1DCDAFULL);
}

TEST(MatrixText, RoundTripsBitExactly) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    Matrix m = gaussian(3 + s, 4, 0, 1e-3 * static_cast<double>(s + 1), s);
    m(0, 0) = -0.0;
    m(1, 1) = 1e-300;
    std::stringstream ss;
    write_matrix(ss, "layer1.query", m);
    std::string header;
    std::getline(ss, header);
    EXPECT_EQ(header, "MATRIX layer1.query " + std::to_string(m.rows()) + " 4");
    std::string name;
    std::size_t r = 0, c = 0;
    ASSERT_TRUE(parse_matrix_header(header, name, r, c));
    const Matrix back = read_matrix_body(ss, name, r, c);
    for (std::size_t i = 0; i < m.size(); ++i)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(back.data()[i]), std::bit_cast<std::uint64_t>(m.data()[i]));
  }
}

TEST(MatrixText, RejectsTruncatedBlocks) {
  std::stringstream ss("MATRIX x 2 2\n1 2\n3\n");
  EXPECT_THROW(read_bundle(ss), ParseError);
}
