#include <gtest/gtest.h>

#include <cmath>

#include "krrmix/errors.hpp"
#include "krrmix/linalg.hpp"
#include "krrmix/linalg_reference.hpp"
#include "krrmix/parallel.hpp"
#include "krrmix/rng.hpp"

using namespace krrmix;
namespace la = krrmix::linalg;

namespace {

using M = Tensor<double>;

M randn(std::vector<std::size_t> shape, Rng& rng, double std = 1.0) {
  M t(std::move(shape));
  for (auto& x : t.storage()) x = std * rng.normal();
  return t;
}

// Diagonally dominant so every slice is comfortably invertible.
M well_conditioned(std::vector<std::size_t> shape, Rng& rng) {
  M a = randn(shape, rng, 0.3);
  const std::size_t n = shape.back();
  const std::size_t slices = a.size() / (n * n);
  for (std::size_t s = 0; s < slices; ++s)
    for (std::size_t i = 0; i < n; ++i) a[s * n * n + i * n + i] += 3.0;
  return a;
}

void expect_near(const M& a, const M& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

// Naive triple loop, independent of both kernel paths.
M naive_matmul(const M& a, const M& b) {
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  M c({n, m}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * m + j] += a[i * k + p] * b[p * m + j];
  return c;
}

class Threads : public ::testing::Test {
 protected:
  void SetUp() override { set_num_threads(4); }
  void TearDown() override { set_num_threads(1); }
};

}  // namespace

TEST(MaskedSoftmax, ZeroRowIsUniform) {
  auto s = la::masked_softmax(M::matrix({{0, 0, 0}}), std::nullopt);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(s[j], 1.0 / 3.0, 1e-15);
}

TEST(MaskedSoftmax, SingleAllowedEntry) {
  auto mask = la::Mask::from_allowed(1, 3, {1, 0, 0});
  auto s = la::masked_softmax(M::matrix({{5, 7, 5}}), mask);
  EXPECT_EQ(s[0], 1.0);
  EXPECT_EQ(s[1], 0.0);
  EXPECT_EQ(s[2], 0.0);
}

TEST(MaskedSoftmax, LogThree) {
  auto s = la::masked_softmax(M::matrix({{0, std::log(3.0)}}), std::nullopt);
  EXPECT_NEAR(s[0], 0.25, 1e-15);
  EXPECT_NEAR(s[1], 0.75, 1e-15);
}

TEST(MaskedSoftmax, CausalRowsSumToOneAndZeroAboveDiagonal) {
  Rng rng(1);
  auto s = la::masked_softmax(randn({2, 5, 5}, rng, 3.0), la::Mask::causal(5));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 5; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        const double v = s[b * 25 + i * 5 + j];
        if (j > i) EXPECT_EQ(v, 0.0);
        sum += v;
      }
      EXPECT_NEAR(sum, 1.0, 1e-14);
    }
}

TEST(MaskedSoftmax, LargeScoresStayFinite) {
  auto s = la::masked_softmax(M::matrix({{1000, 1001}}), std::nullopt);
  EXPECT_TRUE(s.all_finite());
  EXPECT_NEAR(s[1], 1.0 / (1.0 + std::exp(-1.0)), 1e-14);
}

TEST(MaskedSoftmax, FullyMaskedRowThrows) {
  auto mask = la::Mask::from_allowed(2, 2, {1, 0, 0, 0});
  EXPECT_THROW(la::masked_softmax(M({2, 2}, 0.0), mask), FullyMaskedRow);
}

TEST(MaskedSoftmax, MaskShapeMismatchThrows) {
  EXPECT_THROW(la::masked_softmax(M({3, 3}, 0.0), la::Mask::causal(4)), ShapeMismatch);
}

TEST(Matmul, MatchesNaiveLoop) {
  Rng rng(2);
  M a = randn({5, 7}, rng), b = randn({7, 3}, rng);
  expect_near(la::matmul(a, b), naive_matmul(a, b), 1e-12);
  expect_near(la::matmul(la::transpose(a), b, true, false), naive_matmul(a, b), 1e-12);
  expect_near(la::matmul(a, la::transpose(b), false, true), naive_matmul(a, b), 1e-12);
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  EXPECT_THROW(la::matmul(M({2, 3}), M({2, 3})), ShapeMismatch);
}

TEST(TriangularSolve, Identity) {
  expect_near(la::solve_lower_triangular(M::matrix({{1, 0}, {0, 1}}), M::matrix({{1}, {3}})),
              M::matrix({{1}, {3}}), 0.0);
}

TEST(TriangularSolve, DiagonalScaling) {
  expect_near(la::solve_lower_triangular(M::matrix({{2, 0}, {0, 4}}), M::matrix({{2}, {8}})),
              M::matrix({{1}, {2}}), 0.0);
}

TEST(TriangularSolve, ForwardSubstitution) {
  expect_near(la::solve_lower_triangular(M::matrix({{1, 0}, {1, 1}}), M::matrix({{1}, {3}})),
              M::matrix({{1}, {2}}), 0.0);
}

TEST(TriangularSolve, IgnoresUpperTriangle) {
  expect_near(la::solve_lower_triangular(M::matrix({{1, 99}, {1, 1}}), M::matrix({{1}, {3}})),
              M::matrix({{1}, {2}}), 0.0);
}

TEST(TriangularSolve, TransposedIsBackSubstitution) {
  Rng rng(3);
  M l = well_conditioned({4, 4}, rng);
  M b = randn({4, 2}, rng);
  M x = la::solve_lower_triangular(l, b, true);
  M lt({4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j <= i; ++j) lt[j * 4 + i] = l[i * 4 + j];
  expect_near(naive_matmul(lt, x), b, 1e-12);
}

TEST(TriangularSolve, SingularDiagonalThrows) {
  EXPECT_THROW(la::solve_lower_triangular(M::matrix({{1, 0}, {1, 0}}), M({2, 1}, 1.0)),
               SingularDiagonal);
}

TEST(GeneralSolve, IdentityReturnsRhs) {
  M b = M::matrix({{1, 2}, {3, 4}});
  expect_near(la::solve_general(M::matrix({{1, 0}, {0, 1}}), b), b, 0.0);
}

TEST(GeneralSolve, TwoByTwo) {
  expect_near(la::solve_general(M::matrix({{2, 1}, {1, 2}}), M::matrix({{3}, {3}})),
              M::matrix({{1}, {1}}), 1e-15);
}

TEST(GeneralSolve, RankOneThrows) {
  EXPECT_THROW(la::solve_general(M::matrix({{1, 1}, {1, 1}}), M::matrix({{1}, {2}})),
               SingularMatrix);
}

TEST(GeneralSolve, ResidualIsSmallOnRandomBatches) {
  Rng rng(4);
  M a = well_conditioned({3, 6, 6}, rng);
  M b = randn({3, 6, 2}, rng);
  M x = la::solve_general(a, b);
  expect_near(la::matmul(a, x), b, 1e-12);
}

TEST(GeneralSolve, NeedsPivoting) {
  // Zero leading entry: elimination without row swaps would divide by zero.
  expect_near(la::solve_general(M::matrix({{0, 1}, {1, 0}}), M::matrix({{2}, {5}})),
              M::matrix({{5}, {2}}), 0.0);
}

TEST(GeneralSolve, TransposedLuSolve) {
  Rng rng(5);
  M a = well_conditioned({5, 5}, rng);
  M b = randn({5, 1}, rng);
  M x = la::lu_solve(la::lu_factor(a), b, true);
  expect_near(la::matmul(a, x, true, false), b, 1e-12);
}

TEST(Normalize, Examples) {
  expect_near(la::l2_normalize_rows(M::matrix({{3, 4}, {1, 0}, {0, 0}})),
              M::matrix({{0.6, 0.8}, {1, 0}, {0, 0}}), 1e-15);
}

TEST(ExplicitInverse, Examples) {
  expect_near(la::explicit_inverse(M::matrix({{1, 0}, {0, 1}})), M::matrix({{1, 0}, {0, 1}}), 0.0);
  expect_near(la::explicit_inverse(M::matrix({{2, 0}, {0, 4}})),
              M::matrix({{0.5, 0}, {0, 0.25}}), 0.0);
}

TEST(ExplicitInverse, ResidualOnRandomMatrix) {
  Rng rng(6);
  M a = well_conditioned({3, 3}, rng);
  expect_near(naive_matmul(a, la::explicit_inverse(a)), M::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}),
              1e-12);
}

TEST(ExplicitInverse, SingularThrows) {
  EXPECT_THROW(la::explicit_inverse(M::matrix({{1, 2}, {2, 4}})), SingularMatrix);
}

TEST_F(Threads, MatmulMatchesReference) {
  Rng rng(7);
  M a = randn({2, 3, 17, 9}, rng), b = randn({2, 3, 9, 11}, rng);
  expect_near(la::matmul(a, b), la::reference::matmul(a, b), 1e-12);
  M bt = randn({2, 3, 11, 9}, rng);
  expect_near(la::matmul(a, bt, false, true), la::reference::matmul(a, bt, false, true), 1e-12);
}

TEST_F(Threads, SoftmaxMatchesReference) {
  Rng rng(8);
  M s = randn({4, 2, 13, 13}, rng, 2.0);
  auto mask = la::Mask::causal(13);
  expect_near(la::masked_softmax(s, mask), la::reference::masked_softmax(s, mask), 1e-14);
}

TEST_F(Threads, SolvesMatchReference) {
  Rng rng(9);
  M a = well_conditioned({3, 2, 12, 12}, rng);
  M b = randn({3, 2, 12, 4}, rng);
  expect_near(la::solve_lower_triangular(a, b), la::reference::solve_lower_triangular(a, b), 1e-12);
  expect_near(la::solve_general(a, b), la::reference::solve_general(a, b), 1e-12);
}

TEST_F(Threads, ResultsIndependentOfThreadCount) {
  Rng rng(10);
  M a = randn({8, 31, 31}, rng), b = randn({8, 31, 5}, rng);
  M many = la::matmul(a, a);
  set_num_threads(1);
  M one = la::matmul(a, a);
  EXPECT_EQ(many.storage(), one.storage());
}
