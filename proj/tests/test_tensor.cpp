#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "maha/gradcheck.hpp"
#include "maha/tensor.hpp"
#include "support.hpp"

using namespace maha;
using maha::testing::col;

TEST(Matrix, RejectsEmptyShapes) {
  EXPECT_THROW(Matrix(0, 3), ShapeError);
  EXPECT_THROW(Matrix(2, 0), ShapeError);
  EXPECT_THROW(Matrix(2, 2, std::vector<double>(3)), ShapeError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix m = Matrix::from_rows({{1.5, -2.0}, {0.25, 4.0}});
  const Matrix p = matmul(Matrix::identity(2), m);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(p.values()[i], m.values()[i]);
}

TEST(Matmul, RowTimesColumnIsDotProduct) {
  const Matrix p = matmul(Matrix::from_rows({{1, 2}}), col({3, 4}));
  ASSERT_EQ(p.rows(), 1u);
  ASSERT_EQ(p.cols(), 1u);
  EXPECT_EQ(p(0, 0), 11.0);
}

TEST(Matmul, ZeroAnnihilates) {
  Rng rng(1);
  const Matrix p = matmul(Matrix(3, 4), random_matrix(4, 5, rng));
  EXPECT_EQ(max_abs(p), 0.0);
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
}

TEST(Matmul, TransposedVariantsAgree) {
  Rng rng(2);
  const Matrix a = random_matrix(4, 3, rng);
  const Matrix b = random_matrix(5, 3, rng);
  const Matrix c = random_matrix(4, 5, rng);
  const Matrix nt = matmul_nt(a, b);
  const Matrix ref = matmul(a, transpose(b));
  const Matrix tn = matmul_tn(a, c);
  const Matrix ref2 = matmul(transpose(a), c);
  for (std::size_t i = 0; i < nt.size(); ++i) EXPECT_NEAR(nt.values()[i], ref.values()[i], 1e-14);
  for (std::size_t i = 0; i < tn.size(); ++i) EXPECT_NEAR(tn.values()[i], ref2.values()[i], 1e-14);
}

TEST(Softmax, ZeroRowIsUniform) {
  const Matrix s = softmax_rows(Matrix::from_rows({{0, 0}}));
  EXPECT_DOUBLE_EQ(s(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s(0, 1), 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const Matrix s = softmax_rows(Matrix::from_rows({{1000, 1000, 1000}}));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(s(0, j), 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LogThreeGivesQuarterAndThreeQuarters) {
  const Matrix s = softmax_rows(Matrix::from_rows({{0.0, std::log(3.0)}}));
  EXPECT_NEAR(s(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(s(0, 1), 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneOnRandomMatrices) {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t r = 1 + rng.index(64);
    const std::size_t c = 1 + rng.index(64);
    const Matrix s = softmax_rows(random_matrix(r, c, rng, -30.0, 30.0));
    for (std::size_t i = 0; i < r; ++i) {
      const auto row = s.row(i);
      const double sum = std::accumulate(row.begin(), row.end(), 0.0);
      ASSERT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(Softmax, ShiftInvariant) {
  Rng rng(4);
  const Matrix m = random_matrix(3, 5, rng);
  Matrix shifted = m;
  for (std::size_t j = 0; j < 5; ++j) shifted(1, j) += 7.0;
  const Matrix a = softmax_rows(m);
  const Matrix b = softmax_rows(shifted);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(a(1, j), b(1, j), 1e-14);
}

TEST(Conv1d, CenterTapStrideTwoPicksEvenSamples) {
  const Matrix y = conv1d(col({1, 2, 3, 4}), ConvKernel::center_tap(3, 1), 2, 1);
  ASSERT_EQ(y.rows(), 2u);
  EXPECT_EQ(y(0, 0), 1.0);
  EXPECT_EQ(y(1, 0), 3.0);
}

TEST(Conv1d, CenterTapDilatedIsIdentity) {
  Rng rng(5);
  const Matrix x = random_matrix(9, 4, rng);
  const Matrix y = conv1d(x, ConvKernel::center_tap(3, 4), 1, 2);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.values()[i], x.values()[i]);
}

TEST(Conv1d, ZeroKernelGivesZerosOfStridedLength) {
  Rng rng(6);
  const Matrix y = conv1d(random_matrix(7, 2, rng), ConvKernel(3, 2, 3), 2, 1);
  EXPECT_EQ(y.rows(), 3u);
  EXPECT_EQ(y.cols(), 3u);
  EXPECT_EQ(max_abs(y), 0.0);
}

TEST(Conv1d, ZeroPaddingAtBoundaries) {
  // Taps [1, 0, 0] read the previous row; row 0 reads padding.
  ConvKernel k(3, 1, 1);
  k.at(0, 0, 0) = 1.0;
  const Matrix y = conv1d(col({5, 6, 7}), k, 1, 1);
  EXPECT_EQ(y(0, 0), 0.0);
  EXPECT_EQ(y(1, 0), 5.0);
  EXPECT_EQ(y(2, 0), 6.0);
}

TEST(Conv1d, RejectsChannelMismatchAndBadStride) {
  EXPECT_THROW(conv1d(Matrix(4, 2), ConvKernel(3, 3, 1), 1, 1), ShapeError);
  EXPECT_THROW(conv1d(Matrix(4, 2), ConvKernel(3, 2, 1), 0, 1), ConfigError);
}

TEST(AdaptiveMaxPool, OverlappingWindows) {
  const Matrix y = adaptive_max_pool(col({1, 5, 2, 4, 3}), 2);
  ASSERT_EQ(y.rows(), 2u);
  EXPECT_EQ(y(0, 0), 5.0);
  EXPECT_EQ(y(1, 0), 4.0);
  EXPECT_EQ(pool_window(0, 5, 2), (std::pair<std::size_t, std::size_t>{0, 3}));
  EXPECT_EQ(pool_window(1, 5, 2), (std::pair<std::size_t, std::size_t>{2, 5}));
}

TEST(AdaptiveMaxPool, FullLengthIsIdentity) {
  Rng rng(7);
  const Matrix x = random_matrix(6, 3, rng);
  const Matrix y = adaptive_max_pool(x, 6);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.values()[i], x.values()[i]);
}

TEST(AdaptiveMaxPool, ConstantInputStaysConstant) {
  const Matrix y = adaptive_max_pool(Matrix(10, 2, 3.5), 4);
  for (double v : y.values()) EXPECT_EQ(v, 3.5);
}

TEST(AdaptiveMaxPool, EntriesAreWindowMaximaAboveTheMean) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 2 + rng.index(30);
    const std::size_t n_out = 1 + rng.index(rows);
    const Matrix x = random_matrix(rows, 3, rng);
    const Matrix y = adaptive_max_pool(x, n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
      const auto [lo, hi] = pool_window(i, rows, n_out);
      for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0.0;
        bool found = false;
        for (std::size_t r = lo; r < hi; ++r) {
          mean += x(r, c);
          found = found || x(r, c) == y(i, c);
        }
        mean /= static_cast<double>(hi - lo);
        EXPECT_GE(y(i, c), mean);
        EXPECT_TRUE(found);
      }
    }
  }
}

TEST(GradCheck, QuadraticMatchesAnalytic) {
  std::vector<double> w{1.0, 2.0};
  std::vector<ParamGroup> groups{{"w", std::span<double>(w), {2.0, 4.0}}};
  auto rep = finite_diff_check([&] { return w[0] * w[0] + w[1] * w[1]; }, groups, 1e-6, 1e-4);
  EXPECT_TRUE(rep.pass);
  EXPECT_LT(rep.worst(), 1e-8);
}

TEST(GradCheck, SoftmaxSumOfSquaresAtZero) {
  Matrix z(1, 2);
  const Matrix s = softmax_rows(z);
  Matrix dy = s;
  dy *= 2.0;
  const Matrix g = softmax_rows_backward(s, dy);
  std::vector<ParamGroup> groups{{"z", z.values(), {g.values().begin(), g.values().end()}}};
  auto rep = finite_diff_check([&] { return squared_norm(softmax_rows(z)); }, groups, 1e-6, 1e-4);
  EXPECT_TRUE(rep.pass);
  EXPECT_LT(rep.worst(), 1e-6);
}

TEST(GradCheck, ZeroFunctionPassesWithZeroError) {
  std::vector<double> w{0.3, -0.7, 1.1};
  std::vector<ParamGroup> groups{{"w", std::span<double>(w), {0.0, 0.0, 0.0}}};
  auto rep = finite_diff_check([] { return 0.0; }, groups, 1e-6, 1e-4);
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.worst(), 0.0);
}

TEST(GradCheck, WrongGradientFails) {
  std::vector<double> w{1.0};
  std::vector<ParamGroup> groups{{"w", std::span<double>(w), {3.0}}};
  auto rep = finite_diff_check([&] { return w[0] * w[0]; }, groups, 1e-6, 1e-4);
  EXPECT_FALSE(rep.pass);
}

TEST(GradCheck, NonFiniteObjectiveThrows) {
  std::vector<double> w{1.0};
  std::vector<ParamGroup> groups{{"w", std::span<double>(w), {0.0}}};
  EXPECT_THROW(finite_diff_check([] { return std::nan(""); }, groups, 1e-6, 1e-4), EvaluationError);
}

// Every backward rule against central differences on small random inputs.
class BackwardRules : public ::testing::Test {
 protected:
  Rng rng{42};
  static constexpr double kEps = 1e-6;
  static constexpr double kTol = 1e-4;

  template <class F>
  void check(F&& f, std::vector<ParamGroup> groups) {
    auto rep = finite_diff_check(f, groups, kEps, kTol);
    for (const auto& g : rep.groups) EXPECT_LT(g.max_rel_error, kTol) << g.name;
  }
  static std::vector<double> flat(const Matrix& m) { return {m.values().begin(), m.values().end()}; }
};

TEST_F(BackwardRules, Matmul) {
  Matrix a = random_matrix(5, 4, rng);
  Matrix b = random_matrix(4, 3, rng);
  const Matrix r = random_matrix(5, 3, rng);
  const auto g = matmul_backward(a, b, r);
  check([&] { return frobenius_dot(matmul(a, b), r); }, {{"a", a.values(), flat(g.da)}, {"b", b.values(), flat(g.db)}});
}

TEST_F(BackwardRules, Softmax) {
  Matrix z = random_matrix(6, 5, rng, -2.0, 2.0);
  const Matrix r = random_matrix(6, 5, rng);
  const Matrix g = softmax_rows_backward(softmax_rows(z), r);
  check([&] { return frobenius_dot(softmax_rows(z), r); }, {{"z", z.values(), flat(g)}});
}

TEST_F(BackwardRules, SigmoidAndRelu) {
  Matrix z = random_matrix(4, 4, rng, -2.0, 2.0);
  for (double& v : z.values())
    if (std::abs(v) < 0.05) v += 0.1;  // keep away from the ReLU kink
  const Matrix r = random_matrix(4, 4, rng);
  const Matrix gs = sigmoid_backward(sigmoid(z), r);
  check([&] { return frobenius_dot(sigmoid(z), r); }, {{"z", z.values(), flat(gs)}});
  const Matrix gr = relu_backward(z, r);
  check([&] { return frobenius_dot(relu(z), r); }, {{"z", z.values(), flat(gr)}});
}

TEST_F(BackwardRules, Conv1dStridedAndDilated) {
  for (auto [stride, dilation] : {std::pair<std::size_t, std::size_t>{2, 1}, {1, 2}, {3, 1}, {1, 1}}) {
    Matrix x = random_matrix(13, 4, rng);
    ConvKernel k = init_kernel(3, 4, 5, rng);
    const Matrix y = conv1d(x, k, stride, dilation);
    const Matrix r = random_matrix(y.rows(), y.cols(), rng);
    const auto g = conv1d_backward(x, k, stride, dilation, r);
    check([&] { return frobenius_dot(conv1d(x, k, stride, dilation), r); },
          {{"x", x.values(), flat(g.dx)}, {"kernel", std::span<double>(k.weights), g.dkernel.weights}});
  }
}

TEST_F(BackwardRules, AdaptiveMaxPool) {
  Matrix x = random_matrix(11, 3, rng);
  const Matrix r = random_matrix(4, 3, rng);
  const Matrix g = adaptive_max_pool_backward(x, 4, r);
  check([&] { return frobenius_dot(adaptive_max_pool(x, 4), r); }, {{"x", x.values(), flat(g)}});
}

TEST(Rng, SameSeedSameStream) {
  Rng a(99);
  Rng b(99);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.uniform(-1, 1), b.uniform(-1, 1));
}

TEST(Init, UniformBoundFollowsFanIn) {
  Rng rng(10);
  const Matrix m = init_uniform(16, 16, 16, rng);
  EXPECT_LE(max_abs(m), 0.25);
  EXPECT_GT(max_abs(m), 0.2);
}
