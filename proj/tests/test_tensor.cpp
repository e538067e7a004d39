#include <streambp/tensor.hpp>

#include <boost/multiprecision/cpp_dec_float.hpp>
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

namespace streambp {
namespace {

// Naive triple loop, k ascending from zero.
Matrix<double> triple_loop(const Matrix<double>& a, const Matrix<double>& b) {
  Matrix<double> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

Mask all_allowed(std::size_t r, std::size_t c) {
  Mask m(r, c);
  for (auto& v : m.flat()) v = 1;
  return m;
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix<double> eye{{1, 0}, {0, 1}};
  const Matrix<double> b{{3, 4}, {5, 6}};
  const auto c = matmul<double>(eye, b, Trans::no, nullptr, FlopsCategory::mlp);
  EXPECT_TRUE(bitwise_equal<double>(c, b));
}

TEST(Matmul, RowTimesColumn) {
  const Matrix<double> a{{1, 2}};
  const Matrix<double> b{{3}, {4}};
  const auto c = matmul<double>(a, b, Trans::no, nullptr, FlopsCategory::mlp);
  ASSERT_EQ(c.rows(), 1u);
  ASSERT_EQ(c.cols(), 1u);
  EXPECT_EQ(c(0, 0), 11.0);
}

TEST(Matmul, MatchesTripleLoopBitwise) {
  Rng rng(7);
  const auto a = random_matrix<double>(7, 5, rng, 1.0);
  const auto b = random_matrix<double>(5, 3, rng, 1.0);
  const auto c = matmul<double>(a, b, Trans::no, nullptr, FlopsCategory::mlp);
  EXPECT_TRUE(bitwise_equal<double>(c, triple_loop(a, b)));
}

TEST(Matmul, TransposeFlagUsesBTransposed) {
  Rng rng(8);
  const auto a = random_matrix<double>(4, 6, rng, 1.0);
  const auto bt = random_matrix<double>(3, 6, rng, 1.0);
  Matrix<double> b(6, 3);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 3; ++j) b(i, j) = bt(j, i);
  const auto c = matmul<double>(a, bt, Trans::yes, nullptr, FlopsCategory::mlp);
  EXPECT_TRUE(bitwise_equal<double>(c, triple_loop(a, b)));
}

TEST(Matmul, ReportsTwoMknFlops) {
  Meter meter;
  Rng rng(1);
  const auto a = random_matrix<double>(3, 4, rng, 1.0);
  const auto b = random_matrix<double>(4, 5, rng, 1.0);
  auto c = matmul<double>(a, b, Trans::no, &meter, FlopsCategory::qkv_proj);
  EXPECT_EQ(meter.flops()[FlopsCategory::qkv_proj], 2u * 3 * 4 * 5);
  EXPECT_EQ(meter.flops().total(), 2u * 3 * 4 * 5);
  EXPECT_EQ(meter.live(Tag::activation), 3u * 5 * sizeof(double));
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  const Matrix<double> a(2, 3), b(2, 3);
  EXPECT_THROW(matmul<double>(a, b, Trans::no, nullptr, FlopsCategory::mlp), ShapeError);
  EXPECT_NO_THROW(matmul<double>(a, b, Trans::yes, nullptr, FlopsCategory::mlp));
}

TEST(Matmul, AccumulateFromZeroEqualsPlainProduct) {
  Rng rng(3);
  const auto a = random_matrix<double>(5, 4, rng, 1.0);
  const auto b = random_matrix<double>(4, 6, rng, 1.0);
  Matrix<double> acc(5, 6);
  matmul_add<double>(acc.view(), a, b, Trans::no, nullptr, FlopsCategory::mlp);
  EXPECT_TRUE(bitwise_equal<double>(acc, matmul<double>(a, b, Trans::no, nullptr, FlopsCategory::mlp)));
}

TEST(Matmul, RepeatedRunsAreBitwiseIdentical) {
  Rng rng(11);
  const auto a = random_matrix<double>(9, 13, rng, 1.0);
  const auto b = random_matrix<double>(13, 4, rng, 1.0);
  const auto c1 = matmul<double>(a, b, Trans::no, nullptr, FlopsCategory::mlp);
  const auto c2 = matmul<double>(a, b, Trans::no, nullptr, FlopsCategory::mlp);
  EXPECT_TRUE(bitwise_equal<double>(c1, c2));
}

TEST(View, TiledColumnsRepeatLogically) {
  const Matrix<double> k{{1, 2}, {3, 4}};
  const auto wide = k.cview().tile_cols(3);
  ASSERT_EQ(wide.cols(), 6u);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(wide(1, j), k(1, j % 2));
  // Accumulating into a tiled view folds the repeated columns together.
  Matrix<double> acc(2, 2);
  const Matrix<double> ones{{1, 1, 1, 1, 1, 1}, {1, 1, 1, 1, 1, 1}};
  const Matrix<double> eye{{1, 0}, {0, 1}};
  matmul_add<double>(acc.view().tile_cols(3), eye, ones, Trans::no, nullptr, FlopsCategory::mlp);
  for (double v : acc.flat()) EXPECT_EQ(v, 3.0);
}

TEST(Softmax, UniformRow) {
  const Matrix<double> s{{0, 0}};
  const auto p = stable_softmax_rows<double>(s, all_allowed(1, 2));
  EXPECT_EQ(p(0, 0), 0.5);
  EXPECT_EQ(p(0, 1), 0.5);
}

TEST(Softmax, SingleUnmaskedEntryTakesAllMass) {
  const Matrix<double> s{{3.7, -std::numeric_limits<double>::infinity()}};
  Mask m(1, 2);
  m(0, 0) = 1;
  const auto p = stable_softmax_rows<double>(s, m);
  EXPECT_EQ(p(0, 0), 1.0);
  EXPECT_EQ(p(0, 1), 0.0);
}

TEST(Softmax, LargeLogitsMatchHighPrecision) {
  using Big = boost::multiprecision::cpp_dec_float_50;
  const Matrix<double> s{{1000, 1000, 999}};
  const auto p = stable_softmax_rows<double>(s, all_allowed(1, 3));
  const Big e1 = boost::multiprecision::exp(Big(-1));
  const Big z = Big(2) + e1;
  const double expected[] = {static_cast<double>(Big(1) / z), static_cast<double>(Big(1) / z),
                             static_cast<double>(e1 / z)};
  for (int j = 0; j < 3; ++j) {
    EXPECT_TRUE(std::isfinite(p(0, j)));
    EXPECT_NEAR(p(0, j), expected[j], 1e-12);
  }
}

TEST(Softmax, FullyMaskedRowThrows) {
  const Matrix<double> s{{1, 2}, {3, 4}};
  Mask m(2, 2);
  m(0, 0) = 1;
  EXPECT_THROW(stable_softmax_rows<double>(s, m), DegenerateRowError);
}

TEST(Softmax, RowsSumToOneWithinFourUlp) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(40);
    const auto s = random_matrix<double>(n, n, rng, 30.0);
    Mask m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) m(i, j) = 1;
    const auto p = stable_softmax_rows<double>(s, m);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (m(i, j) == 0) {
          EXPECT_EQ(p(i, j), 0.0);
        }
        sum += p(i, j);
      }
      EXPECT_LE(std::abs(sum - 1.0), 4 * std::numeric_limits<double>::epsilon());
    }
  }
}

TEST(Softmax, InvariantUnderRowShift) {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(10);
    // Multiples of 1/8 keep the shifted values exact.
    Matrix<double> s(3, n), shifted(3, n);
    const double shift = static_cast<double>(rng.uniform_index(1000)) - 500.0;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        s(i, j) = static_cast<double>(rng.uniform_index(160)) / 8.0 - 10.0;
        shifted(i, j) = s(i, j) + shift;
      }
    const auto mask = all_allowed(3, n);
    EXPECT_TRUE(bitwise_equal<double>(stable_softmax_rows<double>(s, mask), stable_softmax_rows<double>(shifted, mask)));
  }
}

TEST(Softmax, BackwardMatchesFiniteDifferences) {
  Rng rng(12);
  const auto s = random_matrix<double>(1, 5, rng, 2.0);
  const auto dp = random_matrix<double>(1, 5, rng, 1.0);
  const auto mask = all_allowed(1, 5);
  const auto p = stable_softmax_rows<double>(s, mask);
  const auto ds = softmax_rows_backward<double>(p, dp);
  for (std::size_t j = 0; j < 5; ++j) {
    auto f = [&](double v) {
      Matrix<double> x = s;
      x(0, j) = v;
      const auto q = stable_softmax_rows<double>(x, mask);
      double l = 0.0;
      for (std::size_t k = 0; k < 5; ++k) l += q(0, k) * dp(0, k);
      return l;
    };
    const double h = 1e-6;
    EXPECT_NEAR(ds(0, j), (f(s(0, j) + h) - f(s(0, j) - h)) / (2 * h), 1e-8);
  }
}

TEST(Elementwise, SigmoidAndSiluClosedForms) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_EQ(silu(0.0), 0.0);
  EXPECT_NEAR(sigmoid(40.0), 1.0, 1e-15);
  EXPECT_NEAR(sigmoid(-40.0), 0.0, 1e-15);
  EXPECT_TRUE(std::isfinite(sigmoid(-800.0)));
  EXPECT_TRUE(std::isfinite(sigmoid(800.0)));
  const Matrix<double> x{{-2, 0, 3}};
  const auto s = silu<double>(x);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(s(0, j), x(0, j) * sigmoid(x(0, j)));
}

TEST(Elementwise, SiluGradMatchesFiniteDifference) {
  for (double x : {-5.0, -1.0, -0.1, 0.0, 0.3, 2.0, 7.0}) {
    const double h = 1e-6;
    EXPECT_NEAR(silu_grad(x), (silu(x + h) - silu(x - h)) / (2 * h), 1e-8) << x;
  }
}

TEST(ArrayMetering, ConstructionCopyMoveRelease) {
  Meter meter;
  {
    Matrix<double> a(4, 5, Tag::activation, &meter);
    EXPECT_EQ(meter.live(Tag::activation), 160u);
    Matrix<double> b = a;
    EXPECT_EQ(meter.live(Tag::activation), 320u);
    Matrix<double> c = std::move(a);
    EXPECT_EQ(meter.live(Tag::activation), 320u);
    c.release();
    EXPECT_EQ(meter.live(Tag::activation), 160u);
    Matrix<float> f(2, 2, Tag::gradient, &meter);
    EXPECT_EQ(meter.live(Tag::gradient), 16u);
  }
  EXPECT_EQ(meter.live(Tag::activation), 0u);
  EXPECT_EQ(meter.live(Tag::gradient), 0u);
  EXPECT_EQ(meter.peak_activation(), 320u);
}

TEST(ArrayMetering, CloneRetagsUnderNewMeter) {
  Meter meter;
  const Matrix<double> src{{1, 2, 3}};
  auto copy = src.clone(Tag::activation, &meter, "x");
  EXPECT_EQ(meter.live(Tag::activation), 24u);
  EXPECT_EQ(meter.label_peak("x"), 24u);
  EXPECT_TRUE(bitwise_equal<double>(copy, src));
}

TEST(RngTest, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
  }
}

TEST(RngTest, KnownSplitMixValues) {
  // SplitMix64 reference outputs for seed 0.
  Rng r(0);
  EXPECT_EQ(r.next_u64(), 0xE220A8397B1DCDAFull);
  EXPECT_EQ(r.next_u64(), 0x6E789E6AA1B965F4ull);
}

TEST(RngTest, UniformStaysInRange) {
  Rng r(9);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform(-2.0, 3.0);
    EXPECT_GE(u, -2.0);
    EXPECT_LT(u, 3.0);
    EXPECT_LT(r.uniform_index(7), 7u);
  }
  EXPECT_NE(r.split(1).next_u64(), r.split(2).next_u64());
}

}  // namespace
}  // namespace streambp
