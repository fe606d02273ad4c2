#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "alphanet/gemm.hpp"
#include "alphanet/prng.hpp"
#include "alphanet/tensor.hpp"

using namespace alphanet;

namespace {

// Plain triple loop over explicitly transposed operands.
std::vector<double> naive_gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
                               const std::vector<double>& a, std::size_t lda, const std::vector<double>& b,
                               std::size_t ldb, double beta, std::vector<double> c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta ? a[p * lda + i] : a[i * lda + p];
        const double bv = tb ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      c[i * ldc + j] = alpha * acc + beta * c[i * ldc + j];
    }
  }
  return c;
}

}  // namespace

TEST(Gemm, MatchesTripleLoopForEveryTransposeAndStride) {
  PrngStream s(3, "gemm");
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      for (auto [m, n, k] : {std::array<std::size_t, 3>{4, 400, 64}, {7, 5, 3}, {1, 1, 1}, {33, 17, 129}}) {
        const std::size_t lda = (ta ? m : k) + 2, ldb = (tb ? k : n) + 1, ldc = n + 3;
        std::vector<double> a((ta ? k : m) * lda), b((tb ? n : k) * ldb), c(m * ldc);
        for (auto& v : a) v = s.normal();
        for (auto& v : b) v = s.normal();
        for (auto& v : c) v = s.normal();
        for (double beta : {0.0, 1.0, -0.5}) {
          const auto want = naive_gemm(ta, tb, m, n, k, 1.5, a, lda, b, ldb, beta, c, ldc);
          auto got = c;
          gemm(ta, tb, m, n, k, 1.5, a.data(), lda, b.data(), ldb, beta, got.data(), ldc);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              ASSERT_NEAR(got[i * ldc + j], want[i * ldc + j], 1e-10 * (1 + std::abs(want[i * ldc + j])))
                  << ta << tb << " " << m << "x" << n << "x" << k << " beta " << beta;
          // Padding columns stay untouched.
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = n; j < ldc; ++j) ASSERT_EQ(got[i * ldc + j], c[i * ldc + j]);
        }
      }
    }
  }
}

TEST(Gemm, BetaZeroIgnoresNanInOutput) {
  std::vector<double> a{1, 2}, b{3, 4}, c{std::nan("")};
  gemm(false, false, 1, 1, 2, 1.0, a.data(), 2, b.data(), 1, 0.0, c.data(), 1);
  EXPECT_EQ(c[0], 11.0);
}

TEST(Tensor, MatmulAndTranspose) {
  const auto a = Tensor<double>::matrix({{1, 2, 3}, {4, 5, 6}});
  const auto b = Tensor<double>::matrix({{7, 8}, {9, 10}, {11, 12}});
  const auto c = matmul(a, b);
  EXPECT_EQ(c, Tensor<double>::matrix({{58, 64}, {139, 154}}));
  EXPECT_EQ(transpose(transpose(a)), a);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Tensor, ElementwiseHelpers) {
  Tensor<double> a({2, 2}, {1, -2, 3, 4});
  Tensor<double> b({2, 2}, {0.5, 0.5, 0.5, 0.5});
  EXPECT_DOUBLE_EQ(sum(a), 6.0);
  EXPECT_DOUBLE_EQ(dot(a, b), 3.0);
  EXPECT_DOUBLE_EQ(max_abs_diff(a, a + b), 0.5);
  axpy(2.0, b, a);
  EXPECT_EQ(a, Tensor<double>({2, 2}, {2, -1, 4, 5}));
  EXPECT_THROW(a + Tensor<double>({4}), ShapeError);
  EXPECT_EQ(a.at(1, 0), 4.0);
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Prng, SameSeedAndLabelGiveSameSequence) {
  PrngStream a(42, "x"), b(42, "x"), c(43, "x"), d(42, "y");
  std::vector<std::uint64_t> va, vb, vc, vd;
  for (int i = 0; i < 16; ++i) {
    va.push_back(a.next_u64());
    vb.push_back(b.next_u64());
    vc.push_back(c.next_u64());
    vd.push_back(d.next_u64());
  }
  EXPECT_EQ(va, vb);
  EXPECT_NE(va, vc);
  EXPECT_NE(va, vd);
}

TEST(Prng, ForkIgnoresParentConsumption) {
  PrngStream p(1, "root");
  const auto first = p.fork("child").next_u64();
  for (int i = 0; i < 100; ++i) p.next_u64();
  EXPECT_EQ(p.fork("child").next_u64(), first);
  EXPECT_EQ(p.fork("a").fork("b").label(), "root/a/b");
  EXPECT_THROW(p.fork(""), ConfigError);
}

TEST(Prng, UniformMomentsAndRanges) {
  PrngStream s(9, "moments");
  const int n = 200000;
  double mean = 0, sq = 0, nmean = 0, nsq = 0;
  std::set<std::uint64_t> seen;
  for (int i = 0; i < n; ++i) {
    const double u = s.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    mean += u;
    sq += u * u;
    const double z = s.normal();
    nmean += z;
    nsq += z * z;
    const auto k = s.below(7);
    ASSERT_LT(k, 7u);
    seen.insert(k);
    const float f = s.uniform_as<float>();
    ASSERT_GE(f, 0.0f);
    ASSERT_LT(f, 1.0f);
  }
  mean /= n;
  // 5 standard errors of the respective sample means.
  EXPECT_NEAR(mean, 0.5, 5 * std::sqrt(1.0 / 12 / n));
  EXPECT_NEAR(sq / n - mean * mean, 1.0 / 12, 0.002);
  EXPECT_NEAR(nmean / n, 0.0, 5 / std::sqrt(double(n)));
  EXPECT_NEAR(nsq / n, 1.0, 0.02);
  EXPECT_EQ(seen.size(), 7u);
}
