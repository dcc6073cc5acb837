#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "plab/core/rng.hpp"
#include "plab/stats/stats.hpp"

using namespace plab;
using namespace plab::stats;

namespace {

// Two-sided sign test by enumerating every sign pattern.
double brute_force_sign_test(std::size_t k, std::size_t n) {
  const double observed = std::abs(2.0 * static_cast<double>(k) - static_cast<double>(n));
  std::uint64_t extreme = 0;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
    const double pos = static_cast<double>(std::popcount(mask));
    if (std::abs(2.0 * pos - static_cast<double>(n)) >= observed) ++extreme;
  }
  return static_cast<double>(extreme) / static_cast<double>(std::uint64_t{1} << n);
}

}  // namespace

TEST(Spearman, EncoderDistanceSlopePairsGivePointEight) {
  const std::vector<double> dist{0.0, 1.318, 1.406, 1.344, 1.353};
  const std::vector<double> slope{0.259, 0.221, 1.089, 0.572, 0.533};
  EXPECT_NEAR(spearman_rho(dist, slope), 0.8, 1e-15);
}

TEST(Spearman, PerfectAndReversedOrderings) {
  const std::vector<double> a{1, 2, 3, 4, 5}, r{5, 4, 3, 2, 1};
  EXPECT_DOUBLE_EQ(spearman_rho(a, a), 1.0);
  EXPECT_DOUBLE_EQ(spearman_rho(a, r), -1.0);
  EXPECT_THROW(spearman_rho(std::vector<double>{1, 2}, std::vector<double>{1, 2}), Error);
  EXPECT_THROW(spearman_rho(a, std::vector<double>(5, 1.0)), Error);
}

TEST(Spearman, InvariantUnderMonotoneTransforms) {
  Rng rng(1);
  for (int c = 0; c < 50; ++c) {
    std::vector<double> x(9), y(9);
    for (std::size_t i = 0; i < 9; ++i) {
      x[i] = rng.uniform(0.1, 3.0);
      y[i] = x[i] + rng.normal();
    }
    std::vector<double> fx(9), gy(9);
    for (std::size_t i = 0; i < 9; ++i) {
      fx[i] = std::exp(3.0 * x[i]);
      gy[i] = std::atan(y[i]) - 7.0;
    }
    EXPECT_NEAR(spearman_rho(fx, gy), spearman_rho(x, y), 1e-14);
  }
}

TEST(Ranks, TiesGetMidRanks) {
  const std::vector<double> v{10, 20, 20, 5, 20};
  EXPECT_EQ(average_ranks(v), (std::vector<double>{2, 4, 4, 1, 4}));
}

TEST(Pearson, KnownValue) {
  // cov = 2, var_x = 2, var_y = 2.8 (population), r = 2 / sqrt(5.6)
  const std::vector<double> x{1, 2, 3, 4, 5}, y{2, 1, 4, 3, 5};
  EXPECT_NEAR(pearson(x, y), 0.8, 1e-15);
}

TEST(SignTest, KnownSmallSampleValues) {
  EXPECT_EQ(sign_test_pvalue(8, 9), 0.0390625);
  EXPECT_EQ(sign_test_pvalue(9, 9), 0.00390625);
}

TEST(SignTest, MatchesEnumerationAndIsSymmetric) {
  for (std::size_t n = 1; n <= 12; ++n) {
    for (std::size_t k = 0; k <= n; ++k) {
      EXPECT_DOUBLE_EQ(sign_test_pvalue(k, n), brute_force_sign_test(k, n)) << k << "/" << n;
      EXPECT_EQ(sign_test_pvalue(k, n), sign_test_pvalue(n - k, n));
    }
  }
  EXPECT_EQ(sign_test_pvalue(0, 0), 1.0);
  EXPECT_THROW(sign_test_pvalue(4, 3), Error);
}

TEST(SignTest, LargeNPathAgreesWithExactPathAtTheBoundary) {
  // n = 60 uses the exact path; recompute it via log-binomials.
  for (std::size_t k : {30u, 38u, 45u, 60u}) {
    double tail = 0.0;
    for (std::size_t i = k; i <= 60; ++i) tail += std::exp(log_choose(60, i) - 60.0 * std::log(2.0));
    EXPECT_NEAR(sign_test_pvalue(k, 60), std::min(1.0, 2.0 * tail), 1e-12);
  }
  EXPECT_NEAR(sign_test_pvalue(100, 200), 1.0, 1e-12);
  EXPECT_LT(sign_test_pvalue(190, 200), 1e-30);
}

TEST(Summarize, PopulationAndSample) {
  const std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
  const Summary p = summarize(v);
  EXPECT_DOUBLE_EQ(p.mean, 5.0);
  EXPECT_DOUBLE_EQ(p.std, 2.0);
  EXPECT_EQ(p.count, 8u);
  EXPECT_NEAR(summarize(v, StdKind::sample).std, std::sqrt(32.0 / 7.0), 1e-15);
  EXPECT_EQ(summarize(std::vector<double>{3.0}, StdKind::sample).std, 0.0);
  EXPECT_THROW(summarize(std::vector<double>{}), Error);
}
