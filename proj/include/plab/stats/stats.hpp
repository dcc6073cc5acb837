#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "plab/core/error.hpp"

namespace plab::stats {

/// 1-based ranks; tied values share the average of their positions.
inline std::vector<double> average_ranks(std::span<const double> xs) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("pearson: series lengths differ");
  if (xs.size() < 2) throw Error("pearson: need at least 2 pairs");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw Error("correlation of a constant series is undefined");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Spearman's rho: Pearson correlation of mid-ranks.
inline double spearman_rho(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("spearman: series lengths differ");
  if (xs.size() < 3) throw Error("spearman: need at least 3 pairs");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  return pearson(rx, ry);
}

inline double log_choose(std::size_t n, std::size_t k) {
  return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
         std::lgamma(static_cast<double>(n - k) + 1.0);
}

/// Two-sided sign test: p = min(1, 2 * P(X >= max(k, n-k))), X ~ Binomial(n, 1/2).
inline double sign_test_pvalue(std::size_t k, std::size_t n) {
  if (k > n) throw Error("sign test: positives exceed trials");
  if (n == 0) return 1.0;
  const std::size_t lo = std::max(k, n - k);
  double tail = 0.0;
  if (n <= 60) {
    // Exact integer arithmetic for the binomial coefficients.
    unsigned long long c = 1;  // C(n, n)
    unsigned long long sum = 0;
    for (std::size_t i = n;; --i) {
      sum += c;
      if (i == lo) break;
      // C(n, i-1) = C(n, i) * i / (n - i + 1)
      c = c * i / (n - i + 1);
    }
    tail = std::ldexp(static_cast<double>(sum), -static_cast<int>(n));
  } else {
    for (std::size_t i = lo; i <= n; ++i) tail += std::exp(log_choose(n, i) - static_cast<double>(n) * std::log(2.0));
  }
  return std::min(1.0, 2.0 * tail);
}

struct Summary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

enum class StdKind { population, sample };

inline Summary summarize(std::span<const double> values, StdKind kind = StdKind::population) {
  if (values.empty()) throw Error("summarize: no values");
  Summary s;
  s.count = values.size();
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.count);
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  if (kind == StdKind::sample) {
    s.std = s.count > 1 ? std::sqrt(ss / static_cast<double>(s.count - 1)) : 0.0;
  } else {
    s.std = std::sqrt(ss / static_cast<double>(s.count));
  }
  return s;
}

}  // namespace plab::stats
