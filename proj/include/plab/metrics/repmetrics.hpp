#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "plab/core/error.hpp"
#include "plab/metrics/linalg.hpp"
#include "plab/models/model.hpp"
#include "plab/stats/stats.hpp"

namespace plab {

using linalg::Matrix;

/// Pooled representations of the probe set at one depth: n probes x D features.
struct ActivationMatrix {
  Matrix values;
  double depth = 0.0;
  std::string run_id;
};

enum class MetricKind { procrustes, cka, rsa };

inline std::string to_string(MetricKind m) {
  switch (m) {
    case MetricKind::procrustes: return "procrustes";
    case MetricKind::cka: return "cka";
    case MetricKind::rsa: return "rsa";
  }
  return "?";
}

inline MetricKind parse_metric(std::string_view s) {
  for (auto m : {MetricKind::procrustes, MetricKind::cka, MetricKind::rsa}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown metric '" + std::string(s) + "'");
}

struct DepthProfile {
  MetricKind metric = MetricKind::procrustes;
  std::vector<double> depths;
  std::vector<double> values;

  [[nodiscard]] std::size_t size() const { return depths.size(); }
};

struct SlopeFit {
  double alpha = 0.0;
  double beta = 0.0;
  double residual_rms = 0.0;
};

struct NormalizedProfile {
  std::vector<double> fractions;

  [[nodiscard]] double final_concentration() const { return fractions.back(); }
};

/// Column-centers X and scales it to unit Frobenius norm.
inline Matrix preprocess(const Matrix& x) {
  if (x.rows < 2) throw ShapeError("need at least 2 rows");
  for (double v : x.data) {
    if (!std::isfinite(v)) throw NumericError("non-finite activation");
  }
  Matrix c = linalg::center_columns(x);
  const double norm = linalg::frobenius_norm(c);
  if (!(norm > 0.0)) throw NumericError("degenerate representation: constant across rows");
  for (double& v : c.data) v /= norm;
  return c;
}

namespace detail {

inline void require_same_shape(const Matrix& x, const Matrix& y) {
  if (x.rows != y.rows || x.cols != y.cols) {
    throw ShapeError("shape mismatch: " + std::to_string(x.rows) + "x" + std::to_string(x.cols) + " vs " +
                     std::to_string(y.rows) + "x" + std::to_string(y.cols));
  }
}

}  // namespace detail

struct ProcrustesResult {
  double distance = 0.0;
  Matrix rotation;             // R* = U Vᵀ, applied as Ỹ R*
  double nuclear_norm = 0.0;   // Σσ of ỸᵀX̃
};

/// Orthogonal Procrustes alignment of Y onto X on preprocessed inputs.
inline ProcrustesResult procrustes_align(const Matrix& x, const Matrix& y) {
  detail::require_same_shape(x, y);
  const Matrix xt = preprocess(x);
  const Matrix yt = preprocess(y);
  if (xt.data == yt.data) {
    ProcrustesResult same;
    same.rotation = Matrix::identity(x.cols);
    same.nuclear_norm = 1.0;
    return same;
  }
  const Matrix m = linalg::matmul_tn(yt, xt);  // D x D
  const linalg::Svd svd = linalg::jacobi_svd(m);
  ProcrustesResult r;
  r.rotation = linalg::matmul_nt(svd.u, svd.v);
  for (double s : svd.sigma) r.nuclear_norm += s;
  const Matrix aligned = linalg::matmul(yt, r.rotation);
  double s2 = 0.0;
  for (std::size_t i = 0; i < xt.data.size(); ++i) {
    const double d = xt.data[i] - aligned.data[i];
    s2 += d * d;
  }
  r.distance = std::sqrt(s2);
  return r;
}

inline double procrustes_distance(const Matrix& x, const Matrix& y) { return procrustes_align(x, y).distance; }

/// Linear CKA on column-centered inputs. Uses the feature-space form when D <= n
/// and the Gram form otherwise; both give ‖YᵀX‖²/(‖XᵀX‖‖YᵀY‖).
inline double linear_cka(const Matrix& x, const Matrix& y) {
  if (x.rows != y.rows) throw ShapeError("CKA: row counts differ");
  if (x.rows < 2) throw ShapeError("CKA: need at least 2 rows");
  const Matrix xc = linalg::center_columns(x);
  const Matrix yc = linalg::center_columns(y);
  double num = 0.0, dx = 0.0, dy = 0.0;
  auto sq = [](const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s += v * v;
    return s;
  };
  if (std::max(x.cols, y.cols) <= x.rows) {
    num = sq(linalg::matmul_tn(yc, xc));
    dx = std::sqrt(sq(linalg::matmul_tn(xc, xc)));
    dy = std::sqrt(sq(linalg::matmul_tn(yc, yc)));
  } else {
    const Matrix kx = linalg::matmul_nt(xc, xc);
    const Matrix ky = linalg::matmul_nt(yc, yc);
    for (std::size_t i = 0; i < kx.data.size(); ++i) num += kx.data[i] * ky.data[i];
    dx = std::sqrt(sq(kx));
    dy = std::sqrt(sq(ky));
  }
  if (!(dx > 0.0) || !(dy > 0.0)) throw NumericError("CKA: zero-variance representation");
  return std::clamp(num / (dx * dy), 0.0, 1.0);
}

inline double delta_cka(const Matrix& x, const Matrix& y) { return 1.0 - linear_cka(x, y); }

/// Condensed upper-triangular Euclidean distance vector (row pairs i < j).
inline std::vector<double> condensed_distances(const Matrix& x) {
  std::vector<double> out;
  out.reserve(x.rows * (x.rows - 1) / 2);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = i + 1; j < x.rows; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < x.cols; ++k) {
        const double d = x(i, k) - x(j, k);
        s += d * d;
      }
      out.push_back(std::sqrt(s));
    }
  }
  return out;
}

/// 1 - Spearman correlation between the Euclidean RDMs of X and Y.
inline double rsa_distance(const Matrix& x, const Matrix& y) {
  if (x.rows != y.rows) throw ShapeError("RSA: row counts differ");
  if (x.rows < 3) throw ShapeError("RSA: need at least 3 rows");
  const auto dx = condensed_distances(x);
  const auto dy = condensed_distances(y);
  return 1.0 - stats::spearman_rho(dx, dy);
}

inline double metric_value(MetricKind m, const Matrix& before, const Matrix& after) {
  switch (m) {
    case MetricKind::procrustes: return procrustes_distance(before, after);
    case MetricKind::cka: return delta_cka(before, after);
    case MetricKind::rsa: return rsa_distance(before, after);
  }
  throw ConfigError("unknown metric");
}

/// Ordinary least squares fit of values against depths.
inline SlopeFit fit_line(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw ShapeError("slope fit: lengths differ");
  if (xs.size() < 2) throw Error("slope fit: need at least 2 points");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (!(sxx > 0.0)) throw Error("slope fit: need at least 2 distinct depths");
  SlopeFit f;
  f.alpha = sxy / sxx;
  f.beta = my - f.alpha * mx;
  double rss = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = ys[i] - (f.alpha * xs[i] + f.beta);
    rss += r * r;
  }
  f.residual_rms = std::sqrt(rss / n);
  return f;
}

inline SlopeFit fit_locality_slope(const DepthProfile& p) { return fit_line(p.depths, p.values); }

inline NormalizedProfile normalize_profile(const std::vector<double>& values) {
  if (values.empty()) throw Error("empty profile");
  double total = 0.0;
  for (double v : values) {
    if (!(v >= 0.0)) throw Error("profile entries must be nonnegative");
    total += v;
  }
  if (!(total > 0.0)) throw Error("cannot normalize an all-zero profile");
  NormalizedProfile out;
  for (double v : values) out.fractions.push_back(v / total);
  return out;
}

inline NormalizedProfile normalize_profile(const DepthProfile& p) { return normalize_profile(p.values); }

struct CaptureOptions {
  std::size_t chunk = 64;
  PoolMode pooling = PoolMode::mean;
};

/// Pooled probe activations at each requested depth (dropout off).
inline std::map<double, Matrix> capture_activations(const Model& model, const std::vector<std::vector<int>>& probes,
                                                    const std::vector<double>& depths, const CaptureOptions& opts = {}) {
  if (probes.size() < 2) throw ShapeError("need at least 2 probes");
  const std::size_t d = model.config().d_model;
  const int pad = model.config().special().pad;
  std::map<double, Matrix> out;
  for (double depth : depths) out.emplace(depth, Matrix(probes.size(), d));
  const std::size_t chunk = std::max<std::size_t>(1, opts.chunk);
  for (std::size_t begin = 0; begin < probes.size(); begin += chunk) {
    const std::size_t count = std::min(chunk, probes.size() - begin);
    std::vector<std::vector<int>> part(probes.begin() + static_cast<std::ptrdiff_t>(begin),
                                       probes.begin() + static_cast<std::ptrdiff_t>(begin + count));
    const TokenBatch batch = make_token_batch(part, pad);
    for (const auto& [depth, hidden] : forward_hidden(model, batch, depths)) {
      const Tensor pooled = pool_representation(hidden, batch, opts.pooling);
      Matrix& m = out.at(depth);
      std::copy(pooled.data.begin(), pooled.data.end(), m.data.begin() + static_cast<std::ptrdiff_t>(begin * d));
    }
  }
  return out;
}

/// Before/after representational change at each depth for every requested metric.
inline std::map<MetricKind, DepthProfile> profile_from_activations(const std::map<double, Matrix>& before,
                                                                   const std::map<double, Matrix>& after,
                                                                   const std::vector<MetricKind>& metrics) {
  std::map<MetricKind, DepthProfile> out;
  for (MetricKind m : metrics) {
    DepthProfile p;
    p.metric = m;
    for (const auto& [depth, xb] : before) {
      auto it = after.find(depth);
      if (it == after.end()) throw Error("missing capture at depth " + std::to_string(depth));
      p.depths.push_back(depth);
      p.values.push_back(metric_value(m, xb, it->second));
    }
    out.emplace(m, std::move(p));
  }
  return out;
}

inline std::map<MetricKind, DepthProfile> profile_from_runs(
    const Model& before, const Model& after, const std::vector<std::vector<int>>& probes,
    const std::vector<double>& depths = default_depths(),
    const std::vector<MetricKind>& metrics = {MetricKind::procrustes, MetricKind::cka, MetricKind::rsa},
    const CaptureOptions& opts = {}) {
  if (!(before.config() == after.config())) throw ConfigError("profile: model configs differ");
  for (std::size_t i = 1; i < depths.size(); ++i) {
    if (!(depths[i] > depths[i - 1])) throw ConfigError("depths must be strictly increasing");
  }
  return profile_from_activations(capture_activations(before, probes, depths, opts),
                                  capture_activations(after, probes, depths, opts), metrics);
}

}  // namespace plab
