#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "plab/core/error.hpp"
#include "plab/core/rng.hpp"
#include "plab/metrics/repmetrics.hpp"
#include "plab/objectives/objectives.hpp"
#include "plab/stats/stats.hpp"

namespace plab {

/// Fixed list of batches shared by every objective so gradient rows line up.
struct BatchSchedule {
  std::vector<std::vector<Sequence>> batches;
  std::uint64_t seed = 0;
  std::string id;

  [[nodiscard]] std::size_t rows() const {
    std::size_t r = 0;
    for (const auto& b : batches) r += b.size();
    return r;
  }
};

/// Draws `batches` batches of `batch_size` sequences from a corpus.
inline BatchSchedule make_schedule(const std::vector<Sequence>& corpus, std::size_t batches, std::size_t batch_size,
                                   std::uint64_t seed) {
  if (corpus.size() < batch_size) throw ConfigError("corpus smaller than one batch");
  if (batches == 0 || batch_size == 0) throw ConfigError("schedule needs at least one non-empty batch");
  BatchSchedule s;
  s.seed = seed;
  s.id = "sched-" + std::to_string(batches) + "x" + std::to_string(batch_size) + "-" + std::to_string(seed);
  Rng rng(derive_seed(seed, 0x5c4ed));
  std::vector<std::size_t> order(corpus.size());
  std::size_t cursor = corpus.size();
  for (std::size_t b = 0; b < batches; ++b) {
    std::vector<Sequence> batch;
    for (std::size_t i = 0; i < batch_size; ++i) {
      if (cursor == corpus.size()) {
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(corpus[order[cursor++]]);
    }
    s.batches.push_back(std::move(batch));
  }
  return s;
}

struct GradientMatrix {
  Matrix values;  // rows: samples in schedule order; cols: D
  ObjectiveKind objective = ObjectiveKind::CausalLM;
  std::string schedule_id;
  std::vector<std::size_t> batch_offsets;  // first row of each batch, plus the total
};

struct GradientOptions {
  bool dropout = true;
  ObjectiveSettings settings;
};

/// Per-sample final-layer loss gradients, mean-pooled over positions and stacked across batches.
inline GradientMatrix collect_gradients(const Model& model, ObjectiveKind objective, const BatchSchedule& schedule,
                                        const GradientOptions& opts = {}) {
  check_compatible(objective, model.config());
  const std::size_t d = model.config().d_model;
  GradientMatrix g;
  g.objective = objective;
  g.schedule_id = schedule.id;
  g.values = Matrix(schedule.rows(), d);
  std::size_t row = 0;
  for (std::size_t b = 0; b < schedule.batches.size(); ++b) {
    Rng rng(derive_seed(schedule.seed, b, 1));
    const Batch batch = prepare_batch(objective, schedule.batches[b], rng, model.config(), opts.settings);
    LossOptions lo;
    lo.train = opts.dropout;
    lo.dropout_seed = derive_seed(schedule.seed, b, 2);
    lo.settings = opts.settings;
    const Tensor pooled = capture_objective_gradient(model, batch, lo);
    g.batch_offsets.push_back(row);
    std::copy(pooled.data.begin(), pooled.data.end(), g.values.data.begin() + static_cast<std::ptrdiff_t>(row * d));
    row += batch.size();
  }
  g.batch_offsets.push_back(row);
  return g;
}

/// Rows belonging to the listed batches, in the given order.
inline GradientMatrix select_batches(const GradientMatrix& g, const std::vector<std::size_t>& batches) {
  GradientMatrix out;
  out.objective = g.objective;
  out.schedule_id = g.schedule_id;
  std::vector<double> data;
  std::size_t rows = 0;
  for (std::size_t b : batches) {
    if (b + 1 >= g.batch_offsets.size()) throw ShapeError("batch index out of range");
    out.batch_offsets.push_back(rows);
    for (std::size_t r = g.batch_offsets[b]; r < g.batch_offsets[b + 1]; ++r) {
      data.insert(data.end(), g.values.data.begin() + static_cast<std::ptrdiff_t>(r * g.values.cols),
                  g.values.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * g.values.cols));
      ++rows;
    }
  }
  out.batch_offsets.push_back(rows);
  out.values = Matrix(rows, g.values.cols, std::move(data));
  return out;
}

namespace detail {

inline void require_same_schedule(const GradientMatrix& a, const GradientMatrix& b) {
  if (a.schedule_id != b.schedule_id) throw ConfigError("gradient matrices come from different batch schedules");
  if (a.values.rows != b.values.rows || a.values.cols != b.values.cols) {
    throw ShapeError("gradient matrices differ in shape");
  }
}

inline std::vector<double> column_mean(const Matrix& m) {
  std::vector<double> mean(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) mean[j] += m(i, j);
  }
  for (double& v : mean) v /= static_cast<double>(m.rows);
  return mean;
}

inline double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double mean_row_norm(const Matrix& m) {
  double total = 0.0;
  for (std::size_t i = 0; i < m.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) s += m(i, j) * m(i, j);
    total += std::sqrt(s);
  }
  return total / static_cast<double>(m.rows);
}

// A mean gradient this small relative to the per-sample norms is treated as cancelled.
constexpr double kIncoherentRatio = 1e-9;

}  // namespace detail

inline double gradient_procrustes(const GradientMatrix& a, const GradientMatrix& b) {
  detail::require_same_schedule(a, b);
  if (a.values.data == b.values.data) return 0.0;
  return procrustes_distance(a.values, b.values);
}

/// 1 - cos(mean_A, mean_B); nullopt when either mean gradient has cancelled out ("incoherent").
inline std::optional<double> cosine_distance_means(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw ShapeError("cosine: column counts differ");
  if (a.rows == 0 || b.rows == 0) throw ShapeError("cosine: empty matrix");
  const auto ma = detail::column_mean(a);
  const auto mb = detail::column_mean(b);
  const double na = detail::norm(ma), nb = detail::norm(mb);
  if (!(na > detail::kIncoherentRatio * detail::mean_row_norm(a)) ||
      !(nb > detail::kIncoherentRatio * detail::mean_row_norm(b))) {
    return std::nullopt;
  }
  if (ma == mb) return 0.0;
  double dot = 0.0;
  for (std::size_t j = 0; j < ma.size(); ++j) dot += ma[j] * mb[j];
  return std::clamp(1.0 - dot / (na * nb), 0.0, 2.0);
}

/// 1 - Pearson correlation between the two mean gradient vectors.
inline std::optional<double> pearson_distance_means(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw ShapeError("pearson: column counts differ");
  const auto ma = detail::column_mean(a);
  const auto mb = detail::column_mean(b);
  if (!(detail::norm(ma) > detail::kIncoherentRatio * detail::mean_row_norm(a)) ||
      !(detail::norm(mb) > detail::kIncoherentRatio * detail::mean_row_norm(b))) {
    return std::nullopt;
  }
  if (ma == mb) return 0.0;
  return 1.0 - stats::pearson(ma, mb);
}

/// Johnson-Lindenstrauss projection G R / sqrt(k) with iid N(0,1) entries in R.
inline Matrix jl_project(const Matrix& g, std::size_t k, std::uint64_t seed) {
  if (k == 0 || k >= g.cols) throw ConfigError("JL target dimension must be in [1, D)");
  Rng rng(derive_seed(seed, 0x71));
  Matrix r(g.cols, k);
  for (double& v : r.data) v = rng.normal();
  Matrix out = linalg::matmul(g, r);
  const double s = 1.0 / std::sqrt(static_cast<double>(k));
  for (double& v : out.data) v *= s;
  return out;
}

struct CoherenceStats {
  double norm_mean = 0.0;
  double coherence = 0.0;
  double nonzero_fraction = 0.0;
};

/// coherence = ‖mean row‖ / mean ‖row‖; nonzero fraction counts entries with |g| > 1e-12.
inline CoherenceStats coherence_stats(const Matrix& g) {
  if (g.rows == 0 || g.cols == 0) throw ShapeError("coherence: empty matrix");
  CoherenceStats s;
  s.norm_mean = detail::mean_row_norm(g);
  s.coherence = s.norm_mean > 0.0 ? std::min(1.0, detail::norm(detail::column_mean(g)) / s.norm_mean) : 0.0;
  std::size_t nz = 0;
  for (double v : g.data) nz += std::abs(v) > 1e-12 ? 1 : 0;
  s.nonzero_fraction = static_cast<double>(nz) / static_cast<double>(g.data.size());
  return s;
}

struct ObjectiveDistance {
  ObjectiveKind objective = ObjectiveKind::CausalLM;
  double procrustes = 0.0;
  std::optional<double> cosine_full;
  std::optional<double> cosine_jl128;  // absent when D <= 128
  std::optional<double> cosine_jl32;   // absent when D <= 32
  std::optional<double> pearson_means;
  CoherenceStats coherence;
};

struct DistanceReport {
  ObjectiveKind reference = ObjectiveKind::CausalLM;
  std::string schedule_id;
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<ObjectiveDistance> entries;
};

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json_value(const DistanceReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"objective", to_string(e.objective)},
                       {"gradient_procrustes", e.procrustes},
                       {"cosine_full", optional_json(e.cosine_full)},
                       {"cosine_jl128", optional_json(e.cosine_jl128)},
                       {"cosine_jl32", optional_json(e.cosine_jl32)},
                       {"pearson_means", optional_json(e.pearson_means)},
                       {"coherence", e.coherence.coherence},
                       {"per_sample_norm", e.coherence.norm_mean},
                       {"nonzero_fraction", e.coherence.nonzero_fraction},
                       {"incoherent", !e.cosine_full.has_value()}});
  }
  return {{"reference", to_string(r.reference)},
          {"schedule", r.schedule_id},
          {"rows", r.rows},
          {"dim", r.dim},
          {"objectives", entries}};
}

inline ObjectiveDistance distance_to_reference(const GradientMatrix& ref, const GradientMatrix& g,
                                               std::uint64_t jl_seed) {
  ObjectiveDistance e;
  e.objective = g.objective;
  e.coherence = coherence_stats(g.values);
  if (g.objective == ref.objective) {
    // Distance to itself is zero by definition; skip the numerical path.
    e.cosine_full = e.pearson_means = 0.0;
    if (g.values.cols > 128) e.cosine_jl128 = 0.0;
    if (g.values.cols > 32) e.cosine_jl32 = 0.0;
    return e;
  }
  e.procrustes = gradient_procrustes(ref, g);
  e.cosine_full = cosine_distance_means(ref.values, g.values);
  e.pearson_means = pearson_distance_means(ref.values, g.values);
  for (std::size_t k : {std::size_t{128}, std::size_t{32}}) {
    if (k >= g.values.cols) continue;
    auto v = cosine_distance_means(jl_project(ref.values, k, jl_seed), jl_project(g.values, k, jl_seed));
    (k == 128 ? e.cosine_jl128 : e.cosine_jl32) = v;
  }
  return e;
}

/// Distances of each objective to the model's reference objective on one schedule.
/// The reference gradient is collected once and reused.
inline DistanceReport distance_report(const Model& model, const std::vector<ObjectiveKind>& objectives,
                                      const BatchSchedule& schedule, const GradientOptions& opts = {},
                                      std::uint64_t jl_seed = 0) {
  DistanceReport r;
  r.reference = reference_objective(model.config());
  r.schedule_id = schedule.id;
  r.rows = schedule.rows();
  r.dim = model.config().d_model;
  const GradientMatrix ref = collect_gradients(model, r.reference, schedule, opts);
  for (ObjectiveKind k : objectives) {
    if (k == r.reference) {
      r.entries.push_back(distance_to_reference(ref, ref, jl_seed));
    } else {
      r.entries.push_back(distance_to_reference(ref, collect_gradients(model, k, schedule, opts), jl_seed));
    }
  }
  return r;
}

using GradientDistanceFn = std::function<double(const GradientMatrix& ref, const GradientMatrix& other)>;

struct SplitHalfResult {
  double rho = 0.0;
  std::vector<double> first_half;
  std::vector<double> second_half;
};

/// Splits batches at random into two halves, computes each objective's distance
/// to `reference` within each half, and correlates the two orderings.
inline SplitHalfResult split_half_reliability(const GradientDistanceFn& distance, const GradientMatrix& reference,
                                              const std::vector<GradientMatrix>& objectives, std::uint64_t seed) {
  if (objectives.size() < 3) throw ConfigError("split-half reliability needs at least 3 objectives");
  const std::size_t batches = reference.batch_offsets.size() - 1;
  if (batches < 2) throw ConfigError("split-half reliability needs at least 2 batches");
  std::vector<std::size_t> order(batches);
  for (std::size_t i = 0; i < batches; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0x5417));
  rng.shuffle(order);
  const std::vector<std::size_t> a(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(batches / 2));
  const std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(batches / 2),
                                   order.begin() + static_cast<std::ptrdiff_t>(2 * (batches / 2)));
  const GradientMatrix ref_a = select_batches(reference, a), ref_b = select_batches(reference, b);
  SplitHalfResult out;
  for (const auto& g : objectives) {
    if (g.schedule_id != reference.schedule_id) throw ConfigError("objective gradients use a different schedule");
    out.first_half.push_back(distance(ref_a, select_batches(g, a)));
    out.second_half.push_back(distance(ref_b, select_batches(g, b)));
  }
  out.rho = stats::spearman_rho(out.first_half, out.second_half);
  return out;
}

}  // namespace plab
