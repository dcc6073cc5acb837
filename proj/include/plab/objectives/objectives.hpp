#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "plab/core/graph.hpp"
#include "plab/core/ops.hpp"
#include "plab/core/rng.hpp"
#include "plab/models/model.hpp"

namespace plab {

using Sequence = std::vector<int>;

enum class ObjectiveKind { MLM, NSP, SpanDenoise, CausalLM, CausalSpan, SimCSE, BarlowTwins };

inline std::string to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::MLM: return "MLM";
    case ObjectiveKind::NSP: return "NSP";
    case ObjectiveKind::SpanDenoise: return "SpanDenoise";
    case ObjectiveKind::CausalLM: return "CausalLM";
    case ObjectiveKind::CausalSpan: return "CausalSpan";
    case ObjectiveKind::SimCSE: return "SimCSE";
    case ObjectiveKind::BarlowTwins: return "BarlowTwins";
  }
  return "?";
}

inline ObjectiveKind parse_objective(std::string_view s) {
  for (auto k : {ObjectiveKind::MLM, ObjectiveKind::NSP, ObjectiveKind::SpanDenoise, ObjectiveKind::CausalLM,
                 ObjectiveKind::CausalSpan, ObjectiveKind::SimCSE, ObjectiveKind::BarlowTwins}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown objective '" + std::string(s) + "'");
}

inline bool is_token_level(ObjectiveKind k) {
  return k == ObjectiveKind::MLM || k == ObjectiveKind::SpanDenoise || k == ObjectiveKind::CausalLM ||
         k == ObjectiveKind::CausalSpan;
}

inline bool is_contrastive(ObjectiveKind k) { return k == ObjectiveKind::SimCSE || k == ObjectiveKind::BarlowTwins; }

/// Reference (pretraining) objective of a model family.
inline ObjectiveKind reference_objective(const ModelConfig& cfg) {
  return cfg.causal() ? ObjectiveKind::CausalLM : ObjectiveKind::MLM;
}

inline void check_compatible(ObjectiveKind k, const ModelConfig& cfg) {
  if (k == ObjectiveKind::NSP && cfg.causal()) throw ConfigError("NSP requires a bidirectional model");
  if ((k == ObjectiveKind::CausalLM || k == ObjectiveKind::CausalSpan) && !cfg.causal()) {
    throw ConfigError(to_string(k) + " requires a causal model");
  }
}

struct ObjectiveSettings {
  double mask_rate = 0.15;
  double span_p = 1.0 / 3.0;  // geometric span length, mean 1/p
  double temperature = 0.05;
  double barlow_lambda = 5e-3;
  double bn_eps = 1e-5;
  std::optional<PoolMode> pooling;  // overrides the per-objective default
};

/// Pooling used by sentence-level objectives: cls for NSP, last-token for
/// contrastive objectives on causal models, mean otherwise.
inline PoolMode default_pooling(ObjectiveKind k, const ModelConfig& cfg, const ObjectiveSettings& s = {}) {
  if (k == ObjectiveKind::NSP) return PoolMode::cls;
  if (s.pooling) return *s.pooling;
  return cfg.causal() ? PoolMode::last_token : PoolMode::mean;
}

struct Batch {
  ObjectiveKind kind = ObjectiveKind::CausalLM;
  TokenBatch tokens;
  std::vector<int> targets;          // n*t, aligned with the predicting position
  std::vector<double> target_mask;   // n*t
  std::vector<int> pair_labels;      // NSP: 0 = second segment follows, 1 = random
  std::array<std::uint64_t, 2> view_seeds{0, 0};

  [[nodiscard]] std::size_t size() const { return tokens.n; }

  [[nodiscard]] std::size_t target_count() const {
    std::size_t c = 0;
    for (double m : target_mask) c += m != 0.0 ? 1 : 0;
    return c;
  }

  /// Normalizer of the mean loss: target tokens for token-level objectives, samples otherwise.
  [[nodiscard]] double weight() const {
    return is_token_level(kind) ? static_cast<double>(target_count()) : static_cast<double>(tokens.n);
  }

  [[nodiscard]] Batch rows(std::size_t begin, std::size_t count) const {
    Batch b;
    b.kind = kind;
    b.tokens = tokens.rows(begin, count);
    const std::size_t t = tokens.t;
    if (!targets.empty()) {
      b.targets.assign(targets.begin() + static_cast<std::ptrdiff_t>(begin * t),
                       targets.begin() + static_cast<std::ptrdiff_t>((begin + count) * t));
      b.target_mask.assign(target_mask.begin() + static_cast<std::ptrdiff_t>(begin * t),
                           target_mask.begin() + static_cast<std::ptrdiff_t>((begin + count) * t));
    }
    if (!pair_labels.empty()) {
      b.pair_labels.assign(pair_labels.begin() + static_cast<std::ptrdiff_t>(begin),
                           pair_labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
    }
    b.view_seeds = view_seeds;
    return b;
  }
};

namespace detail {

/// Marks contiguous spans with geometric lengths until `budget` positions are covered.
inline std::vector<bool> span_mask(std::size_t len, std::size_t first, std::size_t budget, double p, Rng& rng) {
  std::vector<bool> masked(len, false);
  const std::size_t avail = len - first;
  budget = std::min(budget, avail);
  std::size_t count = 0;
  while (count < budget) {
    const std::size_t span = std::min(rng.geometric(p), budget - count);
    const std::size_t start = first + static_cast<std::size_t>(rng.below(avail - span + 1));
    for (std::size_t i = start; i < start + span; ++i) {
      if (!masked[i]) {
        masked[i] = true;
        ++count;
      }
    }
  }
  return masked;
}

}  // namespace detail

/// Turns raw token sequences into an objective-specific batch.
inline Batch prepare_batch(ObjectiveKind kind, const std::vector<Sequence>& seqs, Rng& rng, const ModelConfig& cfg,
                           const ObjectiveSettings& s = {}) {
  check_compatible(kind, cfg);
  if (seqs.empty()) throw ConfigError("empty batch");
  for (const auto& q : seqs) {
    if (q.empty()) throw ConfigError("empty sequence in batch");
    if (q.size() > cfg.max_seq) throw ConfigError("sequence longer than max_seq");
  }
  if (is_contrastive(kind) && seqs.size() < 2) throw ConfigError(to_string(kind) + " needs at least 2 samples per batch");
  const SpecialTokens sp = cfg.special();
  const int regular = static_cast<int>(cfg.regular_vocab());
  Batch b;
  b.kind = kind;

  if (kind == ObjectiveKind::NSP) {
    std::vector<Sequence> rows;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      if (seqs[i].size() < 2) throw ConfigError("NSP needs sequences of length >= 2");
      const std::size_t mid = seqs[i].size() / 2;
      Sequence a(seqs[i].begin(), seqs[i].begin() + static_cast<std::ptrdiff_t>(mid));
      Sequence second(seqs[i].begin() + static_cast<std::ptrdiff_t>(mid), seqs[i].end());
      int label = 0;
      if (seqs.size() >= 2 && rng.bernoulli(0.5)) {
        std::size_t j = static_cast<std::size_t>(rng.below(seqs.size() - 1));
        if (j >= i) ++j;
        const std::size_t mj = seqs[j].size() / 2;
        second.assign(seqs[j].begin() + static_cast<std::ptrdiff_t>(mj), seqs[j].end());
        label = 1;
      }
      while (a.size() + second.size() + 3 > cfg.max_seq) {
        if (second.size() > 1) {
          second.pop_back();
        } else {
          a.pop_back();
        }
      }
      Sequence row{sp.cls};
      row.insert(row.end(), a.begin(), a.end());
      row.push_back(sp.sep);
      row.insert(row.end(), second.begin(), second.end());
      row.push_back(sp.sep);
      rows.push_back(std::move(row));
      b.pair_labels.push_back(label);
    }
    b.tokens = make_token_batch(rows, sp.pad);
    return b;
  }

  b.tokens = make_token_batch(seqs, sp.pad);
  const std::size_t n = b.tokens.n, t = b.tokens.t;
  b.targets.assign(n * t, 0);
  b.target_mask.assign(n * t, 0.0);

  switch (kind) {
    case ObjectiveKind::MLM: {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < seqs[i].size(); ++p) {
          if (!rng.bernoulli(s.mask_rate)) continue;
          const std::size_t k = i * t + p;
          b.targets[k] = seqs[i][p];
          b.target_mask[k] = 1.0;
          const double u = rng.uniform();
          if (u < 0.8) {
            b.tokens.ids[k] = sp.mask;
          } else if (u < 0.9) {
            b.tokens.ids[k] = static_cast<int>(rng.below(static_cast<std::uint64_t>(regular)));
          }
        }
      }
      if (b.target_count() == 0) throw Error("no masked positions");
      break;
    }
    case ObjectiveKind::SpanDenoise:
    case ObjectiveKind::CausalSpan: {
      const bool causal = kind == ObjectiveKind::CausalSpan;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t len = seqs[i].size();
        if (causal && len < 2) throw ConfigError("CausalSpan needs sequences of length >= 2");
        const auto budget = static_cast<std::size_t>(
            std::max(1L, std::lround(s.mask_rate * static_cast<double>(len))));
        const auto masked = detail::span_mask(len, causal ? 1 : 0, budget, s.span_p, rng);
        for (std::size_t p = 0; p < len; ++p) {
          if (!masked[p]) continue;
          b.tokens.ids[i * t + p] = sp.mask;
          // encoder: predict at the masked slot; decoder: predict from the slot before it
          const std::size_t at = causal ? p - 1 : p;
          b.targets[i * t + at] = seqs[i][p];
          b.target_mask[i * t + at] = 1.0;
        }
      }
      if (b.target_count() == 0) throw Error("no masked positions");
      break;
    }
    case ObjectiveKind::CausalLM: {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p + 1 < seqs[i].size(); ++p) {
          b.targets[i * t + p] = seqs[i][p + 1];
          b.target_mask[i * t + p] = 1.0;
        }
      }
      if (b.target_count() == 0) throw Error("CausalLM batch has no next-token targets");
      break;
    }
    case ObjectiveKind::SimCSE:
    case ObjectiveKind::BarlowTwins: {
      b.targets.clear();
      b.target_mask.clear();
      b.view_seeds = {rng.next_u64(), rng.next_u64()};
      break;
    }
    case ObjectiveKind::NSP: break;
  }
  return b;
}

/// InfoNCE over in-batch negatives: row i of z1 should match row i of z2 under
/// cosine similarity divided by the temperature.
inline Var info_nce_loss(Var z1, Var z2, double temperature) {
  const std::size_t n = z1.value().dim(0);
  if (n < 2) throw ConfigError("InfoNCE needs at least 2 samples");
  Var a = ops::l2_normalize(z1);
  Var b = ops::l2_normalize(z2);
  Var sim = ops::scale(ops::matmul(a, ops::transpose(b)), 1.0 / temperature);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i);
  return ops::cross_entropy(sim, labels);
}

/// sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2 for a square cross-correlation C.
inline Var barlow_twins_from_correlation(Var corr, double lambda) {
  Graph& g = *corr.graph;
  const std::size_t d = corr.value().dim(0);
  if (corr.value().rank() != 2 || corr.value().dim(1) != d) throw ShapeError("cross-correlation must be square");
  Tensor neg_eye(Shape{d, d}, 0.0), weights(Shape{d, d}, std::sqrt(lambda));
  for (std::size_t i = 0; i < d; ++i) {
    neg_eye[i * d + i] = -1.0;
    weights[i * d + i] = 1.0;
  }
  Var diff = ops::mul(ops::add(corr, g.constant(std::move(neg_eye), "neg_eye")), g.constant(std::move(weights), "bt_w"));
  return ops::sum(ops::mul(diff, diff));
}

/// Barlow Twins on two [n, D] embeddings, each standardized per dimension over the batch.
inline Var barlow_twins_loss(Var z1, Var z2, double lambda, double eps) {
  const std::size_t n = z1.value().dim(0);
  if (n < 2) throw ConfigError("Barlow Twins needs at least 2 samples");
  Var a = ops::standardize_columns(z1, eps);
  Var b = ops::standardize_columns(z2, eps);
  Var corr = ops::scale(ops::matmul(ops::transpose(a), b), 1.0 / static_cast<double>(n));
  return barlow_twins_from_correlation(corr, lambda);
}

struct LossOptions {
  bool train = true;             // dropout active
  std::uint64_t dropout_seed = 0;  // token-level and NSP objectives
  ObjectiveSettings settings;
};

struct LossResult {
  Var loss;
  std::vector<Var> final_hidden;  // one per forward view
  double weight = 0.0;
};

/// Loss as a function of final hidden states [n, t, D] (one per view).
inline Var head_loss(Binding& bind, const Model& model, const Batch& batch, const std::vector<Var>& hidden,
                     const ObjectiveSettings& s = {}) {
  const ModelConfig& cfg = model.config();
  const std::size_t n = batch.tokens.n, t = batch.tokens.t, d = cfg.d_model;
  if (is_token_level(batch.kind)) {
    std::vector<std::size_t> rows;
    std::vector<int> tgt;
    for (std::size_t k = 0; k < n * t; ++k) {
      if (batch.target_mask[k] != 0.0) {
        rows.push_back(k);
        tgt.push_back(batch.targets[k]);
      }
    }
    if (rows.empty()) throw Error("batch has no target positions");
    Var flat = ops::gather_rows(ops::reshape(hidden.at(0), Shape{n * t, d}), std::move(rows));
    return ops::cross_entropy(model.lm_logits(bind, flat), tgt);
  }
  if (batch.kind == ObjectiveKind::NSP) {
    Var pooled = pool(hidden.at(0), batch.tokens, PoolMode::cls);
    return ops::cross_entropy(model.nsp_logits(bind, pooled), batch.pair_labels);
  }
  const PoolMode mode = default_pooling(batch.kind, cfg, s);
  Var z1 = pool(hidden.at(0), batch.tokens, mode);
  Var z2 = pool(hidden.at(1), batch.tokens, mode);
  if (batch.kind == ObjectiveKind::SimCSE) return info_nce_loss(z1, z2, s.temperature);
  return barlow_twins_loss(z1, z2, s.barlow_lambda, s.bn_eps);
}

/// Forward pass(es) plus objective head. Contrastive objectives run two forwards
/// whose dropout masks come from the batch's view seeds.
inline LossResult compute_loss(Binding& bind, const Model& model, const Batch& batch, const LossOptions& opts = {}) {
  check_compatible(batch.kind, model.config());
  LossResult r;
  const std::size_t views = is_contrastive(batch.kind) ? 2 : 1;
  if (views == 2 && batch.tokens.n < 2) throw ConfigError("contrastive objective needs at least 2 samples");
  for (std::size_t v = 0; v < views; ++v) {
    ForwardOptions fo;
    fo.train = opts.train;
    fo.dropout_seed = views == 2 ? batch.view_seeds[v] : opts.dropout_seed;
    r.final_hidden.push_back(*model.forward(bind, batch.tokens, fo).final_hidden);
  }
  r.loss = head_loss(bind, model, batch, r.final_hidden, opts.settings);
  r.weight = batch.weight();
  return r;
}

/// Per-sample pooled gradient of the loss with respect to the final hidden state,
/// summed over views and mean-pooled over non-padding positions: [n, D].
inline Tensor capture_objective_gradient(const Model& model, const Batch& batch, const LossOptions& opts = {}) {
  Graph g;
  Binding bind(g, model);
  LossResult r = compute_loss(bind, model, batch, opts);
  std::vector<HookHandle> hooks;
  for (Var h : r.final_hidden) hooks.push_back(g.register_hook(h));
  Gradients grads = g.backward(r.loss);
  Tensor total = grads.hook(hooks.front());
  for (std::size_t v = 1; v < hooks.size(); ++v) {
    const Tensor& gv = grads.hook(hooks[v]);
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += gv[i];
  }
  if (total.squared_norm() == 0.0) throw Error("zero gradient at the final-layer hook (loss disconnected from it)");
  return pool_representation(total, batch.tokens, PoolMode::mean);
}

}  // namespace plab
