#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "plab/core/error.hpp"
#include "plab/core/rng.hpp"
#include "plab/models/model.hpp"
#include "plab/objectives/objectives.hpp"
#include "plab/trainer/optimizer.hpp"

namespace plab {

enum class ConditionKind { standard, uniform, lora, frozen_ln, frozen_interior, equal_step };

inline std::string to_string(ConditionKind k) {
  switch (k) {
    case ConditionKind::standard: return "standard";
    case ConditionKind::uniform: return "uniform";
    case ConditionKind::lora: return "lora";
    case ConditionKind::frozen_ln: return "frozen_ln";
    case ConditionKind::frozen_interior: return "frozen_interior";
    case ConditionKind::equal_step: return "equal_step";
  }
  return "?";
}

inline ConditionKind parse_condition(std::string_view s) {
  for (auto k : {ConditionKind::standard, ConditionKind::uniform, ConditionKind::lora, ConditionKind::frozen_ln,
                 ConditionKind::frozen_interior, ConditionKind::equal_step}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown condition '" + std::string(s) + "'");
}

struct ConditionConfig {
  ConditionKind kind = ConditionKind::standard;
  double lr = 2e-5;
  double layer_decay = 0.95;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  TrustRatioConfig trust;
  LoRAConfig lora;
  std::size_t micro_batches = 1;
  bool freeze_embeddings_in_interior = true;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (micro_batches == 0) throw ConfigError("micro_batches must be >= 1");
    trust.validate();
    if (kind == ConditionKind::lora) lora.validate();
  }
};

inline bool is_layernorm_param(const std::string& name) {
  return name.find(".ln1.") != std::string::npos || name.find(".ln2.") != std::string::npos ||
         name.rfind("final_ln.", 0) == 0;
}

/// Sets trainable flags for a freezing condition and returns the resulting mask.
/// frozen_ln freezes every norm gain/bias; frozen_interior freezes layers
/// 1..floor(L/2) and, unless disabled, the embeddings.
inline std::map<std::string, bool> apply_freeze(Model& model, ConditionKind kind, bool freeze_embeddings = true) {
  const std::size_t half = model.config().layers / 2;
  for (Parameter& p : model.params()) {
    if (kind == ConditionKind::frozen_ln && is_layernorm_param(p.name)) p.trainable = false;
    if (kind == ConditionKind::frozen_interior) {
      const auto layer = layer_index_of(p.name);
      if (layer && *layer >= 1 && *layer <= half) p.trainable = false;
      if (freeze_embeddings && p.name.rfind("embed.", 0) == 0) p.trainable = false;
    }
  }
  std::map<std::string, bool> mask;
  for (const Parameter& p : model.params()) mask.emplace(p.name, p.trainable);
  return mask;
}

/// Copy of a pretrained model set up for a condition (adapters, frozen sets).
inline Model prepare_condition(const Model& pretrained, const ConditionConfig& cond, std::uint64_t seed) {
  cond.validate();
  if (cond.kind == ConditionKind::lora) return pretrained.with_lora(cond.lora, derive_seed(seed, 0x10a));
  Model m = pretrained;
  m.set_all_trainable(true);
  apply_freeze(m, cond.kind, cond.freeze_embeddings_in_interior);
  return m;
}

struct TrainOptions {
  std::size_t steps = 0;
  std::size_t epochs = 0;   // used when steps == 0
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool dropout = true;
  ObjectiveSettings settings;
  std::size_t divergence_window = 50;
  double divergence_factor = 10.0;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct RatioRecord {
  std::size_t step = 0;
  std::size_t group = 0;
  double ratio = 0.0;
  double raw_ratio = 0.0;  // before trust-ratio rescaling
  double direction_cos = 1.0;  // cosine between the raw and the applied group update
};

struct TrainResult {
  std::vector<StepRecord> losses;
  std::vector<RatioRecord> ratios;
  std::size_t steps = 0;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::vector<StepRecord> trace) : Error(what), trace_(std::move(trace)) {}
  [[nodiscard]] const std::vector<StepRecord>& trace() const { return trace_; }

 private:
  std::vector<StepRecord> trace_;
};

/// Learning rate of one parameter under a condition.
inline double condition_lr(const ConditionConfig& cond, const std::string& name, std::size_t layers) {
  if (cond.kind == ConditionKind::standard) return layerwise_lr(cond.lr, layer_group_of(name), layers, cond.layer_decay);
  return cond.lr;
}

/// One optimizer step: forward/backward over micro-batches, clip, AdamW, and
/// the equal-step rescale at the step boundary.
class Trainer {
 public:
  Trainer(Model& model, ObjectiveKind objective, ConditionConfig cond, TrainOptions opts)
      : model_(&model), objective_(objective), cond_(std::move(cond)), opts_(std::move(opts)) {
    cond_.validate();
    check_compatible(objective_, model.config());
    if (cond_.kind == ConditionKind::equal_step) {
      for (const Parameter& p : model.params()) {
        if (!p.trainable) throw ConfigError("equal-step requires full fine-tuning (found frozen '" + p.name + "')");
      }
    }
    state_.config.weight_decay = cond_.weight_decay;
    partition_ = partition_by_layer(model);
  }

  /// Applies one optimizer step on a prepared batch; returns the batch loss.
  StepRecord step(const Batch& batch, std::uint64_t dropout_seed, std::vector<RatioRecord>* ratios = nullptr) {
    const std::size_t micro = cond_.micro_batches;
    if (batch.size() % micro != 0) throw ConfigError("batch size must be divisible by micro_batches");
    const std::size_t rows = batch.size() / micro;
    const double total_w = batch.weight();
    Gradients accum;
    double loss = 0.0;
    for (std::size_t m = 0; m < micro; ++m) {
      const Batch part = micro == 1 ? batch : batch.rows(m * rows, rows);
      const double w = part.weight() / total_w;
      if (w == 0.0) continue;
      Graph g;
      Binding bind(g, *model_);
      LossOptions lo;
      lo.train = opts_.dropout;
      lo.dropout_seed = derive_seed(dropout_seed, m);
      lo.settings = opts_.settings;
      LossResult r = compute_loss(bind, *model_, part, lo);
      loss += w * r.loss.value().item();
      Gradients gm = g.backward(ops::scale(r.loss, w));
      for (const auto& [name, t] : gm.params()) accum.accumulate(name, t);
    }
    StepRecord rec;
    rec.step = state_.step + 1;
    rec.loss = loss;
    rec.grad_norm = clip_gradients(accum, cond_.clip_norm);
    const ParamSnapshot snap = snapshot_trainable(*model_);
    const std::size_t layers = model_->config().layers;
    adamw_step(state_, *model_, accum, [&](const std::string& n) { return condition_lr(cond_, n, layers); });
    if (cond_.kind == ConditionKind::equal_step) {
      const auto raw = group_update_ratios(snap, *model_, partition_);
      std::optional<ParamSnapshot> proposed;
      if (ratios != nullptr) proposed = snapshot_trainable(*model_);
      const auto done = equal_step_rescale(snap, *model_, partition_, cond_.trust);
      if (ratios != nullptr) {
        const auto cos = group_update_cosines(snap, *proposed, *model_, partition_);
        for (std::size_t i = 0; i < done.size(); ++i) {
          ratios->push_back({rec.step, done[i].group, done[i].ratio, raw[i].ratio, cos[i]});
        }
      }
    } else if (ratios != nullptr) {
      for (const auto& gu : group_update_ratios(snap, *model_, partition_)) {
        ratios->push_back({rec.step, gu.group, gu.ratio, gu.ratio});
      }
    }
    return rec;
  }

  [[nodiscard]] const OptimizerState& state() const { return state_; }
  [[nodiscard]] const LayerGroupPartition& partition() const { return partition_; }

 private:
  Model* model_;
  ObjectiveKind objective_;
  ConditionConfig cond_;
  TrainOptions opts_;
  OptimizerState state_;
  LayerGroupPartition partition_;
};

/// Fine-tunes `model` in place. Data order: corpus shuffled once per epoch with the run seed.
inline TrainResult train(Model& model, ObjectiveKind objective, const ConditionConfig& cond,
                         const std::vector<Sequence>& corpus, const TrainOptions& opts) {
  if (opts.batch_size == 0) throw ConfigError("batch size must be positive");
  if (corpus.size() < opts.batch_size) throw ConfigError("corpus smaller than one batch");
  const std::size_t per_epoch = corpus.size() / opts.batch_size;
  const std::size_t total = opts.steps != 0 ? opts.steps : opts.epochs * per_epoch;
  Trainer trainer(model, objective, cond, opts);
  TrainResult out;
  Rng order_rng(derive_seed(opts.seed, 0x0de5));
  std::vector<std::size_t> order(corpus.size());
  std::size_t cursor = per_epoch;  // forces a shuffle before the first batch
  double initial = 0.0;
  std::size_t above = 0;
  for (std::size_t step = 0; step < total; ++step) {
    if (cursor == per_epoch) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      order_rng.shuffle(order);
      cursor = 0;
    }
    std::vector<Sequence> seqs;
    seqs.reserve(opts.batch_size);
    for (std::size_t i = 0; i < opts.batch_size; ++i) seqs.push_back(corpus[order[cursor * opts.batch_size + i]]);
    ++cursor;
    Rng batch_rng(derive_seed(opts.seed, step, 1));
    const Batch batch = prepare_batch(objective, seqs, batch_rng, model.config(), opts.settings);
    StepRecord rec;
    try {
      rec = trainer.step(batch, derive_seed(opts.seed, step, 2), &out.ratios);
    } catch (const NumericError& e) {
      throw DivergenceError(std::string("training diverged: ") + e.what(), out.losses);
    }
    out.losses.push_back(rec);
    if (step == 0) initial = rec.loss;
    if (!std::isfinite(rec.loss)) throw DivergenceError("non-finite loss", out.losses);
    above = rec.loss > opts.divergence_factor * initial ? above + 1 : 0;
    if (above >= opts.divergence_window) {
      throw DivergenceError("loss stayed above " + std::to_string(opts.divergence_factor) + "x its initial value", out.losses);
    }
  }
  out.steps = total;
  return out;
}

}  // namespace plab
