#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "plab/core/error.hpp"
#include "plab/core/graph.hpp"
#include "plab/core/tensor.hpp"
#include "plab/models/model.hpp"

namespace plab {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct Moments {
  Tensor first;
  Tensor second;
};

struct OptimizerState {
  AdamWConfig config;
  std::map<std::string, Moments> moments;
  std::size_t step = 0;
};

/// One AdamW update of a single array with decoupled weight decay and
/// bias-corrected moments. `step` is 1-based.
inline void adamw_update(std::span<double> w, std::span<const double> g, std::span<double> m, std::span<double> v,
                         std::size_t step, double lr, const AdamWConfig& cfg) {
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    w[i] = w[i] * decay - lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

/// Applies AdamW to every trainable parameter that has a gradient.
inline void adamw_step(OptimizerState& state, Model& model, const Gradients& grads,
                       const std::function<double(const std::string&)>& lr_for) {
  for (const auto& [name, g] : grads.params()) {
    if (!g.all_finite()) throw NumericError("non-finite gradient for '" + name + "'");
  }
  ++state.step;
  for (Parameter& p : model.params()) {
    if (!p.trainable || !grads.has(p.name)) continue;
    const Tensor& g = grads.param(p.name);
    auto [it, inserted] = state.moments.try_emplace(p.name);
    if (inserted) {
      it->second.first = Tensor(p.value.shape, 0.0);
      it->second.second = Tensor(p.value.shape, 0.0);
    }
    adamw_update(p.value.values(), g.values(), it->second.first.values(), it->second.second.values(), state.step,
                 lr_for(p.name), state.config);
  }
}

/// Trainable parameters grouped by transformer layer index. Group 0 holds
/// everything without a layer index (embeddings, final norm, heads).
struct LayerGroupPartition {
  std::map<std::size_t, std::vector<std::string>> groups;

  [[nodiscard]] std::size_t group_of(const std::string& name) const {
    for (const auto& [id, names] : groups) {
      if (std::find(names.begin(), names.end(), name) != names.end()) return id;
    }
    throw ConfigError("parameter '" + name + "' is not in the partition");
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t c = 0;
    for (const auto& [id, names] : groups) c += names.size();
    return c;
  }
};

inline std::size_t layer_group_of(const std::string& name) { return layer_index_of(name).value_or(0); }

inline LayerGroupPartition partition_by_layer(const Model& model) {
  LayerGroupPartition part;
  for (const Parameter& p : model.params()) {
    if (p.trainable) part.groups[layer_group_of(p.name)].push_back(p.name);
  }
  return part;
}

/// base * decay^(L - layer) for layer groups 1..L; group 0 takes the bottom layer's rate.
inline double layerwise_lr(double base, std::size_t group, std::size_t layers, double decay = 0.95) {
  if (group > layers) throw ConfigError("unknown layer group " + std::to_string(group));
  const std::size_t layer = group == 0 ? 1 : group;
  return base * std::pow(decay, static_cast<double>(layers - layer));
}

inline double global_grad_norm(const Gradients& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads.params()) s += g.squared_norm();
  return std::sqrt(s);
}

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_gradients(Gradients& grads, double max_norm = 1.0) {
  const double norm = global_grad_norm(grads);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm > max_norm) {
    const double c = max_norm / norm;
    for (auto& [name, g] : grads.params()) {
      for (double& v : g.data) v *= c;
    }
  }
  return norm;
}

using ParamSnapshot = std::map<std::string, Tensor>;

inline ParamSnapshot snapshot_trainable(const Model& model) {
  ParamSnapshot s;
  for (const Parameter& p : model.params()) {
    if (p.trainable) s.emplace(p.name, p.value);
  }
  return s;
}

struct TrustRatioConfig {
  double tau = 1e-3;
  double eps = 1e-12;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("trust ratio must be positive");
  }
};

struct GroupUpdate {
  std::size_t group = 0;
  double weight_norm = 0.0;
  double raw_update_norm = 0.0;
  double scale = 1.0;
  double ratio = 0.0;  // ||p - p_old|| / ||p_old|| after the step
};

namespace detail {

inline std::pair<double, double> group_norms(const ParamSnapshot& old, const Model& model,
                                             const std::vector<std::string>& names) {
  double w2 = 0.0, u2 = 0.0;
  for (const auto& name : names) {
    auto it = old.find(name);
    if (it == old.end()) throw ConfigError("no snapshot for '" + name + "'");
    const Tensor& before = it->second;
    const Tensor& after = model.param(name).value;
    for (std::size_t i = 0; i < before.size(); ++i) {
      w2 += before[i] * before[i];
      const double du = after[i] - before[i];
      u2 += du * du;
    }
  }
  return {std::sqrt(w2), std::sqrt(u2)};
}

}  // namespace detail

/// Per-group update ratio ||ΔW_g|| / ||W_g|| of the step that produced `model` from `old`.
inline std::vector<GroupUpdate> group_update_ratios(const ParamSnapshot& old, const Model& model,
                                                   const LayerGroupPartition& part) {
  std::vector<GroupUpdate> out;
  for (const auto& [id, names] : part.groups) {
    auto [w, u] = detail::group_norms(old, model, names);
    GroupUpdate gu;
    gu.group = id;
    gu.weight_norm = w;
    gu.raw_update_norm = u;
    gu.ratio = w > 0.0 ? u / w : 0.0;
    out.push_back(gu);
  }
  return out;
}

/// Equal-step control: for every group,
///   p <- p_old + (tau * ||W_old|| / (||ΔW|| + eps)) * (p - p_old)
/// so each group's update has norm tau * ||W_old|| and keeps its direction.
/// Per-group cosine between the update old -> proposed and the update old -> model.
inline std::vector<double> group_update_cosines(const ParamSnapshot& old, const ParamSnapshot& proposed,
                                                const Model& model, const LayerGroupPartition& part) {
  std::vector<double> out;
  for (const auto& [id, names] : part.groups) {
    double dot = 0.0, a2 = 0.0, b2 = 0.0;
    for (const auto& name : names) {
      const Tensor& before = old.at(name);
      const Tensor& raw = proposed.at(name);
      const Tensor& now = model.param(name).value;
      for (std::size_t i = 0; i < before.size(); ++i) {
        const double a = raw[i] - before[i], b = now[i] - before[i];
        dot += a * b;
        a2 += a * a;
        b2 += b * b;
      }
    }
    out.push_back(a2 > 0.0 && b2 > 0.0 ? dot / std::sqrt(a2 * b2) : 1.0);
  }
  return out;
}

inline std::vector<GroupUpdate> equal_step_rescale(const ParamSnapshot& old, Model& model,
                                                   const LayerGroupPartition& part, const TrustRatioConfig& trust) {
  trust.validate();
  if (part.parameter_count() != old.size()) throw ConfigError("partition does not match the snapshot");
  std::vector<GroupUpdate> out;
  for (const auto& [id, names] : part.groups) {
    auto [w, u] = detail::group_norms(old, model, names);
    const double s = trust.tau * w / (u + trust.eps);
    double u2 = 0.0;
    for (const auto& name : names) {
      const Tensor& before = old.at(name);
      Tensor& after = model.param(name).value;
      for (std::size_t i = 0; i < before.size(); ++i) {
        after[i] = before[i] + s * (after[i] - before[i]);
        const double du = after[i] - before[i];
        u2 += du * du;
      }
    }
    GroupUpdate gu;
    gu.group = id;
    gu.weight_norm = w;
    gu.raw_update_norm = u;
    gu.scale = s;
    gu.ratio = w > 0.0 ? std::sqrt(u2) / w : 0.0;
    out.push_back(gu);
  }
  return out;
}

}  // namespace plab
