#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "plab/core/graph.hpp"
#include "plab/core/ops.hpp"
#include "plab/core/rng.hpp"
#include "plab/core/tensor.hpp"
#include "plab/models/config.hpp"

namespace plab {

/// Token ids [n, t] with a 0/1 padding mask (1 = real token).
struct TokenBatch {
  std::size_t n = 0;
  std::size_t t = 0;
  std::vector<int> ids;
  std::vector<double> mask;

  [[nodiscard]] Tensor mask_tensor() const { return Tensor(Shape{n, t}, mask); }

  [[nodiscard]] std::size_t length(std::size_t row) const {
    std::size_t len = 0;
    for (std::size_t p = 0; p < t; ++p) len += mask[row * t + p] != 0.0 ? 1 : 0;
    return len;
  }

  /// Rows [begin, begin+count) as a new batch.
  [[nodiscard]] TokenBatch rows(std::size_t begin, std::size_t count) const {
    TokenBatch out;
    out.n = count;
    out.t = t;
    out.ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(begin * t),
                   ids.begin() + static_cast<std::ptrdiff_t>((begin + count) * t));
    out.mask.assign(mask.begin() + static_cast<std::ptrdiff_t>(begin * t),
                    mask.begin() + static_cast<std::ptrdiff_t>((begin + count) * t));
    return out;
  }
};

/// Builds a right-padded batch from variable-length sequences.
inline TokenBatch make_token_batch(const std::vector<std::vector<int>>& seqs, int pad_id, std::size_t width = 0) {
  TokenBatch b;
  b.n = seqs.size();
  for (const auto& s : seqs) b.t = std::max(b.t, s.size());
  if (width != 0) {
    if (width < b.t) throw ShapeError("sequence longer than requested batch width");
    b.t = width;
  }
  b.ids.assign(b.n * b.t, pad_id);
  b.mask.assign(b.n * b.t, 0.0);
  for (std::size_t i = 0; i < b.n; ++i) {
    for (std::size_t p = 0; p < seqs[i].size(); ++p) {
      b.ids[i * b.t + p] = seqs[i][p];
      b.mask[i * b.t + p] = 1.0;
    }
  }
  return b;
}

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

enum class PoolMode { mean, last_token, cls };

inline std::string to_string(PoolMode m) {
  switch (m) {
    case PoolMode::mean: return "mean";
    case PoolMode::last_token: return "last-token";
    case PoolMode::cls: return "cls";
  }
  return "?";
}

/// Pools hidden[n, t, D] to [n, D] on the graph.
inline Var pool(Var hidden, const TokenBatch& batch, PoolMode mode) {
  const Tensor& hv = hidden.value();
  if (hv.rank() != 3 || hv.dim(0) != batch.n || hv.dim(1) != batch.t) {
    throw ShapeError("pool: hidden shape " + shape_string(hv.shape) + " does not match batch");
  }
  if (mode == PoolMode::mean) return ops::masked_mean_pool(hidden, batch.mask_tensor());
  const std::size_t d = hv.dim(2);
  std::vector<std::size_t> rows(batch.n);
  for (std::size_t i = 0; i < batch.n; ++i) {
    std::size_t pos = 0;
    if (mode == PoolMode::last_token) {
      bool found = false;
      for (std::size_t p = 0; p < batch.t; ++p) {
        if (batch.mask[i * batch.t + p] != 0.0) {
          pos = p;
          found = true;
        }
      }
      if (!found) throw Error("pool: row " + std::to_string(i) + " is all padding");
    } else if (batch.length(i) == 0) {
      throw Error("pool: row " + std::to_string(i) + " is all padding");
    }
    rows[i] = i * batch.t + pos;
  }
  return ops::gather_rows(ops::reshape(hidden, Shape{batch.n * batch.t, d}), std::move(rows));
}

/// Plain-tensor pooling: hidden[n, t, D] -> [n, D].
inline Tensor pool_representation(const Tensor& hidden, const TokenBatch& batch, PoolMode mode) {
  Graph g;
  Var h = g.constant(hidden, "hidden");
  return pool(h, batch, mode).value();
}

struct ForwardOptions {
  bool train = false;                 // enables dropout
  std::uint64_t dropout_seed = 0;
  std::vector<std::size_t> capture_layers;  // 1-based layer indices
  std::size_t stop_after = 0;         // 0 = run every layer
};

struct ForwardResult {
  std::optional<Var> final_hidden;    // after final layer norm
  std::map<std::size_t, Var> captures;
};

/// Per-sublayer outputs of a single block, for inspecting block wiring.
struct BlockTrace {
  Var input;
  Var attn_out;
  Var mlp_out;
  Var output;
};

class Model;

/// Lazily creates one graph leaf per parameter so repeated forwards on the same
/// graph share parameter nodes.
class Binding {
 public:
  Binding(Graph& g, const Model& m) : graph_(&g), model_(&m) {}
  Var get(const std::string& name);
  [[nodiscard]] Graph& graph() const { return *graph_; }

 private:
  Graph* graph_;
  const Model* model_;
  std::unordered_map<std::string, Var> vars_;
};

class Model {
 public:
  /// Scaled-normal init (std = config.init_std); zeros for biases and LN beta, ones for LN gamma.
  static Model build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config_ = config;
    Rng rng(seed);
    const std::size_t d = config.d_model, ff = config.d_ff, v = config.vocab;
    auto normal = [&](const std::string& name, Shape shape) {
      Tensor t(std::move(shape), 0.0);
      for (double& x : t.data) x = rng.normal(0.0, config.init_std);
      m.add_param(name, std::move(t));
    };
    auto fill = [&](const std::string& name, Shape shape, double value) { m.add_param(name, Tensor(std::move(shape), value)); };
    normal("embed.tok", {v, d});
    normal("embed.pos", {config.max_seq, d});
    for (std::size_t l = 1; l <= config.layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      fill(p + "ln1.g", {d}, 1.0);
      fill(p + "ln1.b", {d}, 0.0);
      normal(p + "attn.wq", {d, d});
      fill(p + "attn.bq", {d}, 0.0);
      normal(p + "attn.wk", {d, d});
      fill(p + "attn.bk", {d}, 0.0);
      normal(p + "attn.wv", {d, d});
      fill(p + "attn.bv", {d}, 0.0);
      normal(p + "attn.wo", {d, d});
      fill(p + "attn.bo", {d}, 0.0);
      fill(p + "ln2.g", {d}, 1.0);
      fill(p + "ln2.b", {d}, 0.0);
      normal(p + "mlp.fc.w", {d, ff});
      fill(p + "mlp.fc.b", {ff}, 0.0);
      normal(p + "mlp.proj.w", {ff, d});
      fill(p + "mlp.proj.b", {d}, 0.0);
    }
    fill("final_ln.g", {d}, 1.0);
    fill("final_ln.b", {d}, 0.0);
    if (!config.tie_embeddings) normal("lm_head.w", {d, v});
    if (!config.causal()) {
      normal("nsp_head.w", {d, 2});
      fill("nsp_head.b", {2}, 0.0);
    }
    return m;
  }

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const std::vector<Parameter>& params() const { return params_; }
  std::vector<Parameter>& params() { return params_; }
  [[nodiscard]] const std::optional<LoRAConfig>& lora() const { return lora_; }

  [[nodiscard]] bool has_param(const std::string& name) const { return index_.count(name) != 0; }

  [[nodiscard]] const Parameter& param(const std::string& name) const { return params_.at(lookup(name)); }
  Parameter& param(const std::string& name) { return params_.at(lookup(name)); }

  [[nodiscard]] std::size_t parameter_count(bool trainable_only = false) const {
    std::size_t c = 0;
    for (const auto& p : params_) {
      if (!trainable_only || p.trainable) c += p.value.size();
    }
    return c;
  }

  void set_all_trainable(bool trainable) {
    for (auto& p : params_) p.trainable = trainable;
  }

  /// Runs the network on a token batch. Captures are residual-stream outputs of the
  /// requested blocks; the last layer's capture is taken after the final layer norm.
  ForwardResult forward(Binding& bind, const TokenBatch& batch, const ForwardOptions& opts = {}) const {
    const ModelConfig& c = config_;
    if (batch.t > c.max_seq) throw ShapeError("batch width " + std::to_string(batch.t) + " exceeds max_seq");
    if (batch.n == 0 || batch.t == 0) throw ShapeError("empty batch");
    const std::size_t last = opts.stop_after == 0 ? c.layers : opts.stop_after;
    if (last > c.layers) throw ConfigError("stop_after beyond model depth");
    for (std::size_t l : opts.capture_layers) {
      if (l < 1 || l > c.layers) throw ConfigError("capture layer " + std::to_string(l) + " outside [1, L]");
    }
    const double p_drop = opts.train ? c.dropout : 0.0;
    Var x = embed(bind, batch);
    x = ops::dropout(x, p_drop, derive_seed(opts.dropout_seed, 0, 0));
    const Tensor attn_mask = attention_mask(batch);
    ForwardResult out;
    for (std::size_t l = 1; l <= last; ++l) {
      x = block(bind, x, l, attn_mask, p_drop, opts.dropout_seed).output;
      const bool wanted =
          std::find(opts.capture_layers.begin(), opts.capture_layers.end(), l) != opts.capture_layers.end();
      if (l == c.layers) {
        Var fin = ops::layernorm(x, bind.get("final_ln.g"), bind.get("final_ln.b"), c.ln_eps);
        out.final_hidden = fin;
        if (wanted) out.captures.emplace(l, fin);
      } else if (wanted) {
        out.captures.emplace(l, x);
      }
    }
    return out;
  }

  /// Single block with its sublayer outputs exposed.
  BlockTrace block(Binding& bind, Var x, std::size_t layer, const Tensor& attn_mask, double p_drop,
                   std::uint64_t seed) const {
    const ModelConfig& c = config_;
    const std::string p = "layers." + std::to_string(layer) + ".";
    BlockTrace tr;
    tr.input = x;
    Var h1 = ops::layernorm(x, bind.get(p + "ln1.g"), bind.get(p + "ln1.b"), c.ln_eps);
    tr.attn_out = ops::dropout(attention(bind, h1, p, attn_mask, p_drop, derive_seed(seed, layer, 1)), p_drop,
                               derive_seed(seed, layer, 2));
    if (c.block == BlockType::sequential) {
      Var mid = ops::add(x, tr.attn_out);
      Var h2 = ops::layernorm(mid, bind.get(p + "ln2.g"), bind.get(p + "ln2.b"), c.ln_eps);
      tr.mlp_out = ops::dropout(mlp(bind, h2, p, p_drop, derive_seed(seed, layer, 3)), p_drop, derive_seed(seed, layer, 4));
      tr.output = ops::add(mid, tr.mlp_out);
    } else {
      Var h2 = ops::layernorm(x, bind.get(p + "ln2.g"), bind.get(p + "ln2.b"), c.ln_eps);
      tr.mlp_out = ops::dropout(mlp(bind, h2, p, p_drop, derive_seed(seed, layer, 3)), p_drop, derive_seed(seed, layer, 4));
      tr.output = ops::add(ops::add(x, tr.attn_out), tr.mlp_out);
    }
    return tr;
  }

  Var embed(Binding& bind, const TokenBatch& batch) const {
    Var tok = ops::embedding(bind.get("embed.tok"), batch.ids, Shape{batch.n, batch.t});
    Var pos = ops::slice(bind.get("embed.pos"), 0, 0, batch.t);
    return ops::add(tok, pos);
  }

  /// 0/1 mask [n*heads, t, t]: key must be a real token and, for causal models, not in the future.
  [[nodiscard]] Tensor attention_mask(const TokenBatch& batch) const {
    const std::size_t h = config_.heads, t = batch.t;
    Tensor m(Shape{batch.n * h, t, t}, 0.0);
    for (std::size_t b = 0; b < batch.n; ++b)
      for (std::size_t hh = 0; hh < h; ++hh)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < t; ++j) {
            const bool ok = batch.mask[b * t + j] != 0.0 && (!config_.causal() || j <= i);
            m[((b * h + hh) * t + i) * t + j] = ok ? 1.0 : 0.0;
          }
    return m;
  }

  /// Logits over the vocabulary for hidden[..., D].
  Var lm_logits(Binding& bind, Var hidden) const {
    if (config_.tie_embeddings) return ops::linear(hidden, ops::transpose(bind.get("embed.tok")));
    return ops::linear(hidden, bind.get("lm_head.w"));
  }

  Var nsp_logits(Binding& bind, Var pooled) const {
    if (config_.causal()) throw ConfigError("pair-classification head exists only on bidirectional models");
    return ops::linear(pooled, bind.get("nsp_head.w"), bind.get("nsp_head.b"));
  }

  /// Wraps target projections with low-rank adapters and freezes every base
  /// parameter. A ~ U(-1/sqrt(in), 1/sqrt(in)), B = 0, so the initial forward is unchanged.
  [[nodiscard]] Model with_lora(const LoRAConfig& cfg, std::uint64_t seed) const {
    cfg.validate();
    if (lora_) throw ConfigError("model already carries LoRA adapters");
    Model m = *this;
    m.set_all_trainable(false);
    Rng rng(seed);
    for (std::size_t l = 1; l <= config_.layers; ++l) {
      for (const auto& target : cfg.targets) {
        const std::string full = "layers." + std::to_string(l) + "." + target;
        if (!has_param(full) || param(full).value.rank() != 2) throw ConfigError("unknown LoRA target '" + target + "'");
        const std::size_t in = param(full).value.dim(0), out = param(full).value.dim(1);
        Tensor a(Shape{in, cfg.rank}, 0.0);
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& v : a.data) v = rng.uniform(-bound, bound);
        m.add_param(full + ".lora_a", std::move(a));
        m.add_param(full + ".lora_b", Tensor(Shape{cfg.rank, out}, 0.0));
      }
    }
    m.lora_ = cfg;
    return m;
  }

  /// Reads one parameter into the graph; used by Binding.
  [[nodiscard]] Var make_leaf(Graph& g, const std::string& name) const {
    const Parameter& p = param(name);
    return g.leaf(p.value, p.name, p.trainable);
  }

  void add_param(const std::string& name, Tensor value, bool trainable = true) {
    if (index_.count(name) != 0) throw ConfigError("duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back(Parameter{name, std::move(value), trainable});
  }

 private:
  [[nodiscard]] std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  /// x W + b, plus the LoRA branch scaling * dropout(x) A B when the weight is adapted.
  Var projection(Binding& bind, Var x, const std::string& weight, const std::string& bias, double p_drop,
                 std::uint64_t seed) const {
    Var y = ops::linear(x, bind.get(weight), bind.get(bias));
    if (lora_ && has_param(weight + ".lora_a")) {
      const double p = p_drop > 0.0 ? lora_->dropout : 0.0;
      Var xd = ops::dropout(x, p, seed);
      Var low = ops::linear(ops::linear(xd, bind.get(weight + ".lora_a")), bind.get(weight + ".lora_b"));
      y = ops::add(y, ops::scale(low, lora_->scaling()));
    }
    return y;
  }

  Var attention(Binding& bind, Var h, const std::string& p, const Tensor& mask, double p_drop, std::uint64_t seed) const {
    const ModelConfig& c = config_;
    const Shape& s = h.value().shape;
    const std::size_t n = s[0], t = s[1], heads = c.heads, hd = c.head_dim();
    auto split = [&](Var v) {
      Var r = ops::reshape(v, Shape{n, t, heads, hd});
      r = ops::permute(r, {0, 2, 1, 3});
      return ops::reshape(r, Shape{n * heads, t, hd});
    };
    Var q = split(projection(bind, h, p + "attn.wq", p + "attn.bq", p_drop, derive_seed(seed, 11)));
    Var k = split(projection(bind, h, p + "attn.wk", p + "attn.bk", p_drop, derive_seed(seed, 12)));
    Var v = split(projection(bind, h, p + "attn.wv", p + "attn.bv", p_drop, derive_seed(seed, 13)));
    Var scores = ops::scale(ops::matmul(q, ops::transpose(k)), 1.0 / std::sqrt(static_cast<double>(hd)));
    Var probs = ops::masked_softmax(scores, mask);
    Var ctx = ops::matmul(probs, v);
    ctx = ops::reshape(ctx, Shape{n, heads, t, hd});
    ctx = ops::permute(ctx, {0, 2, 1, 3});
    ctx = ops::reshape(ctx, Shape{n, t, c.d_model});
    return projection(bind, ctx, p + "attn.wo", p + "attn.bo", p_drop, derive_seed(seed, 14));
  }

  Var mlp(Binding& bind, Var h, const std::string& p, double p_drop, std::uint64_t seed) const {
    Var a = ops::gelu(projection(bind, h, p + "mlp.fc.w", p + "mlp.fc.b", p_drop, derive_seed(seed, 21)));
    return projection(bind, a, p + "mlp.proj.w", p + "mlp.proj.b", p_drop, derive_seed(seed, 22));
  }

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::optional<LoRAConfig> lora_;
};

inline Var Binding::get(const std::string& name) {
  auto it = vars_.find(name);
  if (it != vars_.end()) return it->second;
  Var v = model_->make_leaf(*graph_, name);
  vars_.emplace(name, v);
  return v;
}

inline Model build_model(const ModelConfig& config, std::uint64_t seed) { return Model::build(config, seed); }

inline Model apply_lora(const Model& model, const LoRAConfig& cfg, std::uint64_t seed = 0) {
  return model.with_lora(cfg, seed);
}

/// Hidden states at relative depths, computed without dropout. Keys are the
/// requested depths; values are [n, t, D].
inline std::map<double, Tensor> forward_hidden(const Model& model, const TokenBatch& batch,
                                               const std::vector<double>& depths) {
  ForwardOptions opts;
  std::map<double, std::size_t> layer_of;
  std::size_t deepest = 0;
  for (double d : depths) {
    const std::size_t l = depth_to_layer_index(d, model.config().layers);
    layer_of[d] = l;
    opts.capture_layers.push_back(l);
    deepest = std::max(deepest, l);
  }
  opts.stop_after = deepest;
  Graph g;
  Binding bind(g, model);
  ForwardResult r = model.forward(bind, batch, opts);
  std::map<double, Tensor> out;
  for (const auto& [d, l] : layer_of) out.emplace(d, r.captures.at(l).value());
  return out;
}

}  // namespace plab
