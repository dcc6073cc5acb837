#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "plab/core/error.hpp"

namespace plab {

enum class BlockType { sequential, parallel };
enum class AttentionKind { causal, bidirectional };

inline std::string to_string(BlockType b) { return b == BlockType::sequential ? "sequential" : "parallel"; }
inline std::string to_string(AttentionKind a) { return a == AttentionKind::causal ? "causal" : "bidirectional"; }

inline BlockType parse_block_type(std::string_view s) {
  if (s == "sequential") return BlockType::sequential;
  if (s == "parallel") return BlockType::parallel;
  throw ConfigError("unknown block type '" + std::string(s) + "'");
}

inline AttentionKind parse_attention(std::string_view s) {
  if (s == "causal") return AttentionKind::causal;
  if (s == "bidirectional") return AttentionKind::bidirectional;
  throw ConfigError("unknown attention kind '" + std::string(s) + "'");
}

/// Reserved token ids occupy the top four slots of the vocabulary.
struct SpecialTokens {
  int pad;
  int mask;
  int cls;
  int sep;
};

struct ModelConfig {
  BlockType block = BlockType::sequential;
  AttentionKind attention = AttentionKind::causal;
  std::size_t layers = 8;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab = 256;
  std::size_t max_seq = 32;
  bool tie_embeddings = true;
  double dropout = 0.1;
  double init_std = 0.02;
  double ln_eps = 1e-5;

  void validate() const {
    if (layers < 2) throw ConfigError("model needs at least 2 layers");
    if (d_model == 0 || heads == 0 || d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
    if (d_ff == 0) throw ConfigError("d_ff must be positive");
    if (vocab < 8) throw ConfigError("vocabulary too small (4 ids are reserved)");
    if (max_seq < 4) throw ConfigError("max_seq must be at least 4");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
  }

  [[nodiscard]] bool causal() const { return attention == AttentionKind::causal; }
  [[nodiscard]] std::size_t head_dim() const { return d_model / heads; }

  [[nodiscard]] SpecialTokens special() const {
    const int v = static_cast<int>(vocab);
    return SpecialTokens{v - 4, v - 3, v - 2, v - 1};
  }

  /// Ids below this value are ordinary tokens.
  [[nodiscard]] std::size_t regular_vocab() const { return vocab - 4; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"block", to_string(c.block)},
                     {"attention", to_string(c.attention)},
                     {"layers", c.layers},
                     {"d_model", c.d_model},
                     {"heads", c.heads},
                     {"d_ff", c.d_ff},
                     {"vocab", c.vocab},
                     {"max_seq", c.max_seq},
                     {"tie_embeddings", c.tie_embeddings},
                     {"dropout", c.dropout},
                     {"init_std", c.init_std},
                     {"ln_eps", c.ln_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.block = parse_block_type(j.value("block", to_string(d.block)));
  c.attention = parse_attention(j.value("attention", to_string(d.attention)));
  c.layers = j.value("layers", d.layers);
  c.d_model = j.value("d_model", d.d_model);
  c.heads = j.value("heads", d.heads);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.vocab = j.value("vocab", d.vocab);
  c.max_seq = j.value("max_seq", d.max_seq);
  c.tie_embeddings = j.value("tie_embeddings", d.tie_embeddings);
  c.dropout = j.value("dropout", d.dropout);
  c.init_std = j.value("init_std", d.init_std);
  c.ln_eps = j.value("ln_eps", d.ln_eps);
}

struct LoRAConfig {
  std::size_t rank = 8;
  double alpha = 16.0;
  double dropout = 0.1;
  /// Per-layer parameter suffixes, e.g. "attn.wq" or "mlp.fc.w".
  std::vector<std::string> targets{"attn.wq", "attn.wk", "attn.wv", "attn.wo"};

  void validate() const {
    if (rank < 1) throw ConfigError("LoRA rank must be >= 1");
    if (targets.empty()) throw ConfigError("LoRA needs at least one target");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("LoRA dropout must be in [0, 1)");
  }

  [[nodiscard]] double scaling() const { return alpha / static_cast<double>(rank); }

  friend bool operator==(const LoRAConfig&, const LoRAConfig&) = default;
};

inline void to_json(nlohmann::json& j, const LoRAConfig& c) {
  j = nlohmann::json{{"rank", c.rank}, {"alpha", c.alpha}, {"dropout", c.dropout}, {"targets", c.targets}};
}

inline void from_json(const nlohmann::json& j, LoRAConfig& c) {
  LoRAConfig d;
  c.rank = j.value("rank", d.rank);
  c.alpha = j.value("alpha", d.alpha);
  c.dropout = j.value("dropout", d.dropout);
  c.targets = j.value("targets", d.targets);
}

/// Maps a relative depth in (0, 1] to a 1-based layer index: clamp(round(d * L), 1, L).
inline std::size_t depth_to_layer_index(double depth, std::size_t layers) {
  if (!(depth > 0.0) || depth > 1.0) throw ConfigError("relative depth must lie in (0, 1], got " + std::to_string(depth));
  const auto idx = static_cast<long>(std::lround(depth * static_cast<double>(layers)));
  if (idx < 1) return 1;
  if (static_cast<std::size_t>(idx) > layers) return layers;
  return static_cast<std::size_t>(idx);
}

inline const std::vector<double>& default_depths() {
  static const std::vector<double> d{0.10, 0.25, 0.40, 0.60, 0.75, 0.90, 1.00};
  return d;
}

/// Layer index encoded in a parameter name ("layers.<k>.…"), or nullopt for
/// non-layer parameters (embeddings, final norm, heads).
inline std::optional<std::size_t> layer_index_of(std::string_view name) {
  constexpr std::string_view prefix = "layers.";
  if (name.substr(0, prefix.size()) != prefix) return std::nullopt;
  std::size_t pos = prefix.size(), value = 0, digits = 0;
  while (pos < name.size() && name[pos] >= '0' && name[pos] <= '9') {
    value = value * 10 + static_cast<std::size_t>(name[pos] - '0');
    ++pos;
    ++digits;
  }
  if (digits == 0 || (pos < name.size() && name[pos] != '.')) return std::nullopt;
  return value;
}

}  // namespace plab
