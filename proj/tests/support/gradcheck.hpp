#pragma once

// Central-difference gradient oracle used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "plab/core/graph.hpp"
#include "plab/core/ops.hpp"
#include "plab/core/rng.hpp"
#include "plab/models/model.hpp"
#include "plab/objectives/objectives.hpp"

namespace plab::testing {

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Reduces any op output to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct amount.
inline Var project_to_scalar(Graph& g, Var out) {
  if (out.value().size() == 1) return ops::reshape(out, Shape{1});
  Rng rng(0xfeed + out.value().size());
  Tensor w(out.value().shape, 0.0);
  for (double& v : w.data) v = rng.uniform(-1.0, 1.0);
  return ops::sum(ops::mul(out, g.constant(std::move(w), "proj")));
}

inline double eval_scalar(const Builder& build, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Var> leaves;
  for (std::size_t i = 0; i < inputs.size(); ++i) leaves.push_back(g.leaf(inputs[i], "in" + std::to_string(i), true));
  return project_to_scalar(g, build(g, leaves)).value().item();
}

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
};

inline double relative_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max({a.norm(), b.norm(), 1e-8});
  return std::sqrt(diff) / scale;
}

/// Compares reverse-mode gradients of every input against central differences.
/// The error per input tensor is ‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖, 1e-8).
inline GradcheckResult gradcheck(const Builder& build, std::vector<Tensor> inputs, double h = 1e-5) {
  std::vector<Tensor> analytic;
  {
    Graph g;
    std::vector<Var> leaves;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      leaves.push_back(g.leaf(inputs[i], "in" + std::to_string(i), true));
    }
    Var loss = project_to_scalar(g, build(g, leaves));
    Gradients grads = g.backward(loss);
    for (std::size_t i = 0; i < inputs.size(); ++i) analytic.push_back(grads.param("in" + std::to_string(i)));
  }
  GradcheckResult r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor numeric(inputs[i].shape, 0.0);
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double orig = inputs[i][k];
      const double step = h * std::max(1.0, std::abs(orig));
      auto at = [&](double offset) {
        inputs[i][k] = orig + offset;
        return eval_scalar(build, inputs);
      };
      // Fourth-order stencil: ill-conditioned cases (layernorm of nearly equal
      // entries) have large third derivatives that swamp a plain central difference.
      const double fp = at(step), fm = at(-step), fp2 = at(2.0 * step), fm2 = at(-2.0 * step);
      inputs[i][k] = orig;
      numeric[k] = (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * step);
    }
    const double err = relative_error(analytic[i], numeric);
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_input = i;
    }
  }
  return r;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

/// A named op family with a generator of random cases.
struct OpCase {
  Builder build;
  std::vector<Tensor> inputs;
};

struct OpFamily {
  std::string name;
  std::function<OpCase(Rng&)> make;
};

inline std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

/// Random cases for every differentiable op in plab::ops.
inline std::vector<OpFamily> op_families() {
  std::vector<OpFamily> f;
  f.push_back({"matmul", [](Rng& r) {
                 const std::size_t m = dim(r, 1, 4), k = dim(r, 1, 4), n = dim(r, 1, 4);
                 return OpCase{[](Graph&, const std::vector<Var>& v) { return ops::matmul(v[0], v[1]); },
                               {random_tensor(r, {m, k}), random_tensor(r, {k, n})}};
               }});
  f.push_back({"matmul_batched", [](Rng& r) {
                 const std::size_t b = dim(r, 1, 3), m = dim(r, 1, 3), k = dim(r, 1, 3), n = dim(r, 1, 3);
                 return OpCase{[](Graph&, const std::vector<Var>& v) { return ops::matmul(v[0], v[1]); },
                               {random_tensor(r, {b, m, k}), random_tensor(r, {b, k, n})}};
               }});
  f.push_back({"linear", [](Rng& r) {
                 const std::size_t m = dim(r, 1, 4), k = dim(r, 1, 4), n = dim(r, 1, 4);
                 return OpCase{[](Graph&, const std::vector<Var>& v) { return ops::linear(v[0], v[1], v[2]); },
                               {random_tensor(r, {2, m, k}), random_tensor(r, {k, n}), random_tensor(r, {n})}};
               }});
  f.push_back({"add_broadcast", [](Rng& r) {
                 const std::size_t m = dim(r, 1, 4), n = dim(r, 1, 4);
                 const bool full = r.bernoulli(0.5);
                 return OpCase{[](Graph&, const std::vector<Var>& v) { return ops::add(v[0], v[1]); },
                               {random_tensor(r, {m, n}), full ? random_tensor(r, {m, n}) : random_tensor(r, {n})}};
               }});
  f.push_back({"mul_broadcast", [](Rng& r) {
                 const std::size_t m = dim(r, 1, 4), n = dim(r, 1, 4);
                 const bool full = r.bernoulli(0.5);
                 return OpCase{[](Graph&, const std::vector<Var>& v) { return ops::mul(v[0], v[1]); },
                               {random_tensor(r, {m, n}), full ? random_tensor(r, {m, n}) : random_tensor(r, {n})}};
               }});
  f.push_back({"scale", [](Rng& r) {
                 const double c = r.uniform(-2.0, 2.0);
                 return OpCase{[c](Graph&, const std::vector<Var>& v) { return ops::scale(v[0], c); },
                               {random_tensor(r, {dim(r, 1, 5), dim(r, 1, 3)})}};
               }});
  f.push_back({"add_scalar", [](Rng& r) {
                 const double c = r.uniform(-2.0, 2.0);
                 return OpCase{[c](Graph&, const std::vector<Var>& v) { return ops::add_scalar(v[0], c); },
                               {random_tensor(r, {dim(r, 1, 5)})}};
               }});
  f.push_back({"permute", [](Rng& r) {
                 std::vector<std::size_t> perm{0, 1, 2, 3};
                 r.shuffle(perm);
                 return OpCase{[perm](Graph&, const std::vector<Var>& v) { return ops::permute(v[0], perm); },
                               {random_tensor(r, {dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 2), dim(r, 1, 3)})}};
               }});
  f.push_back({"transpose", [](Rng& r) {
                 const bool batched = r.bernoulli(0.5);
                 Shape s = batched ? Shape{dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)} : Shape{dim(r, 1, 4), dim(r, 1, 4)};
                 return OpCase{[](Graph&, const std::vector<Var>& v) { return ops::transpose(v[0]); },
                               {random_tensor(r, s)}};
               }});
  f.push_back({"reshape", [](Rng& r) {
                 const std::size_t a = dim(r, 1, 3), b = dim(r, 1, 4);
                 return OpCase{[a, b](Graph&, const std::vector<Var>& v) { return ops::reshape(v[0], Shape{b, a}); },
                               {random_tensor(r, {a, b})}};
               }});
  f.push_back({"concat", [](Rng& r) {
                 const std::size_t axis = static_cast<std::size_t>(r.below(2));
                 const std::size_t m = dim(r, 1, 3), n1 = dim(r, 1, 3), n2 = dim(r, 1, 3);
                 Shape s1 = axis == 0 ? Shape{n1, m} : Shape{m, n1};
                 Shape s2 = axis == 0 ? Shape{n2, m} : Shape{m, n2};
                 return OpCase{[axis](Graph&, const std::vector<Var>& v) { return ops::concat({v[0], v[1]}, axis); },
                               {random_tensor(r, s1), random_tensor(r, s2)}};
               }});
  f.push_back({"slice", [](Rng& r) {
                 const std::size_t n = dim(r, 2, 6);
                 const std::size_t start = static_cast<std::size_t>(r.below(n - 1));
                 const std::size_t len = 1 + static_cast<std::size_t>(r.below(n - start));
                 return OpCase{[start, len](Graph&, const std::vector<Var>& v) { return ops::slice(v[0], 0, start, len); },
                               {random_tensor(r, {n, dim(r, 1, 3)})}};
               }});
  f.push_back({"embedding", [](Rng& r) {
                 const std::size_t vocab = dim(r, 2, 6), d = dim(r, 1, 3), n = dim(r, 1, 2), t = dim(r, 1, 3);
                 std::vector<int> ids(n * t);
                 for (int& i : ids) i = static_cast<int>(r.below(vocab));
                 return OpCase{[ids, n, t](Graph&, const std::vector<Var>& v) {
                                 return ops::embedding(v[0], ids, Shape{n, t});
                               },
                               {random_tensor(r, {vocab, d})}};
               }});
  f.push_back({"gather_rows", [](Rng& r) {
                 const std::size_t rows = dim(r, 2, 5), k = dim(r, 1, 6);
                 std::vector<std::size_t> idx(k);
                 for (auto& i : idx) i = static_cast<std::size_t>(r.below(rows));
                 return OpCase{[idx](Graph&, const std::vector<Var>& v) { return ops::gather_rows(v[0], idx); },
                               {random_tensor(r, {rows, dim(r, 1, 3)})}};
               }});
  // d = 2 normalizes every row to +-1 up to eps, so its input gradient is O(eps)
  // and below central-difference resolution; pair_normalization_case covers it.
  f.push_back({"layernorm", [](Rng& r) {
                 const std::size_t d = dim(r, 3, 6);
                 return OpCase{[](Graph&, const std::vector<Var>& v) { return ops::layernorm(v[0], v[1], v[2], 1e-5); },
                               {random_tensor(r, {dim(r, 1, 3), d}), random_tensor(r, {d}, 0.5, 1.5),
                                random_tensor(r, {d})}};
               }});
  f.push_back({"softmax", [](Rng& r) {
                 return OpCase{[](Graph&, const std::vector<Var>& v) { return ops::softmax(v[0]); },
                               {random_tensor(r, {dim(r, 1, 3), dim(r, 1, 5)}, -2.0, 2.0)}};
               }});
  f.push_back({"masked_softmax", [](Rng& r) {
                 const std::size_t m = dim(r, 1, 3), n = dim(r, 2, 5);
                 Tensor mask(Shape{m, n}, 1.0);
                 for (double& x : mask.data) x = r.bernoulli(0.3) ? 0.0 : 1.0;
                 return OpCase{[mask](Graph&, const std::vector<Var>& v) { return ops::masked_softmax(v[0], mask); },
                               {random_tensor(r, {m, n}, -2.0, 2.0)}};
               }});
  f.push_back({"gelu", [](Rng& r) {
                 return OpCase{[](Graph&, const std::vector<Var>& v) { return ops::gelu(v[0]); },
                               {random_tensor(r, {dim(r, 1, 6)}, -3.0, 3.0)}};
               }});
  f.push_back({"dropout", [](Rng& r) {
                 const std::uint64_t seed = r.next_u64();
                 return OpCase{[seed](Graph&, const std::vector<Var>& v) { return ops::dropout(v[0], 0.3, seed); },
                               {random_tensor(r, {dim(r, 1, 8)})}};
               }});
  f.push_back({"sum", [](Rng& r) {
                 return OpCase{[](Graph&, const std::vector<Var>& v) { return ops::sum(v[0]); },
                               {random_tensor(r, {dim(r, 1, 4), dim(r, 1, 3)})}};
               }});
  f.push_back({"mean", [](Rng& r) {
                 return OpCase{[](Graph&, const std::vector<Var>& v) { return ops::mean(v[0]); },
                               {random_tensor(r, {dim(r, 1, 4), dim(r, 1, 3)})}};
               }});
  f.push_back({"sum_axis", [](Rng& r) {
                 const std::size_t axis = static_cast<std::size_t>(r.below(3));
                 return OpCase{[axis](Graph&, const std::vector<Var>& v) { return ops::sum_axis(v[0], axis); },
                               {random_tensor(r, {dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)})}};
               }});
  f.push_back({"mean_axis", [](Rng& r) {
                 const std::size_t axis = static_cast<std::size_t>(r.below(2));
                 return OpCase{[axis](Graph&, const std::vector<Var>& v) { return ops::mean_axis(v[0], axis); },
                               {random_tensor(r, {dim(r, 1, 4), dim(r, 1, 4)})}};
               }});
  f.push_back({"cross_entropy", [](Rng& r) {
                 const std::size_t n = dim(r, 1, 4), c = dim(r, 2, 5);
                 std::vector<int> tgt(n);
                 for (int& t : tgt) t = static_cast<int>(r.below(c));
                 std::vector<double> w;
                 if (r.bernoulli(0.5)) {
                   for (std::size_t i = 0; i < n; ++i) w.push_back(r.uniform(0.5, 2.0));
                 }
                 return OpCase{[tgt, w](Graph&, const std::vector<Var>& v) { return ops::cross_entropy(v[0], tgt, w); },
                               {random_tensor(r, {n, c}, -2.0, 2.0)}};
               }});
  f.push_back({"l2_normalize", [](Rng& r) {
                 return OpCase{[](Graph&, const std::vector<Var>& v) { return ops::l2_normalize(v[0]); },
                               {random_tensor(r, {dim(r, 1, 4), dim(r, 2, 4)})}};
               }});
  f.push_back({"masked_mean_pool", [](Rng& r) {
                 const std::size_t b = dim(r, 1, 3), t = dim(r, 1, 4), d = dim(r, 1, 3);
                 Tensor mask(Shape{b, t}, 0.0);
                 for (std::size_t i = 0; i < b; ++i) {
                   const std::size_t len = 1 + static_cast<std::size_t>(r.below(t));
                   for (std::size_t p = 0; p < len; ++p) mask[i * t + p] = 1.0;
                 }
                 return OpCase{[mask](Graph&, const std::vector<Var>& v) { return ops::masked_mean_pool(v[0], mask); },
                               {random_tensor(r, {b, t, d})}};
               }});
  // Two rows have the same +-1 degeneracy as width-2 layernorm; see pair_normalization_case.
  f.push_back({"standardize_columns", [](Rng& r) {
                 return OpCase{[](Graph&, const std::vector<Var>& v) { return ops::standardize_columns(v[0], 1e-5); },
                               {random_tensor(r, {dim(r, 3, 5), dim(r, 1, 3)})}};
               }});
  return f;
}

/// Finite-difference check of a full objective loss against every trainable
/// parameter of `model`. Returns the worst per-tensor relative error.
inline GradcheckResult model_gradcheck(const Model& model, const Batch& batch, const LossOptions& opts,
                                       double h = 1e-5) {
  Gradients grads;
  {
    Graph g;
    Binding bind(g, model);
    grads = g.backward(compute_loss(bind, model, batch, opts).loss);
  }
  auto loss_of = [&](const Model& m) {
    Graph g;
    Binding bind(g, m);
    return compute_loss(bind, m, batch, opts).loss.value().item();
  };
  Model probe = model;
  std::vector<std::pair<std::string, Tensor>> analytic, numeric;
  double global = 0.0;
  for (Parameter& p : probe.params()) {
    if (!p.trainable) continue;
    Tensor fd(p.value.shape, 0.0);
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double orig = p.value[k];
      const double step = h * std::max(1.0, std::abs(orig));
      p.value[k] = orig + step;
      const double fp = loss_of(probe);
      p.value[k] = orig - step;
      const double fm = loss_of(probe);
      p.value[k] = orig;
      fd[k] = (fp - fm) / (2.0 * step);
    }
    // Parameters the loss never reaches (an unused head) have no recorded gradient.
    Tensor ad = grads.has(p.name) ? grads.param(p.name) : Tensor(p.value.shape, 0.0);
    global += ad.squared_norm();
    analytic.emplace_back(p.name, std::move(ad));
    numeric.emplace_back(p.name, std::move(fd));
  }
  // Some gradients are exactly zero by symmetry (a key bias under softmax), so the
  // per-tensor scale is floored at a small fraction of the whole-model gradient norm.
  const double floor = 1e-3 * std::sqrt(global);
  GradcheckResult r;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const Tensor& a = analytic[i].second;
    const Tensor& b = numeric[i].second;
    double diff = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) diff += (a[k] - b[k]) * (a[k] - b[k]);
    const double err = std::sqrt(diff) / std::max({a.norm(), b.norm(), floor, 1e-8});
    if (std::getenv("PLAB_GRADCHECK_VERBOSE") != nullptr) {
      std::fprintf(stderr, "%s err=%.3g |g|=%.3g\n", analytic[i].first.c_str(), err, a.norm());
    }
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_input = i;
    }
  }
  return r;
}

/// Tiny model for gradient checks.
inline ModelConfig tiny_config(AttentionKind attention, BlockType block = BlockType::sequential) {
  ModelConfig c;
  c.attention = attention;
  c.block = block;
  c.layers = 2;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 12;
  c.vocab = 16;
  c.max_seq = 10;
  c.dropout = 0.1;
  return c;
}

inline std::vector<Sequence> random_sequences(Rng& rng, std::size_t n, std::size_t min_len, std::size_t max_len,
                                              int vocab) {
  std::vector<Sequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sequence s(min_len + static_cast<std::size_t>(rng.below(max_len - min_len + 1)));
    for (int& t : s) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
    out.push_back(std::move(s));
  }
  return out;
}

/// Normalizing a pair (x1, x2) to zero mean and unit variance gives
/// +-delta / sqrt(delta^2 + eps) with delta = (x1 - x2) / 2. For upstream
/// gradients u (already scaled by any affine gain) the pair's input gradient is
/// +-(u1 - u2) eps / (2 (delta^2 + eps)^(3/2)).
inline std::pair<double, double> normalized_pair_gradient(double x1, double x2, double u1, double u2, double eps) {
  const double delta = 0.5 * (x1 - x2);
  const double s = delta * delta + eps;
  const double v = (u1 - u2) * eps / (2.0 * s * std::sqrt(s));
  return {v, -v};
}

/// Width-2 layernorm (transpose = false) or two-row standardize_columns
/// (transpose = true) against the closed form. Returns the relative error.
inline double pair_normalization_case(Rng& rng, bool transpose, double eps = 1e-5) {
  const std::size_t other = dim(rng, 1, 3);
  const Shape shape = transpose ? Shape{2, other} : Shape{other, 2};
  const Tensor x = random_tensor(rng, shape);
  const Tensor gamma = random_tensor(rng, {2}, 0.5, 1.5);
  const Tensor beta = random_tensor(rng, {2});
  const Tensor up = random_tensor(rng, shape);
  Graph g;
  Var xv = g.leaf(x, "x", true);
  Var out = transpose ? ops::standardize_columns(xv, eps)
                      : ops::layernorm(xv, g.leaf(gamma, "g", true), g.leaf(beta, "b", true), eps);
  const Tensor analytic = g.backward(ops::sum(ops::mul(out, g.constant(up, "up")))).param("x");
  Tensor expected(shape, 0.0);
  for (std::size_t k = 0; k < other; ++k) {
    // flat indices of the two members of pair k
    const std::size_t i1 = transpose ? k : k * 2, i2 = transpose ? other + k : k * 2 + 1;
    const double u1 = up[i1] * (transpose ? 1.0 : gamma[0]);
    const double u2 = up[i2] * (transpose ? 1.0 : gamma[1]);
    const auto [g1, g2] = normalized_pair_gradient(x[i1], x[i2], u1, u2, eps);
    expected[i1] = g1;
    expected[i2] = g2;
  }
  return relative_error(analytic, expected);
}

/// Random case for the objective head: loss as a function of the final hidden
/// state(s), with the tied output embedding held fixed.
inline OpCase objective_head_case(ObjectiveKind kind, Rng& rng) {
  const ModelConfig cfg = tiny_config(kind == ObjectiveKind::NSP || kind == ObjectiveKind::MLM ||
                                              kind == ObjectiveKind::SpanDenoise
                                          ? AttentionKind::bidirectional
                                          : AttentionKind::causal);
  auto model = std::make_shared<Model>(Model::build(cfg, rng.next_u64()));
  for (Parameter& p : model->params()) {
    for (double& v : p.value.data) v += rng.uniform(-0.3, 0.3);
  }
  // Contrastive heads standardize or normalize across the batch, so they get at
  // least three rows; a softer temperature keeps the softmax out of saturation
  // where the gradient drops below finite-difference roundoff.
  const std::size_t rows = (is_contrastive(kind) ? 3 : 2) + static_cast<std::size_t>(rng.below(3));
  const auto seqs = random_sequences(rng, rows, 4, 7, static_cast<int>(cfg.regular_vocab()));
  ObjectiveSettings settings;
  settings.mask_rate = 0.4;
  settings.temperature = 0.5;
  auto batch = std::make_shared<Batch>(prepare_batch(kind, seqs, rng, cfg, settings));
  const std::size_t views = is_contrastive(kind) ? 2 : 1;
  std::vector<Tensor> inputs;
  for (std::size_t v = 0; v < views; ++v) {
    inputs.push_back(random_tensor(rng, {batch->tokens.n, batch->tokens.t, cfg.d_model}));
  }
  return OpCase{[model, batch, settings](Graph& g, const std::vector<Var>& hidden) {
                  Binding bind(g, *model);
                  return head_loss(bind, *model, *batch, hidden, settings);
                },
                std::move(inputs)};
}

}  // namespace plab::testing
