#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "plab/models/checkpoint.hpp"
#include "plab/models/model.hpp"
#include "support/gradcheck.hpp"

using namespace plab;

namespace {

Tensor final_hidden(const Model& m, const TokenBatch& b) {
  Graph g;
  Binding bind(g, m);
  return m.forward(bind, b).final_hidden->value();
}

ModelConfig small(AttentionKind a, BlockType blk = BlockType::sequential) {
  ModelConfig c;
  c.attention = a;
  c.block = blk;
  c.layers = 4;
  c.d_model = 16;
  c.heads = 4;
  c.d_ff = 32;
  c.vocab = 32;
  c.max_seq = 12;
  return c;
}

void perturb(Model& m, std::uint64_t seed, double scale = 0.2) {
  Rng r(seed);
  for (auto& p : m.params()) {
    for (double& v : p.value.data) v += r.uniform(-scale, scale);
  }
}

}  // namespace

TEST(Depth, SevenDepthsMapToLayersOfEightLayerModel) {
  std::vector<std::size_t> got;
  for (double d : default_depths()) got.push_back(depth_to_layer_index(d, 8));
  EXPECT_EQ(got, (std::vector<std::size_t>{1, 2, 3, 5, 6, 7, 8}));
}

TEST(Depth, ClampsAndRejectsOutOfRange) {
  EXPECT_EQ(depth_to_layer_index(0.01, 12), 1u);
  EXPECT_EQ(depth_to_layer_index(1.0, 12), 12u);
  EXPECT_THROW(depth_to_layer_index(0.0, 8), ConfigError);
  EXPECT_THROW(depth_to_layer_index(1.5, 8), ConfigError);
}

TEST(Depth, LayerIndexParsesParameterNames) {
  EXPECT_EQ(layer_index_of("layers.3.attn.wq"), 3u);
  EXPECT_EQ(layer_index_of("layers.12.mlp.fc.w"), 12u);
  EXPECT_FALSE(layer_index_of("embed.tok").has_value());
  EXPECT_FALSE(layer_index_of("final_ln.g").has_value());
}

TEST(Config, JsonRoundTrip) {
  ModelConfig c = small(AttentionKind::bidirectional, BlockType::parallel);
  c.dropout = 0.25;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
  EXPECT_THROW(parse_block_type("diagonal"), ConfigError);
}

TEST(Config, ValidationRejectsBadHeads) {
  ModelConfig c = small(AttentionKind::causal);
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Model, ParameterCountMatchesFormula) {
  const ModelConfig c = small(AttentionKind::bidirectional);
  const Model m = Model::build(c, 1);
  const std::size_t d = c.d_model, f = c.d_ff;
  const std::size_t per_layer = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
  const std::size_t expected = c.vocab * d + c.max_seq * d + c.layers * per_layer + 2 * d + (2 * d + 2);
  EXPECT_EQ(m.parameter_count(), expected);
}

TEST(Model, BuildIsDeterministicPerSeed) {
  const ModelConfig c = small(AttentionKind::causal);
  const Model a = Model::build(c, 3), b = Model::build(c, 3), d = Model::build(c, 4);
  EXPECT_EQ(a.param("layers.2.attn.wq").value, b.param("layers.2.attn.wq").value);
  EXPECT_FALSE(a.param("layers.2.attn.wq").value == d.param("layers.2.attn.wq").value);
}

TEST(Model, CausalOutputsIgnoreFutureTokens) {
  Model m = Model::build(small(AttentionKind::causal), 5);
  perturb(m, 6);
  const int pad = m.config().special().pad;
  const TokenBatch a = make_token_batch({{1, 2, 3, 4, 5, 6}}, pad);
  const TokenBatch b = make_token_batch({{1, 2, 3, 9, 9, 9}}, pad);
  const Tensor ha = final_hidden(m, a), hb = final_hidden(m, b);
  const std::size_t d = m.config().d_model;
  for (std::size_t i = 0; i < 3 * d; ++i) EXPECT_EQ(ha[i], hb[i]) << "position " << i / d;
  double diff = 0.0;
  for (std::size_t i = 3 * d; i < 6 * d; ++i) diff += std::abs(ha[i] - hb[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(Model, BidirectionalOutputsSeeFutureTokens) {
  Model m = Model::build(small(AttentionKind::bidirectional), 5);
  perturb(m, 6);
  const int pad = m.config().special().pad;
  const Tensor ha = final_hidden(m, make_token_batch({{1, 2, 3, 4, 5, 6}}, pad));
  const Tensor hb = final_hidden(m, make_token_batch({{1, 2, 3, 9, 9, 9}}, pad));
  double diff = 0.0;
  for (std::size_t i = 0; i < m.config().d_model; ++i) diff += std::abs(ha[i] - hb[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(Model, PaddingDoesNotChangeRealPositions) {
  for (auto a : {AttentionKind::causal, AttentionKind::bidirectional}) {
    Model m = Model::build(small(a), 8);
    perturb(m, 9);
    const int pad = m.config().special().pad;
    const Tensor tight = final_hidden(m, make_token_batch({{4, 5, 6, 7}}, pad));
    const Tensor wide = final_hidden(m, make_token_batch({{4, 5, 6, 7}}, pad, 9));
    for (std::size_t i = 0; i < tight.size(); ++i) EXPECT_NEAR(tight[i], wide[i], 1e-12);
  }
}

TEST(Model, BatchRowsAreIndependent) {
  Model m = Model::build(small(AttentionKind::bidirectional), 10);
  perturb(m, 11);
  const int pad = m.config().special().pad;
  const Tensor alone = final_hidden(m, make_token_batch({{3, 1, 4}}, pad, 6));
  const Tensor both = final_hidden(m, make_token_batch({{3, 1, 4}, {1, 5, 9, 2, 6, 5}}, pad));
  for (std::size_t i = 0; i < alone.size(); ++i) EXPECT_NEAR(alone[i], both[i], 1e-12);
}

// Differential oracle for block wiring: silencing the attention output must not
// affect the MLP branch of a parallel block, but must affect a sequential one.
TEST(Model, ParallelBlockMlpReadsBlockInput) {
  for (auto blk : {BlockType::parallel, BlockType::sequential}) {
    Model m = Model::build(small(AttentionKind::causal, blk), 12);
    perturb(m, 13);
    Model silent = m;
    for (auto* n : {"layers.1.attn.wo", "layers.1.attn.bo"}) {
      for (double& v : silent.param(n).value.data) v = 0.0;
    }
    const TokenBatch b = make_token_batch({{1, 2, 3, 4}}, m.config().special().pad);
    auto trace = [&](const Model& mm) {
      Graph g;
      Binding bind(g, mm);
      Var x = mm.embed(bind, b);
      BlockTrace tr = mm.block(bind, x, 1, mm.attention_mask(b), 0.0, 0);
      return std::array<Tensor, 4>{tr.input.value(), tr.attn_out.value(), tr.mlp_out.value(), tr.output.value()};
    };
    const auto full = trace(m), cut = trace(silent);
    double mlp_diff = 0.0;
    for (std::size_t i = 0; i < full[2].size(); ++i) mlp_diff += std::abs(full[2][i] - cut[2][i]);
    if (blk == BlockType::parallel) {
      EXPECT_EQ(mlp_diff, 0.0);
    } else {
      EXPECT_GT(mlp_diff, 1e-8);
    }
    // Both block types sum their branches into the residual stream.
    for (std::size_t i = 0; i < full[3].size(); ++i) {
      EXPECT_NEAR(full[3][i], full[0][i] + full[1][i] + full[2][i], 1e-12);
    }
  }
}

TEST(Model, LastCaptureIsFinalHidden) {
  Model m = Model::build(small(AttentionKind::causal), 14);
  const TokenBatch b = make_token_batch({{1, 2, 3}}, m.config().special().pad);
  const auto caps = forward_hidden(m, b, {0.5, 1.0});
  EXPECT_EQ(caps.at(1.0), final_hidden(m, b));
  EXPECT_EQ(caps.at(0.5).shape, (Shape{1, 3, m.config().d_model}));
}

TEST(Model, DropoutOnlyInTrainMode) {
  Model m = Model::build(small(AttentionKind::causal), 15);
  const TokenBatch b = make_token_batch({{1, 2, 3, 4}}, m.config().special().pad);
  auto run = [&](bool train, std::uint64_t seed) {
    Graph g;
    Binding bind(g, m);
    ForwardOptions o;
    o.train = train;
    o.dropout_seed = seed;
    return m.forward(bind, b, o).final_hidden->value();
  };
  EXPECT_EQ(run(false, 1), run(false, 2));
  EXPECT_EQ(run(true, 1), run(true, 1));
  EXPECT_FALSE(run(true, 1) == run(true, 2));
}

TEST(Lora, IsNoOpAtInitialization) {
  Model base = Model::build(small(AttentionKind::causal), 16);
  perturb(base, 17);
  LoRAConfig lc;
  lc.rank = 4;
  const Model adapted = base.with_lora(lc, 18);
  const TokenBatch b = make_token_batch({{1, 2, 3, 4, 5}}, base.config().special().pad);
  EXPECT_EQ(final_hidden(base, b), final_hidden(adapted, b));
}

TEST(Lora, TrainableCountMatchesFormula) {
  const ModelConfig c = small(AttentionKind::causal);
  LoRAConfig lc;
  lc.rank = 4;
  const Model adapted = Model::build(c, 19).with_lora(lc, 20);
  // Four d x d projections per layer, each with A (d x r) and B (r x d).
  EXPECT_EQ(adapted.parameter_count(true), c.layers * lc.targets.size() * lc.rank * (2 * c.d_model));
  for (const auto& p : adapted.params()) {
    const bool adapter = p.name.find(".lora_") != std::string::npos;
    EXPECT_EQ(p.trainable, adapter) << p.name;
  }
  EXPECT_DOUBLE_EQ(lc.scaling(), lc.alpha / static_cast<double>(lc.rank));
}

TEST(Lora, AdapterChangesOutputOnceBIsNonzero) {
  Model base = Model::build(small(AttentionKind::causal), 21);
  Model adapted = base.with_lora(LoRAConfig{}, 22);
  for (double& v : adapted.param("layers.2.attn.wv.lora_b").value.data) v = 0.05;
  const TokenBatch b = make_token_batch({{1, 2, 3, 4, 5}}, base.config().special().pad);
  EXPECT_FALSE(final_hidden(base, b) == final_hidden(adapted, b));
}

TEST(Lora, RejectsUnknownTarget) {
  LoRAConfig lc;
  lc.targets = {"attn.nope"};
  EXPECT_THROW(Model::build(small(AttentionKind::causal), 1).with_lora(lc, 1), ConfigError);
}

TEST(Lora, GradientsMatchFiniteDifferences) {
  Rng rng(23);
  Model m = Model::build(plab::testing::tiny_config(AttentionKind::causal), 24);
  perturb(m, 25, 0.3);
  LoRAConfig lc;
  lc.rank = 2;
  m = m.with_lora(lc, 26);
  for (double& v : m.param("layers.1.attn.wq.lora_b").value.data) v = rng.uniform(-0.3, 0.3);
  const auto seqs = plab::testing::random_sequences(rng, 3, 4, 6, 12);
  const Batch b = prepare_batch(ObjectiveKind::CausalLM, seqs, rng, m.config());
  LossOptions lo;
  lo.train = true;
  lo.dropout_seed = 99;
  EXPECT_LE(plab::testing::model_gradcheck(m, b, lo).max_rel_error, 1e-6);
}

TEST(Checkpoint, RoundTripPreservesParametersAndOutputs) {
  Model m = Model::build(small(AttentionKind::bidirectional), 27).with_lora(LoRAConfig{}, 28);
  perturb(m, 29);
  const auto path = (std::filesystem::temp_directory_path() / "plab_ckpt_test.bin").string();
  save_checkpoint(m, path);
  const Model back = load_checkpoint(path);
  ASSERT_EQ(back.params().size(), m.params().size());
  for (const auto& p : m.params()) {
    EXPECT_EQ(back.param(p.name).value, p.value) << p.name;
    EXPECT_EQ(back.param(p.name).trainable, p.trainable) << p.name;
  }
  const TokenBatch b = make_token_batch({{1, 2, 3}}, m.config().special().pad);
  EXPECT_EQ(final_hidden(m, b), final_hidden(back, b));
  EXPECT_TRUE(std::filesystem::exists(path + ".json"));
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".json");
}

TEST(Checkpoint, RejectsForeignFile) {
  const auto path = (std::filesystem::temp_directory_path() / "plab_not_ckpt.bin").string();
  {
    std::ofstream os(path);
    os << "hello world";
  }
  EXPECT_THROW(load_checkpoint(path), IoError);
  std::filesystem::remove(path);
}

TEST(Batch, PaddingAndMask) {
  const TokenBatch b = make_token_batch({{1, 2}, {3, 4, 5}}, 99);
  EXPECT_EQ(b.t, 3u);
  EXPECT_EQ(b.ids, (std::vector<int>{1, 2, 99, 3, 4, 5}));
  EXPECT_EQ(b.length(0), 2u);
  EXPECT_THROW(make_token_batch({{1, 2, 3}}, 0, 2), ShapeError);
}
