#include <gtest/gtest.h>

#include <cmath>
#include <string>

#include "plab/objectives/objectives.hpp"
#include "support/gradcheck.hpp"

using namespace plab;

namespace {

constexpr double kTol = 1e-6;

const std::vector<ObjectiveKind> kAll{ObjectiveKind::MLM,        ObjectiveKind::NSP,    ObjectiveKind::SpanDenoise,
                                      ObjectiveKind::CausalLM,   ObjectiveKind::CausalSpan, ObjectiveKind::SimCSE,
                                      ObjectiveKind::BarlowTwins};

ModelConfig enc_config() {
  ModelConfig c;
  c.attention = AttentionKind::bidirectional;
  c.layers = 2;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 16;
  c.vocab = 64;
  c.max_seq = 40;
  return c;
}

ModelConfig dec_config() {
  ModelConfig c = enc_config();
  c.attention = AttentionKind::causal;
  return c;
}

AttentionKind attention_for(ObjectiveKind k) {
  return k == ObjectiveKind::CausalLM || k == ObjectiveKind::CausalSpan ? AttentionKind::causal
                                                                         : AttentionKind::bidirectional;
}

class HeadGradient : public ::testing::TestWithParam<ObjectiveKind> {};

TEST_P(HeadGradient, MatchesCentralDifferences) {
  Rng rng(derive_seed(7, static_cast<std::uint64_t>(GetParam())));
  for (int c = 0; c < 100; ++c) {
    auto oc = plab::testing::objective_head_case(GetParam(), rng);
    const auto r = plab::testing::gradcheck(oc.build, oc.inputs);
    ASSERT_LE(r.max_rel_error, kTol) << to_string(GetParam()) << " case " << c;
  }
}

class ModelGradient : public ::testing::TestWithParam<std::tuple<ObjectiveKind, BlockType>> {};

TEST_P(ModelGradient, MatchesCentralDifferences) {
  const auto [kind, block] = GetParam();
  Rng rng(derive_seed(11, static_cast<std::uint64_t>(kind), static_cast<std::uint64_t>(block)));
  for (int c = 0; c < 3; ++c) {
    Model m = Model::build(plab::testing::tiny_config(attention_for(kind), block), rng.next_u64());
    for (auto& p : m.params()) {
      for (double& v : p.value.data) v += rng.uniform(-0.3, 0.3);
    }
    ObjectiveSettings s;
    s.mask_rate = 0.4;
    const auto seqs = plab::testing::random_sequences(rng, 3, 4, 8, static_cast<int>(m.config().regular_vocab()));
    const Batch b = prepare_batch(kind, seqs, rng, m.config(), s);
    LossOptions lo;
    lo.train = true;
    lo.dropout_seed = rng.next_u64();
    lo.settings = s;
    const auto r = plab::testing::model_gradcheck(m, b, lo);
    ASSERT_LE(r.max_rel_error, kTol) << to_string(kind) << " case " << c << " param " << r.worst_input;
  }
}

INSTANTIATE_TEST_SUITE_P(AllObjectives, HeadGradient, ::testing::ValuesIn(kAll),
                         [](const auto& info) { return to_string(info.param); });

INSTANTIATE_TEST_SUITE_P(AllObjectives, ModelGradient,
                         ::testing::Combine(::testing::ValuesIn(kAll),
                                            ::testing::Values(BlockType::sequential, BlockType::parallel)),
                         [](const auto& info) {
                           return to_string(std::get<0>(info.param)) + "_" + to_string(std::get<1>(info.param));
                         });

std::vector<Sequence> long_sequences(Rng& rng, std::size_t n, std::size_t len, int vocab) {
  std::vector<Sequence> out(n);
  for (auto& s : out) {
    for (std::size_t i = 0; i < len; ++i) s.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab))));
  }
  return out;
}

}  // namespace

TEST(Names, RoundTrip) {
  for (auto k : kAll) EXPECT_EQ(parse_objective(to_string(k)), k);
  EXPECT_THROW(parse_objective("ELECTRA"), ConfigError);
}

TEST(Compatibility, RejectsMismatchedFamilies) {
  EXPECT_THROW(check_compatible(ObjectiveKind::NSP, dec_config()), ConfigError);
  EXPECT_THROW(check_compatible(ObjectiveKind::CausalLM, enc_config()), ConfigError);
  EXPECT_THROW(check_compatible(ObjectiveKind::CausalSpan, enc_config()), ConfigError);
  EXPECT_NO_THROW(check_compatible(ObjectiveKind::SimCSE, dec_config()));
  EXPECT_NO_THROW(check_compatible(ObjectiveKind::MLM, dec_config()));
  EXPECT_EQ(reference_objective(enc_config()), ObjectiveKind::MLM);
  EXPECT_EQ(reference_objective(dec_config()), ObjectiveKind::CausalLM);
}

TEST(Prepare, MlmMasksAboutFifteenPercentWithEightyTenTenSplit) {
  const ModelConfig cfg = enc_config();
  const auto sp = cfg.special();
  Rng rng(1);
  std::size_t total = 0, targets = 0, masked = 0, kept = 0;
  for (int rep = 0; rep < 200; ++rep) {
    const auto seqs = long_sequences(rng, 8, 32, static_cast<int>(cfg.regular_vocab()));
    const Batch b = prepare_batch(ObjectiveKind::MLM, seqs, rng, cfg);
    for (std::size_t i = 0; i < b.tokens.n; ++i) {
      for (std::size_t p = 0; p < 32; ++p) {
        const std::size_t k = i * b.tokens.t + p;
        ++total;
        if (b.target_mask[k] == 0.0) {
          EXPECT_EQ(b.tokens.ids[k], seqs[i][p]);
          continue;
        }
        ++targets;
        EXPECT_EQ(b.targets[k], seqs[i][p]);
        if (b.tokens.ids[k] == sp.mask) ++masked;
        if (b.tokens.ids[k] == seqs[i][p]) ++kept;
      }
    }
  }
  const double rate = static_cast<double>(targets) / static_cast<double>(total);
  EXPECT_NEAR(rate, 0.15, 0.01);
  EXPECT_NEAR(static_cast<double>(masked) / static_cast<double>(targets), 0.8, 0.02);
  // kept covers the 10% unchanged branch plus random replacements that hit the original id
  EXPECT_NEAR(static_cast<double>(kept) / static_cast<double>(targets), 0.1 + 0.1 / 60.0, 0.02);
}

TEST(Prepare, SpanDenoiseMasksExactBudgetInContiguousRuns) {
  const ModelConfig cfg = enc_config();
  const auto sp = cfg.special();
  Rng rng(2);
  double runs = 0.0, masked_total = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const auto seqs = long_sequences(rng, 4, 40, static_cast<int>(cfg.regular_vocab()));
    const Batch b = prepare_batch(ObjectiveKind::SpanDenoise, seqs, rng, cfg);
    for (std::size_t i = 0; i < b.tokens.n; ++i) {
      std::size_t count = 0;
      bool prev = false;
      for (std::size_t p = 0; p < 40; ++p) {
        const std::size_t k = i * b.tokens.t + p;
        const bool m = b.tokens.ids[k] == sp.mask;
        EXPECT_EQ(m, b.target_mask[k] != 0.0);
        if (m) {
          ++count;
          EXPECT_EQ(b.targets[k], seqs[i][p]);
          if (!prev) runs += 1.0;
        }
        prev = m;
      }
      EXPECT_EQ(count, 6u);
      masked_total += static_cast<double>(count);
    }
  }
  // Mean span length 3 means runs are clearly longer than single tokens.
  EXPECT_GT(masked_total / runs, 1.8);
}

TEST(Prepare, CausalSpanPredictsMaskedTokenFromPreviousSlot) {
  const ModelConfig cfg = dec_config();
  const auto sp = cfg.special();
  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    const auto seqs = long_sequences(rng, 4, 20, static_cast<int>(cfg.regular_vocab()));
    const Batch b = prepare_batch(ObjectiveKind::CausalSpan, seqs, rng, cfg);
    for (std::size_t i = 0; i < b.tokens.n; ++i) {
      EXPECT_NE(b.tokens.ids[i * b.tokens.t], sp.mask) << "first token is never masked";
      for (std::size_t p = 1; p < 20; ++p) {
        const std::size_t k = i * b.tokens.t + p;
        const bool m = b.tokens.ids[k] == sp.mask;
        EXPECT_EQ(m, b.target_mask[k - 1] != 0.0);
        if (m) {
          EXPECT_EQ(b.targets[k - 1], seqs[i][p]);
        }
      }
    }
  }
}

TEST(Prepare, CausalLmTargetsAreNextTokens) {
  const ModelConfig cfg = dec_config();
  Rng rng(4);
  const std::vector<Sequence> seqs{{5, 6, 7}, {8, 9, 10, 11, 12}};
  const Batch b = prepare_batch(ObjectiveKind::CausalLM, seqs, rng, cfg);
  EXPECT_EQ(b.target_count(), 2u + 4u);
  EXPECT_DOUBLE_EQ(b.weight(), 6.0);
  EXPECT_EQ(b.targets[0], 6);
  EXPECT_EQ(b.targets[1], 7);
  EXPECT_EQ(b.target_mask[2], 0.0);
  EXPECT_EQ(b.targets[5 + 3], 12);
  EXPECT_EQ(b.target_mask[5 + 4], 0.0);
}

TEST(Prepare, NspLayoutAndBalancedLabels) {
  const ModelConfig cfg = enc_config();
  const auto sp = cfg.special();
  Rng rng(5);
  int ones = 0, total = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const auto seqs = long_sequences(rng, 8, 12, static_cast<int>(cfg.regular_vocab()));
    const Batch b = prepare_batch(ObjectiveKind::NSP, seqs, rng, cfg);
    ASSERT_EQ(b.pair_labels.size(), 8u);
    for (std::size_t i = 0; i < b.tokens.n; ++i) {
      const int* row = &b.tokens.ids[i * b.tokens.t];
      EXPECT_EQ(row[0], sp.cls);
      EXPECT_EQ(row[7], sp.sep);
      EXPECT_EQ(row[14], sp.sep);
      for (int p = 1; p < 7; ++p) EXPECT_EQ(row[p], seqs[i][static_cast<std::size_t>(p - 1)]);
      if (b.pair_labels[i] == 0) {
        for (int p = 8; p < 14; ++p) EXPECT_EQ(row[p], seqs[i][static_cast<std::size_t>(p - 2)]);
      }
      ones += b.pair_labels[i];
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(ones) / total, 0.5, 0.05);
  EXPECT_DOUBLE_EQ(prepare_batch(ObjectiveKind::NSP, {{1, 2}, {3, 4}}, rng, cfg).weight(), 2.0);
}

TEST(Prepare, ContrastiveNeedsTwoSamples) {
  Rng rng(6);
  EXPECT_THROW(prepare_batch(ObjectiveKind::SimCSE, {{1, 2, 3}}, rng, enc_config()), ConfigError);
  EXPECT_THROW(prepare_batch(ObjectiveKind::MLM, {{}}, rng, enc_config()), ConfigError);
  const Batch b = prepare_batch(ObjectiveKind::BarlowTwins, {{1, 2}, {3, 4}}, rng, enc_config());
  EXPECT_NE(b.view_seeds[0], b.view_seeds[1]);
}

TEST(Prepare, RowsSliceAllFields) {
  Rng rng(7);
  const Batch b = prepare_batch(ObjectiveKind::CausalLM, {{1, 2, 3}, {4, 5}, {6, 7, 8}}, rng, dec_config());
  const Batch tail = b.rows(1, 2);
  EXPECT_EQ(tail.size(), 2u);
  EXPECT_EQ(tail.targets[0], 5);
  EXPECT_DOUBLE_EQ(tail.weight(), 1.0 + 2.0);
}

TEST(Pooling, DefaultsFollowObjectiveAndFamily) {
  EXPECT_EQ(default_pooling(ObjectiveKind::NSP, enc_config()), PoolMode::cls);
  EXPECT_EQ(default_pooling(ObjectiveKind::SimCSE, enc_config()), PoolMode::mean);
  EXPECT_EQ(default_pooling(ObjectiveKind::SimCSE, dec_config()), PoolMode::last_token);
  ObjectiveSettings s;
  s.pooling = PoolMode::mean;
  EXPECT_EQ(default_pooling(ObjectiveKind::BarlowTwins, dec_config(), s), PoolMode::mean);
}

TEST(Losses, InfoNceOfIdenticalOrthogonalViewsIsSmall) {
  Graph g;
  Tensor z(Shape{3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) z[i * 3 + i] = 1.0;
  Var a = g.constant(z), b = g.constant(z);
  // Direct formula: -log(e^{1/tau} / (e^{1/tau} + 2))
  const double tau = 0.5;
  const double expected = -std::log(std::exp(1.0 / tau) / (std::exp(1.0 / tau) + 2.0));
  EXPECT_NEAR(info_nce_loss(a, b, tau).value().item(), expected, 1e-12);
}

TEST(Losses, BarlowTwinsOfPerfectlyCorrelatedDecorrelatedViewsIsNearZero) {
  Graph g;
  // Columns are centered, unit-variance and mutually orthogonal.
  Tensor z(Shape{4, 2}, std::vector<double>{1, 1, -1, 1, 1, -1, -1, -1});
  const double loss = barlow_twins_loss(g.constant(z), g.constant(z), 5e-3, 0.0).value().item();
  EXPECT_NEAR(loss, 0.0, 1e-12);
}

TEST(Capture, GradientIsPooledPerSampleAndDeterministic) {
  Model m = Model::build(dec_config(), 8);
  Rng rng(9);
  const auto seqs = long_sequences(rng, 4, 10, 50);
  const Batch b = prepare_batch(ObjectiveKind::CausalLM, seqs, rng, m.config());
  LossOptions lo;
  lo.dropout_seed = 3;
  const Tensor g1 = capture_objective_gradient(m, b, lo);
  const Tensor g2 = capture_objective_gradient(m, b, lo);
  EXPECT_EQ(g1.shape, (Shape{4, 8}));
  EXPECT_EQ(g1, g2);
  for (auto k : {ObjectiveKind::SimCSE, ObjectiveKind::BarlowTwins}) {
    Rng r2(10);
    const Batch cb = prepare_batch(k, seqs, r2, m.config());
    const Tensor gc = capture_objective_gradient(m, cb, lo);
    EXPECT_GT(gc.squared_norm(), 0.0) << to_string(k);
  }
}
