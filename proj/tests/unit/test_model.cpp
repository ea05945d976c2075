#include <gtest/gtest.h>

#include <cmath>

#include "pmlm/errors.hpp"
#include "pmlm/model.hpp"
#include "pmlm/ops.hpp"
#include "test_support.hpp"

using namespace pmlm;

TEST(ModelConfig, Validation) {
  ModelConfig c = test::tiny_model(50);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.mask_position_id(), c.max_positions);
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = test::tiny_model(50);
  c.mask_token_id = 50;
  EXPECT_THROW(c.validate(), ConfigError);
  c = test::tiny_model(50);
  c.position_loss_weight = -0.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(InitWeights, DeterministicPerSeed) {
  const ModelConfig c = test::tiny_model(50);
  auto a = init_weights<float>(c, 3), b = init_weights<float>(c, 3), d = init_weights<float>(c, 4);
  auto pa = a.parameters(), pb = b.parameters(), pd = d.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(bitwise_equal(pa[i]->value, pb[i]->value)) << pa[i]->name;
    any_diff |= !bitwise_equal(pa[i]->value, pd[i]->value);
  }
  EXPECT_TRUE(any_diff);
}

TEST(InitWeights, GainsOneBiasesZeroAndUniqueNames) {
  auto w = init_weights<float>(test::tiny_model(50), 1);
  std::set<std::string> names;
  for (const auto* p : w.parameters()) {
    EXPECT_TRUE(names.insert(p->name).second) << p->name;
    if (p->name.ends_with(".gain")) {
      for (float v : p->value.data()) ASSERT_EQ(v, 1.0f) << p->name;
    }
    if (p->name.ends_with(".bias") || p->name.ends_with(".b") || p->name.ends_with("output_bias")) {
      for (float v : p->value.data()) ASSERT_EQ(v, 0.0f) << p->name;
    }
  }
  EXPECT_EQ(w.position_embedding.value.shape(), (Shape{9, 16}));
  EXPECT_EQ(w.position_w.value.shape(), (Shape{16, 8}));
}

TEST(InitWeights, MatrixStatistics) {
  ModelConfig c = test::tiny_model(50);
  c.vocab_size = 625;  // 625 x 16 = 10^4 elements
  auto w = init_weights<double>(c, 2);
  double s = 0, s2 = 0;
  for (double v : w.token_embedding.value.data()) {
    s += v;
    s2 += v * v;
  }
  const double n = 1e4, mean = s / n;
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(std::sqrt(s2 / n - mean * mean), 0.02, 0.002);
}

TEST(Embed, LookupAndAddOracle) {
  ModelConfig c = test::tiny_model(50);
  c.hidden_dropout = 0.0;
  auto w = init_weights<double>(c, 5);
  for (double& g : w.embed_norm_gain.value.data()) g = 1.0;
  const std::vector<std::int32_t> ids = {2, 7, 9, 3}, pos = {0, 1, 2, 3};
  Tape<double> tape;
  ForwardContext ctx;
  auto h = embed_forward(tape, w, ids, pos, 1, 4, ctx);
  // Reference: add the table rows, then normalise by hand.
  for (std::size_t s = 0; s < 4; ++s) {
    std::vector<double> row(16);
    double mean = 0;
    for (std::size_t j = 0; j < 16; ++j) {
      row[j] = w.token_embedding.value.at(ids[s], j) + w.position_embedding.value.at(pos[s], j);
      mean += row[j];
    }
    mean /= 16;
    double var = 0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= 16;
    for (std::size_t j = 0; j < 16; ++j) {
      EXPECT_NEAR(h.value().at(s, j), (row[j] - mean) / std::sqrt(var + kLayerNormEps), 1e-12);
    }
  }
}

TEST(Embed, MaskPositionGivesSamePositionVector) {
  ModelConfig c = test::tiny_model(50);
  auto w = init_weights<double>(c, 5);
  for (double& v : w.token_embedding.value.data()) v = 0.0;
  const std::int32_t P = static_cast<std::int32_t>(c.mask_position_id());
  const std::vector<std::int32_t> ids = {5, 6, 7}, pos = {P, P, P};
  Tape<double> tape;
  auto h = embed_forward(tape, w, ids, pos, 1, 3, ForwardContext{});
  for (std::size_t j = 0; j < 16; ++j) {
    EXPECT_EQ(h.value().at(0, j), h.value().at(1, j));
    EXPECT_EQ(h.value().at(0, j), h.value().at(2, j));
  }
}

TEST(Embed, ZeroTablesGiveNormBias) {
  ModelConfig c = test::tiny_model(50);
  auto w = init_weights<double>(c, 5);
  w.token_embedding.value.fill(0.0);
  w.position_embedding.value.fill(0.0);
  for (std::size_t j = 0; j < 16; ++j) w.embed_norm_bias.value.data()[j] = 0.1 * static_cast<double>(j);
  const std::vector<std::int32_t> ids = {5, 6}, pos = {0, 1};
  Tape<double> tape;
  auto h = embed_forward(tape, w, ids, pos, 1, 2, ForwardContext{});
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(h.value().at(1, j), 0.1 * static_cast<double>(j));
}

TEST(Embed, OutOfRangeIdsNameTheBatchRow) {
  auto w = init_weights<float>(test::tiny_model(50), 5);
  const std::vector<std::int32_t> ids = {5, 6, 7, 50}, pos = {0, 1, 0, 1};
  Tape<float> tape;
  try {
    embed_forward(tape, w, ids, pos, 2, 2, ForwardContext{});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("batch row 1"), std::string::npos) << e.what();
  }
  const std::vector<std::int32_t> good_ids = {5, 6}, bad_pos = {0, 9};
  EXPECT_THROW(embed_forward(tape, w, good_ids, bad_pos, 1, 2, ForwardContext{}), DataError);
}

TEST(Encoder, ZeroLayersIsIdentity) {
  ModelConfig c = test::tiny_model(50);
  c.layers = 0;
  auto w = init_weights<float>(c, 1);
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({6, 16}, 0.5f));
  const std::vector<std::size_t> valid = {3, 3};
  auto y = encoder_forward(tape, w, x, 2, 3, valid, ForwardContext{});
  EXPECT_TRUE(bitwise_equal(y.value(), x.value()));
}

TEST(Encoder, SingleTokenAttentionIsOne) {
  ModelConfig c = test::tiny_model(50);
  c.layers = 1;
  auto w = init_weights<double>(c, 1);
  Tape<double> tape;
  std::vector<AttentionSite> trace;
  ForwardContext ctx;
  ctx.trace = &trace;
  Rng rng(1);
  auto x = tape.constant(Tensor<double>({1, 16}));
  for (double& v : const_cast<Tensor<double>&>(x.value()).data()) v = rng.normal();
  const std::vector<std::size_t> valid = {1};
  auto y = encoder_forward(tape, w, x, 1, 1, valid, ctx);
  ASSERT_EQ(trace.size(), 1u);
  for (double v : tape.value(trace[0].softmax).data()) EXPECT_EQ(v, 1.0);
  EXPECT_TRUE(y.value().all_finite());
}

TEST(Encoder, PaddingDoesNotLeakIntoValidRows) {
  ModelConfig c = test::tiny_model(50);
  auto w = init_weights<double>(c, 2);
  Rng rng(3);
  Tensor<double> a({4, 16});
  for (double& v : a.data()) v = rng.normal();
  Tensor<double> b = a;
  for (std::size_t j = 0; j < 16; ++j) b.at(3, j) = 7.0;  // change the padded row only
  const std::vector<std::size_t> valid = {3};
  Tape<double> t1, t2;
  auto ya = encoder_forward(t1, w, t1.constant(a), 1, 4, valid, ForwardContext{});
  auto yb = encoder_forward(t2, w, t2.constant(b), 1, 4, valid, ForwardContext{});
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(ya.value().at(r, j), yb.value().at(r, j));
  }
}

TEST(Encoder, TrainingWithDropoutNeedsRng) {
  auto w = init_weights<float>(test::tiny_model(50), 1);
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({2, 16}, 1.0f));
  ForwardContext ctx;
  ctx.training = true;
  const std::vector<std::size_t> valid = {2};
  EXPECT_THROW(encoder_forward(tape, w, x, 1, 2, valid, ctx), UsageError);
}

TEST(Heads, GatherRejectsOutOfRangeSlots) {
  Tape<float> tape;
  auto h = tape.constant(Tensor<float>({6, 4}));
  const std::vector<Slot> slots = {{0, 1}, {2, 0}};
  EXPECT_THROW(gather_slots(h, std::span<const Slot>(slots), 2, 3), IndexError);
}

TEST(Heads, EmptyGatherGivesZeroRows) {
  auto w = init_weights<float>(test::tiny_model(50), 1);
  Tape<float> tape;
  auto h = tape.constant(Tensor<float>({6, 16}));
  auto packed = gather_slots(h, std::span<const Slot>(), 2, 3);
  EXPECT_EQ(packed.shape(), (Shape{0, 16}));
  EXPECT_EQ(position_head_forward(tape, w, packed).shape(), (Shape{0, 8}));
}

TEST(Heads, MlmHeadUsesTiedEmbedding) {
  ModelConfig c = test::tiny_model(50);
  auto w = init_weights<double>(c, 1);
  Tape<double> tape;
  Rng rng(2);
  Tensor<double> x({2, 16});
  for (double& v : x.data()) v = rng.normal();
  auto logits = mlm_head_forward(tape, w, tape.constant(x));
  EXPECT_EQ(logits.shape(), (Shape{2, 50}));
  // Changing one embedding row moves exactly that logit column.
  Tape<double> tape2;
  for (std::size_t j = 0; j < 16; ++j) w.token_embedding.value.at(7, j) += 1.0;
  auto logits2 = mlm_head_forward(tape2, w, tape2.constant(x));
  for (std::size_t v = 0; v < 50; ++v) {
    if (v == 7) {
      EXPECT_NE(logits.value().at(0, v), logits2.value().at(0, v));
    } else {
      EXPECT_EQ(logits.value().at(0, v), logits2.value().at(0, v));
    }
  }
}

TEST(PretrainForward, TotalIsMlmPlusLambdaPos) {
  const ModelConfig c = test::tiny_model(50);
  auto w = init_weights<double>(c, 1);
  w.config.position_loss_weight = 0.5;
  const MaskedBatch batch = test::random_batch(c, 3, 8, 0.3, 0.3, 4);
  Tape<double> tape;
  auto out = pretrain_forward(tape, batch, w, ForwardContext{});
  EXPECT_EQ(out.mlm_logits.shape()[0], batch.token_slots.size());
  EXPECT_EQ(out.pos_logits.shape()[0], batch.position_slots.size());
  EXPECT_NEAR(out.total.value().item(), out.mlm_loss.value().item() + 0.5 * out.pos_loss.value().item(), 1e-15);
}

TEST(PretrainForward, SequenceLongerThanPositionsIsConfigError) {
  ModelConfig c = test::tiny_model(50);
  auto w = init_weights<float>(c, 1);
  ModelConfig wide = c;
  wide.max_positions = 12;
  const MaskedBatch batch = test::random_batch(wide, 1, 12, 0.2, 0.0, 1);
  Tape<float> tape;
  EXPECT_THROW(pretrain_forward(tape, batch, w, ForwardContext{}), ConfigError);
}

TEST(PretrainForward, NoPositionSlotsMeansNoPositionHead) {
  const ModelConfig c = test::tiny_model(50);
  auto w = init_weights<float>(c, 1);
  const MaskedBatch batch = test::random_batch(c, 2, 8, 0.3, 0.0, 2);
  Tape<float> tape;
  auto out = pretrain_forward(tape, batch, w, ForwardContext{});
  EXPECT_FALSE(out.pos_logits.valid());
  EXPECT_EQ(out.pos_loss.value().item(), 0.0f);
  EXPECT_EQ(out.total.id(), out.mlm_loss.id());
}

TEST(Cast, RoundTripFloatDoubleFloat) {
  auto w = init_weights<float>(test::tiny_model(50), 1);
  auto back = w.cast<double>().cast<float>();
  auto a = w.parameters(), b = back.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bitwise_equal(a[i]->value, b[i]->value));
}
