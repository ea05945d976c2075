#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "pmlm/checkpoint.hpp"
#include "pmlm/config_json.hpp"
#include "pmlm/errors.hpp"
#include "pmlm/pretrain.hpp"
#include "pmlm/training.hpp"
#include "test_support.hpp"

using namespace pmlm;

namespace {

std::string rows(std::span<const MetricsRecord> records) {
  std::ostringstream os;
  write_metrics_csv(os, records);
  return os.str();
}

// Byte layout pieces of a serialized checkpoint.
struct Pieces {
  std::string preamble;  // magic + version
  Json header;
  std::string payload;
};

Pieces split(const std::string& bytes) {
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  return {bytes.substr(0, 8), Json::parse(bytes.substr(16, len)), bytes.substr(16 + len)};
}

std::string join(const std::string& preamble, const std::string& header, const std::string& payload) {
  std::string out = preamble;
  std::uint64_t len = header.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  return out + header + payload;
}

std::string file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

CheckpointError::Kind load_error_kind(const std::string& bytes) {
  try {
    parse_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "checkpoint parsed without error";
  return CheckpointError::Kind::kIo;
}

}  // namespace

TEST(LrSchedule, WarmupThenLinearDecay) {
  EXPECT_EQ(lr_at_step(0, 100, 10, 0.5), 0.0);
  EXPECT_DOUBLE_EQ(lr_at_step(5, 100, 10, 0.5), 0.25);
  EXPECT_DOUBLE_EQ(lr_at_step(10, 100, 10, 0.5), 0.5);
  // Midpoint of the decay segment: half of the peak.
  EXPECT_DOUBLE_EQ(lr_at_step(55, 100, 10, 0.5), 0.25);
  EXPECT_EQ(lr_at_step(100, 100, 10, 0.5), 0.0);
  EXPECT_DOUBLE_EQ(lr_at_step(3, 4, 0, 1.0), 0.25);
  EXPECT_THROW(lr_at_step(101, 100, 10, 0.5), UsageError);
}

TEST(TrainConfig, PhaseBudgetsAndValidation) {
  TrainConfig t;
  EXPECT_EQ(t.phase1_steps(), 1800u);
  EXPECT_EQ(t.phase2_steps(), 200u);
  EXPECT_NO_THROW(t.validate());
  t.phase2.seq_len = 16;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.lr_peak = 0.0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.momentum = 1.0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Modes, BaselineDisablesPositionObjective) {
  TrainConfig t;
  ModelConfig m;
  apply_mode(PretrainMode::kBaseline, t, m);
  EXPECT_EQ(t.masking.position_mask_pct, 0.0);
  EXPECT_EQ(m.position_loss_weight, 0.0);
  EXPECT_EQ(parse_pretrain_mode("position"), PretrainMode::kPositionMasking);
  EXPECT_THROW(parse_pretrain_mode("both"), ConfigError);
}

TEST(Sgd, HandIteratedMomentumRecurrence) {
  // Loss 0.5*theta^2 has gradient theta. With m=0.9, lr=0.1:
  // theta1 = 0.9 theta0, v2 = 1.8 theta0, theta2 = 0.72 theta0.
  Parameter<double> p("theta", Tensor<double>({2}, {1.0, -2.0}));
  std::vector<Parameter<double>*> params = {&p};
  auto buffers = make_momentum_buffers<double>(params);
  for (int step = 0; step < 2; ++step) {
    for (std::size_t i = 0; i < 2; ++i) p.grad[i] = p.value[i];
    sgd_step<double>(params, buffers, 0.1, 0.9);
  }
  EXPECT_NEAR(p.value[0], 0.72, 1e-15);
  EXPECT_NEAR(p.value[1], -1.44, 1e-15);
  EXPECT_NEAR(buffers[0][0], 1.8, 1e-15);
  EXPECT_EQ(p.grad[0], 0.0);
}

TEST(Sgd, ZeroLrAndZeroMomentum) {
  Parameter<double> p("w", Tensor<double>({3}, {1.0, 2.0, 3.0}));
  std::vector<Parameter<double>*> params = {&p};
  auto buffers = make_momentum_buffers<double>(params);
  p.grad.fill(5.0);
  sgd_step<double>(params, buffers, 0.0, 0.9);
  EXPECT_EQ(p.value[2], 3.0);
  p.grad.fill(1.0);
  buffers[0].fill(0.0);
  sgd_step<double>(params, buffers, 0.5, 0.0);
  EXPECT_EQ(p.value[0], 0.5);
}

TEST(Sgd, NonFiniteGradientNamesParameterAndLeavesValues) {
  Parameter<float> a("layer.a", Tensor<float>({1}, {1.0f}));
  Parameter<float> b("layer.b", Tensor<float>({1}, {2.0f}));
  std::vector<Parameter<float>*> params = {&a, &b};
  auto buffers = make_momentum_buffers<float>(params);
  a.grad[0] = 1.0f;
  b.grad[0] = std::nanf("");
  try {
    sgd_step<float>(params, buffers, 0.1, 0.9);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.b"), std::string::npos);
  }
  EXPECT_EQ(a.value[0], 1.0f);
}

TEST(MetricsCsv, RoundTripIsExact) {
  MetricsRecord r;
  r.step = 7;
  r.phase = 2;
  r.lr = 0.1 / 3.0;
  r.total_loss = 5.123456789012345;
  r.mlm_accuracy = 1.0 / 7.0;
  r.tokens_seen = 123456789;
  r.seed = 42;
  std::vector<MetricsRecord> in = {r, r};
  in[1].step = 8;
  std::istringstream is(rows(in));
  const auto out = read_metrics_csv(is);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].lr, r.lr);
  EXPECT_EQ(out[0].mlm_accuracy, r.mlm_accuracy);
  EXPECT_EQ(out[1].step, 8u);
  EXPECT_EQ(rows(out), rows(in));
  std::istringstream bad("step,phase\n");
  EXPECT_THROW(read_metrics_csv(bad), DataError);
}

TEST(Evaluate, ArgmaxTiesGoToLowestIndex) {
  Tensor<float> t({3, 3}, {1, 1, 1, 0, 2, 2, 3, 1, 3});
  EXPECT_EQ(argmax_rows(t), (std::vector<std::size_t>{0, 1, 0}));
}

namespace {

// All weights zero: every logit is zero and argmax is class 0.
ModelWeights<float> zero_weights(const ModelConfig& c) {
  auto w = init_weights<float>(c, 0);
  for (auto* p : w.parameters()) p->value.fill(0.0f);
  return w;
}

MaskedBatch hand_batch() {
  MaskedBatch b;
  b.batch_size = 1;
  b.seq_len = 6;
  b.input_ids = {Vocab::kCls, 4, 4, 4, 4, Vocab::kSep};
  b.original_ids = b.input_ids;
  b.position_ids = {0, 8, 8, 3, 4, 5};
  b.valid_lengths = {6};
  b.token_slots = {{0, 1}, {0, 2}, {0, 3}, {0, 4}};
  b.token_labels = {0, 7, 0, 9};
  b.position_slots = {{0, 1}, {0, 2}};
  b.position_labels = {0, 2};
  return b;
}

}  // namespace

TEST(Evaluate, UniformLogitsScoreClassZeroFrequency) {
  const ModelConfig c = test::tiny_model(50);
  auto w = zero_weights(c);
  const std::vector<MaskedBatch> batches = {hand_batch()};
  const EvalResult r = evaluate(w, std::span<const MaskedBatch>(batches));
  EXPECT_EQ(r.mlm_accuracy, 0.5);
  EXPECT_EQ(r.pos_accuracy, 0.5);
  EXPECT_NEAR(r.mlm_loss, std::log(50.0), 1e-5);
  EXPECT_NEAR(r.pos_loss, std::log(8.0), 1e-5);
  EXPECT_NEAR(r.total_loss, r.mlm_loss + 1.0 * r.pos_loss, 1e-12);
}

TEST(Evaluate, OneHotLogitsScorePerfectly) {
  const ModelConfig c = test::tiny_model(50);
  auto w = zero_weights(c);
  w.mlm_output_bias.value[7] = 10.0f;
  w.position_b.value[2] = 10.0f;
  MaskedBatch b = hand_batch();
  b.token_labels = {7, 7, 7, 7};
  b.position_labels = {2, 2};
  const std::vector<MaskedBatch> batches = {b};
  const EvalResult r = evaluate(w, std::span<const MaskedBatch>(batches));
  EXPECT_EQ(r.mlm_accuracy, 1.0);
  EXPECT_EQ(r.pos_accuracy, 1.0);
}

TEST(Evaluate, NoPositionSlotsGivesZeroPositionAccuracy) {
  const ModelConfig c = test::tiny_model(50);
  auto w = zero_weights(c);
  MaskedBatch b = hand_batch();
  b.position_slots.clear();
  b.position_labels.clear();
  b.position_ids = {0, 1, 2, 3, 4, 5};
  const std::vector<MaskedBatch> batches = {b};
  const EvalResult r = evaluate(w, std::span<const MaskedBatch>(batches));
  EXPECT_EQ(r.pos_accuracy, 0.0);
  EXPECT_EQ(r.pos_slots, 0u);
  EXPECT_EQ(r.total_loss, r.mlm_loss);
}

// Untrained model: accuracy is a binomial draw around 1/45 (labels are
// uniform over the 45 non-special ids), i.e. within 2% of chance 1/V.
TEST(Evaluate, UntrainedModelNearChance) {
  const ModelConfig c = test::tiny_model(50);
  auto w = init_weights<float>(c, 11);
  std::vector<MaskedBatch> batches;
  for (std::uint64_t s = 0; s < 100; ++s) batches.push_back(test::random_batch(c, 16, 8, 0.5, 0.0, s));
  const EvalResult r = evaluate(w, std::span<const MaskedBatch>(batches));
  EXPECT_GT(r.mlm_slots, 4000u);
  EXPECT_NEAR(r.mlm_accuracy, 1.0 / 50.0, 0.02);
}

class PretrainTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { corpus_ = new test::SmallCorpus(test::small_corpus()); }
  static void TearDownTestSuite() { delete corpus_; }
  static const std::vector<std::int32_t>& stream() { return corpus_->stream; }
  static ModelConfig model() { return test::small_model(corpus_->vocab.size()); }
  static test::SmallCorpus* corpus_;
};

test::SmallCorpus* PretrainTest::corpus_ = nullptr;

TEST_F(PretrainTest, ZeroStepsReturnsInitialWeights) {
  TrainConfig t = test::small_train(0);
  const PretrainResult r = run_pretraining(t, model(), stream(), PretrainMode::kPositionMasking);
  EXPECT_TRUE(r.metrics.empty());
  const auto init = init_weights<float>(model(), derive_seed(t.seed, "weights-init"));
  auto a = r.checkpoint.weights.parameters();
  auto b = init.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bitwise_equal(a[i]->value, b[i]->value)) << b[i]->name;
}

TEST_F(PretrainTest, DeterministicAndPhased) {
  const TrainConfig t = test::small_train(30);
  const PretrainResult a = run_pretraining(t, model(), stream(), PretrainMode::kPositionMasking);
  const PretrainResult b = run_pretraining(t, model(), stream(), PretrainMode::kPositionMasking);
  EXPECT_EQ(rows(a.metrics), rows(b.metrics));
  EXPECT_EQ(serialize_checkpoint(a.checkpoint), serialize_checkpoint(b.checkpoint));

  // Steps 5..25 and the phase-1 end at 27, then 30.
  std::vector<std::size_t> steps;
  for (const auto& m : a.metrics) steps.push_back(m.step);
  EXPECT_EQ(steps, (std::vector<std::size_t>{5, 10, 15, 20, 25, 27, 30}));
  EXPECT_EQ(a.metrics[5].phase, 1);
  EXPECT_EQ(a.metrics[6].phase, 2);
  EXPECT_EQ(a.checkpoint.phase1_steps_done, 27u);
  EXPECT_EQ(a.checkpoint.phase2_steps_done, 3u);
  // tokens_seen grows by batch*seq per step exactly.
  EXPECT_EQ(a.metrics[0].tokens_seen, 5u * 4u * 8u);
  EXPECT_EQ(a.metrics[6].tokens_seen, 27u * 4u * 8u + 3u * 2u * 12u);
  for (const auto& m : a.metrics) {
    EXPECT_GE(m.mlm_accuracy, 0.0);
    EXPECT_LE(m.mlm_accuracy, 1.0);
    EXPECT_GT(m.pos_loss, 0.0);
  }
  TrainConfig other = t;
  other.seed = 1;
  EXPECT_NE(rows(run_pretraining(other, model(), stream(), PretrainMode::kPositionMasking).metrics), rows(a.metrics));
}

TEST_F(PretrainTest, BaselinePositionColumnsAreZero) {
  const PretrainResult r = run_pretraining(test::small_train(10), model(), stream(), PretrainMode::kBaseline);
  ASSERT_FALSE(r.metrics.empty());
  for (const auto& m : r.metrics) {
    EXPECT_EQ(m.pos_loss, 0.0);
    EXPECT_EQ(m.pos_accuracy, 0.0);
    EXPECT_EQ(m.total_loss, m.mlm_loss);
  }
  EXPECT_EQ(r.checkpoint.model_config.position_loss_weight, 0.0);
}

// lr = 0 at every step: the weights and the eval losses never move.
TEST_F(PretrainTest, ZeroLearningRateIsStationary) {
  const ModelConfig c = model();
  auto w = init_weights<float>(c, 5);
  auto params = w.parameters();
  auto buffers = make_momentum_buffers<float>(params);
  std::vector<MaskedBatch> eval;
  for (std::uint64_t s = 0; s < 3; ++s) eval.push_back(test::random_batch(c, 4, 12, 0.15, 0.1, 100 + s));
  const EvalResult before = evaluate(w, std::span<const MaskedBatch>(eval));
  for (std::uint64_t s = 0; s < 5; ++s) {
    const MaskedBatch batch = test::random_batch(c, 4, 12, 0.15, 0.1, s);
    Rng rng(s);
    ForwardContext ctx;
    ctx.training = true;
    ctx.rng = &rng;
    Tape<float> tape;
    tape.backward(pretrain_forward(tape, batch, w, ctx).total);
    sgd_step<float>(params, buffers, 0.0, 0.9);
  }
  const EvalResult after = evaluate(w, std::span<const MaskedBatch>(eval));
  EXPECT_EQ(before.total_loss, after.total_loss);
  EXPECT_EQ(before.mlm_accuracy, after.mlm_accuracy);
  EXPECT_EQ(before.pos_loss, after.pos_loss);
}

TEST_F(PretrainTest, RejectsBadInputs) {
  const TrainConfig t = test::small_train(5);
  const std::vector<std::int32_t> empty;
  EXPECT_THROW(run_pretraining(t, model(), empty, PretrainMode::kBaseline), DataError);
  const std::vector<std::int32_t> out_of_range = {5, 6, 100000};
  EXPECT_THROW(run_pretraining(t, model(), out_of_range, PretrainMode::kBaseline), DataError);
  const std::vector<std::int32_t> tiny(stream().begin(), stream().begin() + 40);
  EXPECT_THROW(run_pretraining(t, model(), tiny, PretrainMode::kBaseline), DataError);
  ModelConfig short_model = model();
  short_model.max_positions = 10;
  EXPECT_THROW(run_pretraining(t, short_model, stream(), PretrainMode::kBaseline), ConfigError);
}

TEST_F(PretrainTest, DivergenceKeepsPartialMetrics) {
  TrainConfig t = test::small_train(40);
  t.lr_peak = 1e6;
  t.warmup_steps = 10;
  t.eval_every = 1;
  std::vector<MetricsRecord> seen;
  PretrainOptions o;
  o.on_metrics = [&](const MetricsRecord& r) { seen.push_back(r); };
  try {
    run_pretraining(t, model(), stream(), PretrainMode::kPositionMasking, o);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(rows(e.metrics()), rows(seen));
    for (const auto& m : e.metrics()) EXPECT_TRUE(std::isfinite(m.total_loss));
  }
}

TEST_F(PretrainTest, ResumeMatchesUninterruptedRun) {
  const TrainConfig t = test::small_train(30);
  const PretrainResult full = run_pretraining(t, model(), stream(), PretrainMode::kPositionMasking);
  for (std::size_t k : {10u, 28u}) {
    PretrainOptions first;
    first.stop_after_step = k;
    const PretrainResult head = run_pretraining(t, model(), stream(), PretrainMode::kPositionMasking, first);
    EXPECT_EQ(head.checkpoint.global_step(), k);
    const Checkpoint restored = parse_checkpoint(serialize_checkpoint(head.checkpoint));
    PretrainOptions second;
    second.resume = &restored;
    const PretrainResult tail = run_pretraining(t, model(), stream(), PretrainMode::kPositionMasking, second);
    std::vector<MetricsRecord> joined = head.metrics;
    joined.insert(joined.end(), tail.metrics.begin(), tail.metrics.end());
    EXPECT_EQ(rows(joined), rows(full.metrics)) << "resume at " << k;
    EXPECT_EQ(serialize_checkpoint(tail.checkpoint), serialize_checkpoint(full.checkpoint));
  }
}

TEST_F(PretrainTest, PeriodicCheckpointCallback) {
  TrainConfig t = test::small_train(12);
  t.checkpoint_every = 4;
  std::vector<std::size_t> at;
  PretrainOptions o;
  o.on_checkpoint = [&](const Checkpoint& c) { at.push_back(c.global_step()); };
  run_pretraining(t, model(), stream(), PretrainMode::kPositionMasking, o);
  EXPECT_EQ(at, (std::vector<std::size_t>{4, 8, 12}));
}

class CheckpointTest : public PretrainTest {
 protected:
  static Checkpoint trained() {
    return run_pretraining(test::small_train(6), model(), stream(), PretrainMode::kPositionMasking).checkpoint;
  }
};

TEST_F(CheckpointTest, RoundTripIsBitwiseAndIdempotent) {
  test::TempDir dir("ckpt");
  const Checkpoint a = trained();
  save_checkpoint(dir.path() / "a.pmlm", a);
  Checkpoint b = load_checkpoint(dir.path() / "a.pmlm");
  save_checkpoint(dir.path() / "b.pmlm", b);
  EXPECT_EQ(file_bytes(dir.path() / "a.pmlm"), file_bytes(dir.path() / "b.pmlm"));
  EXPECT_EQ(b.phase1_steps_done, a.phase1_steps_done);
  EXPECT_EQ(b.tokens_seen, a.tokens_seen);
  EXPECT_EQ(b.mode, a.mode);
  ASSERT_EQ(b.momentum.size(), a.momentum.size());
  for (std::size_t i = 0; i < a.momentum.size(); ++i) EXPECT_TRUE(bitwise_equal(a.momentum[i], b.momentum[i]));

  Checkpoint a2 = a;
  const MaskedBatch probe = test::random_batch(a.model_config, 3, 12, 0.2, 0.2, 77);
  Tape<float> ta, tb;
  const auto oa = pretrain_forward(ta, probe, a2.weights, ForwardContext{});
  const auto ob = pretrain_forward(tb, probe, b.weights, ForwardContext{});
  EXPECT_TRUE(bitwise_equal(oa.sequence_output.value(), ob.sequence_output.value()));
  EXPECT_TRUE(bitwise_equal(oa.mlm_logits.value(), ob.mlm_logits.value()));
  EXPECT_TRUE(bitwise_equal(oa.pos_logits.value(), ob.pos_logits.value()));
}

TEST_F(CheckpointTest, DistinctLoadErrors) {
  using K = CheckpointError::Kind;
  const std::string good = serialize_checkpoint(trained());
  EXPECT_EQ(load_error_kind(good.substr(0, 3)), K::kTruncated);
  EXPECT_EQ(load_error_kind(good.substr(0, 12)), K::kTruncated);
  EXPECT_EQ(load_error_kind(good.substr(0, 40)), K::kTruncated);
  EXPECT_EQ(load_error_kind(good.substr(0, good.size() - 1)), K::kTruncated);
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(load_error_kind(bad_magic), K::kBadMagic);
  std::string bad_version = good;
  bad_version[4] = 2;
  EXPECT_EQ(load_error_kind(bad_version), K::kVersionMismatch);

  const Pieces p = split(good);
  EXPECT_EQ(load_error_kind(join(p.preamble, "{not json", p.payload)), K::kMalformedHeader);
  Json renamed = p.header;
  renamed["tensors"][0]["name"] = "bogus";
  EXPECT_EQ(load_error_kind(join(p.preamble, renamed.dump(), p.payload)), K::kManifestMismatch);
  Json resized = p.header;
  resized["tensors"][0]["length"] = resized["tensors"][0]["length"].get<std::uint64_t>() - 4;
  EXPECT_EQ(load_error_kind(join(p.preamble, resized.dump(), p.payload)), K::kManifestMismatch);
  EXPECT_EQ(load_error_kind(join(p.preamble, p.header.dump(), p.payload + "xxxx")), K::kManifestMismatch);
  EXPECT_NO_THROW(parse_checkpoint(join(p.preamble, p.header.dump(), p.payload)));

  test::TempDir dir("ckpt-missing");
  try {
    load_checkpoint(dir.path() / "none.pmlm");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), K::kIo);
  }
}
