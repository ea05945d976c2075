#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "app.hpp"
#include "pmlm/config_json.hpp"
#include "pmlm/errors.hpp"
#include "test_support.hpp"

using namespace pmlm;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = app::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> csv_lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

// A config small enough for a few-second CLI round trip.
RunConfig small_run_config(const fs::path& corpus, const fs::path& out_dir) {
  RunConfig rc;
  rc.model = test::small_model(500);
  rc.train = test::small_train(12);
  rc.finetune.train_size = 32;
  rc.finetune.dev_size = 16;
  rc.finetune.seq_len = 16;
  rc.finetune.batch_size = 8;
  rc.finetune.epochs = 1;
  rc.paths.corpus = corpus.string();
  rc.paths.out_dir = out_dir.string();
  return rc;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::make_unique<test::TempDir>(::testing::UnitTest::GetInstance()->current_test_info()->name());
    corpus_ = dir_->path() / "corpus.txt";
    ASSERT_EQ(cli({"gen-corpus", corpus_.string(), "--documents", "60"}).code, app::kExitOk);
    config_ = dir_->path() / "run.json";
    write_config(small_run_config(corpus_, dir_->path() / "runs"));
  }
  void write_config(const RunConfig& rc) { app::write_text_file(config_, to_json(rc).dump(2)); }
  fs::path root() const { return dir_->path(); }

  std::unique_ptr<test::TempDir> dir_;
  fs::path corpus_, config_;
};

}  // namespace

TEST(ConfigJson, RoundTripPreservesEveryField) {
  RunConfig rc;
  rc.model.hidden = 32;
  rc.model.position_loss_weight = 0.25;
  rc.train.phase2 = {48, 4};
  rc.train.masking.position_split = {0.7, 0.2, 0.1};
  rc.train.masking.alignment = SlotAlignment::kSameSlots;
  rc.finetune.dropout_gradient_mode = DropoutMode::kStandard;
  rc.paths.corpus = "c.txt";
  const Json j = to_json(rc);
  const RunConfig back = run_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.train.masking.alignment, SlotAlignment::kSameSlots);
  EXPECT_EQ(back.train.phase2.seq_len, 48u);
}

TEST(ConfigJson, PartialObjectsKeepDefaults) {
  const RunConfig rc = run_config_from_json(Json::parse(R"({"train": {"seed": 7}})"));
  EXPECT_EQ(rc.train.seed, 7u);
  EXPECT_EQ(rc.train.total_steps, TrainConfig{}.total_steps);
  EXPECT_EQ(rc.model.hidden, ModelConfig{}.hidden);
}

TEST(ConfigJson, UnknownKeysAndWrongTypesNameTheKey) {
  auto message = [](const char* text) {
    try {
      run_config_from_json(Json::parse(text));
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message(R"({"train": {"phase1": {"seqlen": 4}}})").find("train.phase1.seqlen"), std::string::npos);
  EXPECT_NE(message(R"({"model": {"hidden": "big"}})").find("model.hidden"), std::string::npos);
  EXPECT_NE(message(R"({"masking": {"token_split": {"mask": true}}})").find("masking.token_split.mask"),
            std::string::npos);
  EXPECT_NE(message(R"({"extra": 1})").find("extra"), std::string::npos);
  EXPECT_THROW(parse_json_text("{", "x.json"), ConfigError);
}

TEST_F(CliTest, OutDirOverrideAndRelativePaths) {
  RunConfig rc = small_run_config("corpus.txt", "runs");
  write_config(rc);
  const RunConfig loaded = app::load_config_with_overrides(config_);
  EXPECT_EQ(fs::path(loaded.paths.corpus), root() / "corpus.txt");
  EXPECT_EQ(fs::path(loaded.paths.out_dir), root() / "runs");
  ::setenv("PMLM_OUT", (root() / "elsewhere").c_str(), 1);
  const RunConfig overridden = app::load_config_with_overrides(config_);
  ::unsetenv("PMLM_OUT");
  EXPECT_EQ(fs::path(overridden.paths.out_dir), root() / "elsewhere");
}

TEST_F(CliTest, MissingCorpusIsAConfigError) {
  RunConfig rc = small_run_config("", root() / "runs");
  write_config(rc);
  const CliResult r = cli({"pretrain", config_.string()});
  EXPECT_EQ(r.code, app::kExitConfig);
  EXPECT_NE(r.err.find("paths.corpus"), std::string::npos) << r.err;
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(cli({}).code, app::kExitConfig);
  EXPECT_EQ(cli({"pretrain"}).code, app::kExitConfig);
  EXPECT_EQ(cli({"pretrain", config_.string(), "--mode", "other"}).code, app::kExitConfig);
  EXPECT_EQ(cli({"sweep", config_.string(), "--pcts", "0.1,abc"}).code, app::kExitConfig);
  EXPECT_EQ(cli({"pretrain", (root() / "absent.json").string()}).code, app::kExitConfig);
}

TEST_F(CliTest, BadCheckpointMagicExitsTwo) {
  app::write_text_file(root() / "bad.pmlm", "NOPE and then some bytes");
  const CliResult r = cli({"finetune", config_.string(), "--checkpoint", (root() / "bad.pmlm").string()});
  EXPECT_EQ(r.code, app::kExitConfig);
  EXPECT_NE(r.err.find("magic"), std::string::npos) << r.err;
}

TEST(Cli, GradcheckPassesAndDetectsInjectedBug) {
  const CliResult ok = cli({"gradcheck", "--size", "tiny"});
  EXPECT_EQ(ok.code, app::kExitOk) << ok.out;
  EXPECT_NE(ok.out.find("gradcheck passed"), std::string::npos);
  const CliResult bad = cli({"gradcheck", "--inject-bug", "gelu"});
  EXPECT_NE(bad.code, app::kExitOk);
  EXPECT_NE(bad.out.find("gradcheck FAILED"), std::string::npos);
}

TEST_F(CliTest, PretrainRerunIsByteIdenticalAndBaselineHasZeroPositionColumns) {
  const CliResult a = cli({"pretrain", config_.string(), "--mode", "baseline"});
  ASSERT_EQ(a.code, app::kExitOk) << a.err;
  std::vector<fs::path> runs;
  for (const auto& e : fs::directory_iterator(root() / "runs")) runs.push_back(e.path());
  ASSERT_EQ(runs.size(), 1u);
  const std::string metrics = app::read_text_file(runs[0] / "metrics.csv");
  const std::string ckpt = app::read_text_file(runs[0] / "checkpoint.pmlm");
  ASSERT_EQ(cli({"pretrain", config_.string(), "--mode", "baseline"}).code, app::kExitOk);
  EXPECT_EQ(app::read_text_file(runs[0] / "metrics.csv"), metrics);
  EXPECT_EQ(app::read_text_file(runs[0] / "checkpoint.pmlm"), ckpt);
  for (const MetricsRecord& m : app::read_metrics_file(runs[0] / "metrics.csv")) {
    EXPECT_EQ(m.pos_loss, 0.0);
    EXPECT_EQ(m.pos_accuracy, 0.0);
  }
}

TEST_F(CliTest, RunFilesDoNotDependOnOutputLocation) {
  auto run_files = [&](const std::string& out) {
    ::setenv("PMLM_OUT", (root() / out).c_str(), 1);
    const CliResult r = cli({"sweep", config_.string(), "--pcts", "0.1", "--seeds", "1"});
    ::unsetenv("PMLM_OUT");
    EXPECT_EQ(r.code, app::kExitOk) << r.err;
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root() / out)) {
      if (e.is_regular_file()) files[fs::relative(e.path(), root() / out).string()] = app::read_text_file(e.path());
    }
    return files;
  };
  const auto a = run_files("out-a");
  const auto b = run_files("out-b");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, b);
}

TEST_F(CliTest, ResumeThroughTheCli) {
  ASSERT_EQ(cli({"pretrain", config_.string()}).code, app::kExitOk);
  fs::path full;
  for (const auto& e : fs::directory_iterator(root() / "runs")) full = e.path();
  const std::string reference = app::read_text_file(full / "metrics.csv");

  RunConfig rc = small_run_config(corpus_, root() / "runs2");
  rc.train.checkpoint_every = 6;
  write_config(rc);
  ASSERT_EQ(cli({"pretrain", config_.string(), "--stop-after", "6"}).code, app::kExitOk);
  fs::path partial;
  for (const auto& e : fs::directory_iterator(root() / "runs2")) partial = e.path();
  ASSERT_TRUE(fs::exists(partial / "checkpoints" / "step6.pmlm"));
  const CliResult r = cli({"pretrain", config_.string(), "--resume", (partial / "checkpoints" / "step6.pmlm").string()});
  ASSERT_EQ(r.code, app::kExitOk) << r.err;
  EXPECT_EQ(app::read_text_file(partial / "metrics.csv"), reference);
}

TEST_F(CliTest, DivergenceExitsThree) {
  RunConfig rc = small_run_config(corpus_, root() / "runs");
  rc.train.lr_peak = 1e6;
  rc.train.eval_every = 1;
  write_config(rc);
  const CliResult r = cli({"pretrain", config_.string()});
  EXPECT_EQ(r.code, app::kExitDivergence) << r.err;
}

// Independent scan of the two metrics files: the signed gap at the last
// shared step, baseline minus position.
TEST_F(CliTest, ReportComparisonMatchesDirectScan) {
  ASSERT_EQ(cli({"pretrain", config_.string(), "--mode", "baseline"}).code, app::kExitOk);
  ASSERT_EQ(cli({"pretrain", config_.string(), "--mode", "position"}).code, app::kExitOk);
  std::vector<std::string> dirs = {"report"};
  fs::path base, pos;
  for (const auto& e : fs::directory_iterator(root() / "runs")) {
    (e.path().filename().string().starts_with("baseline") ? base : pos) = e.path();
  }
  const CliResult r = cli({"report", base.string(), pos.string(), "--out", (root() / "report").string()});
  ASSERT_EQ(r.code, app::kExitOk) << r.err;
  const auto bm = app::read_metrics_file(base / "metrics.csv");
  const auto pm = app::read_metrics_file(pos / "metrics.csv");
  const auto lines = csv_lines(root() / "report" / "comparison.csv");
  ASSERT_EQ(lines.size(), 2u);
  std::vector<std::string> f;
  std::stringstream ss(lines[1]);
  for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
  ASSERT_EQ(f.size(), 12u);
  EXPECT_EQ(std::stoul(f[3]), bm.back().step);
  EXPECT_EQ(std::stod(f[6]), bm.back().mlm_accuracy - pm.back().mlm_accuracy);
  EXPECT_TRUE(fs::exists(root() / "report" / "curves.csv"));
  EXPECT_TRUE(fs::exists(root() / "report" / "table.txt"));

  const CliResult missing = cli({"report", (root() / "nowhere").string(), "--out", (root() / "r2").string()});
  EXPECT_EQ(missing.code, app::kExitConfig);
  EXPECT_NE(missing.err.find("metrics"), std::string::npos);
}

TEST_F(CliTest, SweepSinglePoint) {
  const CliResult r = cli({"sweep", config_.string(), "--pcts", "0.1", "--seeds", "1"});
  ASSERT_EQ(r.code, app::kExitOk) << r.err;
  fs::path sweep;
  for (const auto& e : fs::directory_iterator(root() / "runs")) sweep = e.path();
  const auto lines = csv_lines(sweep / "sweep.csv");
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0], "pct,seed,final_mlm_acc,final_pos_acc,final_total_loss,steps_to_threshold");
}

TEST_F(CliTest, FinetuneWritesSummaryAndProbe) {
  ASSERT_EQ(cli({"pretrain", config_.string()}).code, app::kExitOk);
  fs::path run;
  for (const auto& e : fs::directory_iterator(root() / "runs")) run = e.path();
  const fs::path out = root() / "ft";
  const CliResult r = cli({"finetune", config_.string(), "--checkpoint", (run / "checkpoint.pmlm").string(),
                           "--dropout-grad", "both", "--seeds", "2", "--out", out.string()});
  ASSERT_EQ(r.code, app::kExitOk) << r.err;
  EXPECT_EQ(csv_lines(out / "summary.csv").size(), 5u);
  EXPECT_EQ(csv_lines(out / "probe.csv").size(), 3u);
  EXPECT_TRUE(fs::exists(out / "straight_through" / "s0" / "predictions.csv") ||
              fs::exists(out / "straight-through" / "s0" / "predictions.csv"));
}
