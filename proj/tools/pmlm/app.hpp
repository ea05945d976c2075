#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pmlm/config_json.hpp"
#include "pmlm/training.hpp"

namespace pmlm::app {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDivergence = 3;

// Entry point shared by main() and the tests. args excludes argv[0].
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex16(std::uint64_t v);

// First eval step whose mlm accuracy reaches fraction * the final accuracy.
std::optional<std::size_t> steps_to_threshold(std::span<const MetricsRecord> metrics, double fraction = 0.9);

// Config file plus the overrides every command applies: PMLM_OUT replaces
// paths.out_dir, and relative paths resolve against the config's directory.
RunConfig load_config_with_overrides(const std::filesystem::path& config_path);

struct PretrainRun {
  std::filesystem::path dir;
  std::string run_id;
  std::vector<MetricsRecord> metrics;
};

struct PretrainRequest {
  RunConfig config;
  PretrainMode mode = PretrainMode::kPositionMasking;
  std::optional<std::filesystem::path> resume;
  std::optional<std::size_t> stop_after;
  std::optional<std::filesystem::path> dir;  // default: out_dir/<run-id>
  bool write_checkpoint = true;
};

// Trains one run and writes metrics.csv, run.json, vocab.txt and
// checkpoint.pmlm into the run directory.
PretrainRun pretrain_to_dir(const PretrainRequest& request);

std::vector<MetricsRecord> read_metrics_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

int cmd_pretrain(const std::filesystem::path& config, std::string_view mode, std::optional<std::uint64_t> seed,
                 std::optional<std::filesystem::path> resume, std::optional<std::size_t> stop_after, std::ostream& out);

struct FinetuneRequest {
  std::filesystem::path config;
  std::filesystem::path checkpoint;
  std::string dropout_grad;  // standard | straight-through | both; empty = config
  std::optional<std::uint64_t> seed;
  std::size_t seeds = 1;
  std::optional<std::filesystem::path> out_dir;
};
int cmd_finetune(const FinetuneRequest& request, std::ostream& out);

int cmd_sweep(const std::filesystem::path& config, std::span<const double> pcts, std::size_t seeds,
              std::optional<std::uint64_t> seed, std::size_t jobs, std::ostream& out);

int cmd_gradcheck(std::string_view size, std::string_view inject_bug, std::ostream& out);

int cmd_report(std::span<const std::filesystem::path> run_dirs, const std::filesystem::path& out_dir,
               std::ostream& out);

int cmd_gen_corpus(const std::filesystem::path& out_path, std::size_t documents, std::uint64_t seed,
                   std::ostream& out);

}  // namespace pmlm::app
