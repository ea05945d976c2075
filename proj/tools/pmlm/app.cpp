#include "app.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "pmlm/checkpoint.hpp"
#include "pmlm/errors.hpp"
#include "pmlm/pretrain.hpp"

namespace pmlm::app {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex16(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
  return s;
}

std::optional<std::size_t> steps_to_threshold(std::span<const MetricsRecord> metrics, double fraction) {
  if (metrics.empty()) return std::nullopt;
  const double threshold = fraction * metrics.back().mlm_accuracy;
  for (const MetricsRecord& r : metrics) {
    if (r.mlm_accuracy >= threshold) return r.step;
  }
  return std::nullopt;
}

RunConfig load_config_with_overrides(const std::filesystem::path& config_path) {
  RunConfig c = load_run_config(config_path);
  const std::filesystem::path base = config_path.parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  if (const char* env = std::getenv("PMLM_OUT"); env != nullptr && *env != '\0') c.paths.out_dir = env;
  resolve(c.paths.corpus);
  resolve(c.paths.vocab);
  resolve(c.paths.out_dir);
  return c;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<MetricsRecord> read_metrics_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing metrics file " + path.string());
  try {
    return read_metrics_csv(in);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

namespace {

std::vector<double> parse_list(const std::string& text, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used != item.size() || item.empty()) throw ConfigError(flag + ": '" + item + "' is not a number");
    out.push_back(v);
  }
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App cli{"Masked-LM pretraining with position masking", "pmlm"};
  cli.require_subcommand(1);

  std::string config_path, mode = "position", resume, checkpoint, dropout_grad, pcts = "0.05,0.10,0.15";
  std::string size = "tiny", inject_bug, report_out = ".", corpus_out;
  std::vector<std::string> run_dirs;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> stop_after;
  std::optional<std::string> finetune_out;
  std::size_t seeds = 3, ft_seeds = 1, jobs = 1, documents = 4000;
  std::uint64_t corpus_seed = 0;

  auto* pre = cli.add_subcommand("pretrain", "Pretrain one run (baseline or position masking)");
  pre->add_option("config", config_path, "Run config JSON")->required();
  pre->add_option("--mode", mode, "baseline|position")->check(CLI::IsMember({"baseline", "position"}));
  pre->add_option("--seed", seed, "Overrides train.seed");
  pre->add_option("--resume", resume, "Continue from a checkpoint written by an earlier run");
  pre->add_option("--stop-after", stop_after, "Stop once this global step is reached");

  auto* ft = cli.add_subcommand("finetune", "Fine-tune a checkpoint on the span task");
  ft->add_option("config", config_path, "Run config JSON")->required();
  ft->add_option("--checkpoint", checkpoint, "Pretrained checkpoint")->required();
  ft->add_option("--dropout-grad", dropout_grad, "standard|straight-through|both")
      ->check(CLI::IsMember({"standard", "straight-through", "both"}));
  ft->add_option("--seed", seed, "Overrides finetune.seed (first seed)");
  ft->add_option("--seeds", ft_seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  ft->add_option("--out", finetune_out, "Output directory (default: out_dir/finetune-<hash>)");

  auto* sw = cli.add_subcommand("sweep", "Position-mask percentage sweep");
  sw->add_option("config", config_path, "Run config JSON")->required();
  sw->add_option("--pcts", pcts, "Comma-separated position_mask_pct values");
  sw->add_option("--seeds", seeds, "Seeds per point")->check(CLI::PositiveNumber);
  sw->add_option("--seed", seed, "First seed (default train.seed)");
  sw->add_option("--jobs", jobs, "Concurrent runs")->check(CLI::PositiveNumber);

  auto* gc = cli.add_subcommand("gradcheck", "Finite-difference check of every backward rule");
  gc->add_option("--size", size, "Model size")->check(CLI::IsMember({"tiny"}));
  gc->add_option("--inject-bug", inject_bug)->group("");

  auto* rep = cli.add_subcommand("report", "Compare runs and export curves");
  rep->add_option("runs", run_dirs, "Pretrain run directories (and optional finetune directories)")->required();
  rep->add_option("--out", report_out, "Output directory");

  auto* gen = cli.add_subcommand("gen-corpus", "Write the synthetic pretraining corpus");
  gen->add_option("out", corpus_out, "Output text file")->required();
  gen->add_option("--documents", documents, "Number of documents")->check(CLI::PositiveNumber);
  gen->add_option("--seed", corpus_seed, "Corpus seed");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    cli.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << cli.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << cli.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (*pre) {
      std::optional<std::filesystem::path> r;
      if (!resume.empty()) r = resume;
      return cmd_pretrain(config_path, mode, seed, r, stop_after, out);
    }
    if (*ft) {
      FinetuneRequest req;
      req.config = config_path;
      req.checkpoint = checkpoint;
      req.dropout_grad = dropout_grad;
      req.seed = seed;
      req.seeds = ft_seeds;
      if (finetune_out) req.out_dir = *finetune_out;
      return cmd_finetune(req, out);
    }
    if (*sw) {
      const std::vector<double> values = parse_list(pcts, "--pcts");
      return cmd_sweep(config_path, values, seeds, seed, jobs, out);
    }
    if (*gc) return cmd_gradcheck(size, inject_bug, out);
    if (*rep) {
      std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
      return cmd_report(dirs, report_out, out);
    }
    if (*gen) return cmd_gen_corpus(corpus_out, documents, corpus_seed, out);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << " (" << e.metrics().size() << " metric rows kept)\n";
    return kExitDivergence;
  } catch (const NonFiniteError& e) {
    err << "error: numerical divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace pmlm::app
