#include <algorithm>
#include <fstream>
#include <future>
#include <map>
#include <ostream>
#include <sstream>

#include "app.hpp"
#include "pmlm/checkpoint.hpp"
#include "pmlm/corpus.hpp"
#include "pmlm/errors.hpp"
#include "pmlm/pretrain.hpp"
#include "pmlm/vocab.hpp"

namespace pmlm::app {

namespace {

struct LoadedCorpus {
  Vocab vocab;
  std::vector<std::int32_t> stream;
};

LoadedCorpus load_corpus(const RunConfig& c) {
  if (c.paths.corpus.empty()) throw ConfigError("'paths.corpus' is not set");
  if (!std::filesystem::exists(c.paths.corpus)) {
    throw ConfigError("'paths.corpus': file not found: " + c.paths.corpus);
  }
  const std::vector<std::string> lines = read_corpus(c.paths.corpus);
  LoadedCorpus out;
  if (!c.paths.vocab.empty() && std::filesystem::exists(c.paths.vocab)) {
    out.vocab = Vocab::load(c.paths.vocab);
  } else {
    out.vocab = Vocab::build(lines, c.model.vocab_size);
  }
  out.stream = encode_corpus(lines, out.vocab);
  return out;
}

std::string make_run_id(const RunConfig& c, PretrainMode mode, std::span<const std::int32_t> stream) {
  RunConfig keyed = c;
  keyed.train.seed = 0;
  keyed.paths = {};
  keyed.finetune = {};
  std::uint64_t h = fnv1a(to_json(keyed).dump());
  h = fnv1a(std::string_view(reinterpret_cast<const char*>(stream.data()), stream.size() * sizeof(std::int32_t)), h);
  return std::string(to_string(mode)) + "-s" + std::to_string(c.train.seed) + "-" + hex16(h).substr(0, 8);
}

std::string metrics_text(std::span<const MetricsRecord> records) {
  std::ostringstream ss;
  write_metrics_csv(ss, records);
  return ss.str();
}

}  // namespace

PretrainRun pretrain_to_dir(const PretrainRequest& request) {
  RunConfig cfg = request.config;
  const LoadedCorpus corpus = load_corpus(cfg);
  cfg.model.vocab_size = corpus.vocab.size();
  apply_mode(request.mode, cfg.train, cfg.model);

  PretrainRun run;
  run.run_id = make_run_id(cfg, request.mode, corpus.stream);
  run.dir = request.dir ? *request.dir : std::filesystem::path(cfg.paths.out_dir) / run.run_id;
  std::filesystem::create_directories(run.dir);

  std::optional<Checkpoint> resume;
  std::vector<MetricsRecord> earlier;
  if (request.resume) {
    resume = load_checkpoint(*request.resume);
    if (resume->mode != request.mode) {
      throw ConfigError("--resume: checkpoint was written in " + std::string(to_string(resume->mode)) + " mode");
    }
    if (to_json(resume->train_config).dump() != to_json(cfg.train).dump() ||
        to_json(resume->train_config.masking).dump() != to_json(cfg.train.masking).dump() ||
        to_json(resume->model_config).dump() != to_json(cfg.model).dump()) {
      throw ConfigError("--resume: checkpoint configuration differs from the run configuration");
    }
    const std::filesystem::path old = run.dir / "metrics.csv";
    if (std::filesystem::exists(old)) {
      for (const MetricsRecord& r : read_metrics_file(old)) {
        if (r.step <= resume->global_step()) earlier.push_back(r);
      }
    }
  }

  PretrainOptions opts;
  if (resume) opts.resume = &*resume;
  opts.stop_after_step = request.stop_after;
  const std::filesystem::path ckpt_dir = run.dir / "checkpoints";
  opts.on_checkpoint = [&](const Checkpoint& ck) {
    std::filesystem::create_directories(ckpt_dir);
    save_checkpoint(ckpt_dir / ("step" + std::to_string(ck.global_step()) + ".pmlm"), ck);
  };

  // The output location is left out so identical runs write identical files anywhere.
  RunConfig recorded = cfg;
  recorded.paths.out_dir.clear();
  Json meta = {{"run_id", run.run_id},
               {"mode", std::string(to_string(request.mode))},
               {"seed", cfg.train.seed},
               {"config", to_json(recorded)}};
  write_text_file(run.dir / "run.json", meta.dump(2) + "\n");
  corpus.vocab.save(run.dir / "vocab.txt");

  try {
    PretrainResult result = run_pretraining(cfg.train, cfg.model, corpus.stream, request.mode, opts);
    run.metrics = earlier;
    run.metrics.insert(run.metrics.end(), result.metrics.begin(), result.metrics.end());
    write_text_file(run.dir / "metrics.csv", metrics_text(run.metrics));
    if (request.write_checkpoint) save_checkpoint(run.dir / "checkpoint.pmlm", result.checkpoint);
  } catch (const DivergenceError& e) {
    std::vector<MetricsRecord> partial = earlier;
    partial.insert(partial.end(), e.metrics().begin(), e.metrics().end());
    write_text_file(run.dir / "metrics.csv", metrics_text(partial));
    throw;
  }
  return run;
}

int cmd_pretrain(const std::filesystem::path& config, std::string_view mode, std::optional<std::uint64_t> seed,
                 std::optional<std::filesystem::path> resume, std::optional<std::size_t> stop_after, std::ostream& out) {
  PretrainRequest req;
  req.config = load_config_with_overrides(config);
  if (seed) req.config.train.seed = *seed;
  req.mode = parse_pretrain_mode(mode);
  req.resume = std::move(resume);
  req.stop_after = stop_after;
  const PretrainRun run = pretrain_to_dir(req);
  out << "run " << run.run_id << " -> " << run.dir.string() << '\n';
  if (!run.metrics.empty()) {
    const MetricsRecord& last = run.metrics.back();
    out << "step " << last.step << " mlm_acc " << format_number(last.mlm_accuracy) << " pos_acc "
        << format_number(last.pos_accuracy) << " total_loss " << format_number(last.total_loss) << '\n';
  }
  return kExitOk;
}

int cmd_sweep(const std::filesystem::path& config, std::span<const double> pcts, std::size_t seeds,
              std::optional<std::uint64_t> seed, std::size_t jobs, std::ostream& out) {
  if (pcts.empty()) throw ConfigError("--pcts: at least one value is required");
  for (double p : pcts) {
    if (!(p > 0.0 && p <= 1.0)) throw ConfigError("--pcts: " + format_number(p) + " is outside (0,1]");
  }
  if (seeds == 0) throw ConfigError("--seeds must be positive");
  RunConfig base = load_config_with_overrides(config);
  if (seed) base.train.seed = *seed;
  const std::uint64_t first_seed = base.train.seed;

  RunConfig keyed = base;
  keyed.paths.out_dir.clear();
  std::string key = to_json(keyed).dump();
  for (double p : pcts) key += "," + format_number(p);
  key += "," + std::to_string(seeds);
  const std::filesystem::path sweep_dir =
      std::filesystem::path(base.paths.out_dir) / ("sweep-" + hex16(fnv1a(key)).substr(0, 8));

  struct Point {
    double pct;
    std::uint64_t seed;
  };
  std::vector<Point> points;
  for (double p : pcts) {
    for (std::size_t s = 0; s < seeds; ++s) points.push_back({p, first_seed + s});
  }

  auto run_point = [&](const Point& pt) {
    PretrainRequest req;
    req.config = base;
    req.config.train.seed = pt.seed;
    req.config.train.masking.position_mask_pct = pt.pct;
    req.mode = PretrainMode::kPositionMasking;
    req.dir = sweep_dir / ("pct" + format_number(pt.pct) + "-s" + std::to_string(pt.seed));
    req.write_checkpoint = false;
    return pretrain_to_dir(req).metrics;
  };

  // Points are independent; at most `jobs` run at once.
  std::vector<std::vector<MetricsRecord>> results(points.size());
  for (std::size_t first = 0; first < points.size(); first += jobs) {
    std::vector<std::future<std::vector<MetricsRecord>>> pending;
    const std::size_t last = std::min(points.size(), first + jobs);
    for (std::size_t i = first; i < last; ++i) {
      pending.push_back(std::async(jobs > 1 ? std::launch::async : std::launch::deferred, run_point, points[i]));
    }
    for (std::size_t i = first; i < last; ++i) results[i] = pending[i - first].get();
  }

  std::ostringstream csv;
  csv << "pct,seed,final_mlm_acc,final_pos_acc,final_total_loss,steps_to_threshold\n";
  std::map<double, std::pair<double, std::size_t>> pos_by_pct;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& m = results[i];
    const MetricsRecord last = m.empty() ? MetricsRecord{} : m.back();
    const auto stt = steps_to_threshold(m);
    csv << format_number(points[i].pct) << ',' << points[i].seed << ',' << format_number(last.mlm_accuracy) << ','
        << format_number(last.pos_accuracy) << ',' << format_number(last.total_loss) << ','
        << (stt ? std::to_string(*stt) : std::string()) << '\n';
    auto& acc = pos_by_pct[points[i].pct];
    acc.first += last.pos_accuracy;
    acc.second += 1;
  }
  write_text_file(sweep_dir / "sweep.csv", csv.str());

  out << "sweep -> " << (sweep_dir / "sweep.csv").string() << '\n';
  double previous = 0.0;
  bool have_previous = false;
  std::size_t violations = 0;
  for (const auto& [pct, acc] : pos_by_pct) {
    const double mean = acc.first / static_cast<double>(acc.second);
    out << "pct " << format_number(pct) << " mean_pos_acc " << format_number(mean) << '\n';
    if (have_previous && mean > previous) {
      ++violations;
      out << "note: mean position accuracy rises at pct " << format_number(pct) << '\n';
    }
    previous = mean;
    have_previous = true;
  }
  out << "monotonicity violations: " << violations << '\n';
  return kExitOk;
}

int cmd_gen_corpus(const std::filesystem::path& out_path, std::size_t documents, std::uint64_t seed,
                   std::ostream& out) {
  SyntheticCorpusConfig c;
  c.documents = documents;
  c.seed = seed;
  const std::vector<std::string> lines = synthetic_corpus(c);
  if (out_path.has_parent_path()) std::filesystem::create_directories(out_path.parent_path());
  write_corpus(out_path, lines);
  out << "wrote " << lines.size() << " documents to " << out_path.string() << '\n';
  return kExitOk;
}

}  // namespace pmlm::app
