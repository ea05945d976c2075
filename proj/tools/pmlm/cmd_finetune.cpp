#include <ostream>
#include <sstream>

#include "app.hpp"
#include "pmlm/checkpoint.hpp"
#include "pmlm/errors.hpp"
#include "pmlm/finetune.hpp"

namespace pmlm::app {

namespace {

constexpr std::size_t kProbeBatch = 16;

std::string span_metrics_text(std::uint64_t seed, std::span<const FinetuneEpoch> epochs) {
  std::ostringstream ss;
  ss << "seed,epoch,train_loss,exact_match,f1\n";
  for (const FinetuneEpoch& e : epochs) {
    ss << seed << ',' << e.epoch << ',' << format_number(e.train_loss) << ',' << format_number(e.exact_match) << ','
       << format_number(e.f1) << '\n';
  }
  return ss.str();
}

}  // namespace

int cmd_finetune(const FinetuneRequest& request, std::ostream& out) {
  RunConfig cfg = load_config_with_overrides(request.config);
  if (request.seed) cfg.finetune.seed = *request.seed;
  if (request.seeds == 0) throw ConfigError("--seeds must be positive");

  std::vector<DropoutMode> modes;
  if (request.dropout_grad.empty()) {
    modes.push_back(cfg.finetune.dropout_gradient_mode);
  } else if (request.dropout_grad == "both") {
    modes = {DropoutMode::kStandard, DropoutMode::kStraightThrough};
  } else {
    modes.push_back(parse_dropout_mode(request.dropout_grad));
  }

  const Checkpoint ck = load_checkpoint(request.checkpoint);
  const std::string ckpt_bytes = read_text_file(request.checkpoint);
  std::uint64_t h = fnv1a(ckpt_bytes);
  FinetuneConfig keyed = cfg.finetune;
  keyed.dropout_gradient_mode = DropoutMode::kStandard;
  h = fnv1a(to_json(keyed).dump() + "," + std::to_string(request.seeds), h);
  const std::filesystem::path dir =
      request.out_dir ? *request.out_dir
                      : std::filesystem::path(cfg.paths.out_dir) / ("finetune-" + hex16(h).substr(0, 8));
  std::filesystem::create_directories(dir);

  std::ostringstream summary, probe;
  summary << "mode,seed,exact_match,f1,pre_finetune_exact_match,pre_finetune_f1\n";
  probe << "seed,attention_dropout,standard_norm,straight_through_norm,ratio,sites\n";
  for (std::size_t k = 0; k < request.seeds; ++k) {
    FinetuneConfig fc = cfg.finetune;
    fc.seed = cfg.finetune.seed + k;
    const SpanDataset data = generate_span_dataset(fc, ck.model_config.vocab_size);
    for (DropoutMode mode : modes) {
      fc.dropout_gradient_mode = mode;
      const FinetuneResult r = run_finetune(ck.weights, fc, data);
      const std::filesystem::path sub = dir / std::string(to_string(mode)) / ("s" + std::to_string(fc.seed));
      write_text_file(sub / "span_metrics.csv", span_metrics_text(fc.seed, r.epochs));
      std::ostringstream preds;
      write_predictions_csv(preds, r.predictions);
      write_text_file(sub / "predictions.csv", preds.str());
      summary << to_string(mode) << ',' << fc.seed << ',' << format_number(r.epochs.back().exact_match) << ','
              << format_number(r.epochs.back().f1) << ',' << format_number(r.epochs.front().exact_match) << ','
              << format_number(r.epochs.front().f1) << '\n';
      out << to_string(mode) << " seed " << fc.seed << " em " << format_number(r.epochs.back().exact_match) << " f1 "
          << format_number(r.epochs.back().f1) << '\n';
    }
    // Probe from the pretrained weights with a span head initialised as in fine-tuning.
    const SpanHeadWeights<float> head = init_span_head<float>(ck.model_config.hidden, fc.seed);
    const std::size_t n = std::min(kProbeBatch, data.dev.size());
    const ProbeResult p = probe_softmax_gradients(ck.weights, head, std::span<const SpanExample>(data.dev).first(n),
                                                  fc.attention_dropout, fc.seed);
    probe << fc.seed << ',' << format_number(fc.attention_dropout) << ',' << format_number(p.standard_norm) << ','
          << format_number(p.straight_through_norm) << ',' << format_number(p.ratio) << ',' << p.sites << '\n';
  }
  write_text_file(dir / "summary.csv", summary.str());
  write_text_file(dir / "probe.csv", probe.str());
  Json meta = {{"checkpoint", request.checkpoint.string()},
               {"pretrain_mode", std::string(to_string(ck.mode))},
               {"finetune", to_json(cfg.finetune)},
               {"seeds", request.seeds}};
  write_text_file(dir / "finetune.json", meta.dump(2) + "\n");
  out << "finetune -> " << dir.string() << '\n';
  return kExitOk;
}

}  // namespace pmlm::app
