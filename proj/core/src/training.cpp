#include "pmlm/training.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "pmlm/ops.hpp"
#include "pmlm/pretrain.hpp"

namespace pmlm {

std::size_t TrainConfig::phase1_steps() const {
  return static_cast<std::size_t>(std::llround(phase1_fraction * static_cast<double>(total_steps)));
}

void TrainConfig::validate() const {
  if (!(phase1_fraction >= 0.0 && phase1_fraction <= 1.0)) throw ConfigError("train.phase1_fraction must be in [0,1]");
  if (phase1.seq_len < 4 || phase2.seq_len < 4) throw ConfigError("train.phase*.seq_len must be at least 4");
  if (phase2.seq_len < phase1.seq_len) throw ConfigError("train.phase2.seq_len must be >= train.phase1.seq_len");
  if (phase1.batch_size == 0 || phase2.batch_size == 0) throw ConfigError("train.phase*.batch_size must be positive");
  if (!(lr_peak > 0.0)) throw ConfigError("train.lr_peak must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0,1)");
  if (eval_every == 0) throw ConfigError("train.eval_every must be positive");
  if (eval_batches == 0) throw ConfigError("train.eval_batches must be positive");
  masking.validate();
}

std::string_view to_string(PretrainMode mode) {
  return mode == PretrainMode::kBaseline ? "baseline" : "position";
}

PretrainMode parse_pretrain_mode(std::string_view text) {
  if (text == "baseline") return PretrainMode::kBaseline;
  if (text == "position") return PretrainMode::kPositionMasking;
  throw ConfigError("unknown pretraining mode '" + std::string(text) + "' (expected baseline|position)");
}

void apply_mode(PretrainMode mode, TrainConfig& train, ModelConfig& model) {
  if (mode == PretrainMode::kBaseline) {
    train.masking.position_mask_pct = 0.0;
    model.position_loss_weight = 0.0;
  }
}

double lr_at_step(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double lr_peak) {
  if (step > total_steps) throw UsageError("lr_at_step: step beyond total_steps");
  if (step < warmup_steps) return lr_peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return lr_peak;
  return lr_peak * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup_steps);
}

template <typename T>
std::vector<Tensor<T>> make_momentum_buffers(std::span<Parameter<T>* const> params) {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const Parameter<T>* p : params) out.emplace_back(p->value.shape());
  return out;
}

template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, std::span<Tensor<T>> momentum_buffers, double lr,
              double momentum) {
  if (params.size() != momentum_buffers.size()) throw UsageError("sgd_step: one momentum buffer per parameter");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (momentum_buffers[i].shape() != params[i]->value.shape()) {
      throw DimensionError("sgd_step: momentum buffer shape mismatch for " + params[i]->name);
    }
    if (!params[i]->grad.all_finite()) throw NonFiniteError("sgd_step", "gradient of " + params[i]->name);
  }
  const T lr_t = static_cast<T>(lr);
  const T mom = static_cast<T>(momentum);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    T* v = momentum_buffers[i].raw();
    T* theta = p.value.raw();
    T* g = p.grad.raw();
    for (std::size_t k = 0, n = p.value.size(); k < n; ++k) {
      v[k] = mom * v[k] + g[k];
      theta[k] -= lr_t * v[k];
      g[k] = T(0);
    }
  }
}

std::string format_number(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) throw UsageError("format_number failed");
  return std::string(buf, end);
}

std::string metrics_csv_row(const MetricsRecord& r) {
  std::string s;
  s += std::to_string(r.step) + ',' + std::to_string(r.phase) + ',' + format_number(r.lr) + ',';
  s += format_number(r.total_loss) + ',' + format_number(r.mlm_loss) + ',' + format_number(r.pos_loss) + ',';
  s += format_number(r.mlm_accuracy) + ',' + format_number(r.pos_accuracy) + ',';
  s += std::to_string(r.tokens_seen) + ',' + format_number(r.wall_seconds) + ',' + std::to_string(r.seed);
  return s;
}

void write_metrics_csv(std::ostream& out, std::span<const MetricsRecord> records) {
  out << kMetricsHeader << '\n';
  for (const MetricsRecord& r : records) out << metrics_csv_row(r) << '\n';
}

std::vector<MetricsRecord> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw DataError("metrics CSV has an unexpected header");
  std::vector<MetricsRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 11) throw DataError("metrics CSV line " + std::to_string(line_no) + " has " + std::to_string(f.size()) + " fields");
    try {
      MetricsRecord r;
      r.step = std::stoull(f[0]);
      r.phase = std::stoi(f[1]);
      r.lr = std::stod(f[2]);
      r.total_loss = std::stod(f[3]);
      r.mlm_loss = std::stod(f[4]);
      r.pos_loss = std::stod(f[5]);
      r.mlm_accuracy = std::stod(f[6]);
      r.pos_accuracy = std::stod(f[7]);
      r.tokens_seen = std::stoull(f[8]);
      r.wall_seconds = std::stod(f[9]);
      r.seed = std::stoull(f[10]);
      out.push_back(r);
    } catch (const std::logic_error&) {
      throw DataError("metrics CSV line " + std::to_string(line_no) + " is malformed");
    }
  }
  return out;
}

template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw DimensionError("argmax_rows expects a matrix");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<std::size_t> out(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = logits.raw() + r * cols;
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (row[c] > row[best]) best = c;
    }
    out[r] = best;
  }
  return out;
}

template <typename T>
EvalResult evaluate(ModelWeights<T>& weights, std::span<const MaskedBatch> batches) {
  EvalResult r;
  double mlm_loss = 0.0, pos_loss = 0.0;
  std::size_t mlm_hits = 0, pos_hits = 0;
  ForwardContext ctx;
  ctx.training = false;
  for (const MaskedBatch& batch : batches) {
    Tape<T> tape;
    ForwardOutput<T> out = pretrain_forward(tape, batch, weights, ctx);
    const auto mlm_pred = argmax_rows(out.mlm_logits.value());
    for (std::size_t i = 0; i < mlm_pred.size(); ++i) {
      if (static_cast<std::int32_t>(mlm_pred[i]) == batch.token_labels[i]) ++mlm_hits;
    }
    mlm_loss += static_cast<double>(out.mlm_loss.value().item()) * static_cast<double>(mlm_pred.size());
    r.mlm_slots += mlm_pred.size();
    if (out.pos_logits.valid()) {
      const auto pos_pred = argmax_rows(out.pos_logits.value());
      for (std::size_t i = 0; i < pos_pred.size(); ++i) {
        if (static_cast<std::int32_t>(pos_pred[i]) == batch.position_labels[i]) ++pos_hits;
      }
      pos_loss += static_cast<double>(out.pos_loss.value().item()) * static_cast<double>(pos_pred.size());
      r.pos_slots += pos_pred.size();
    }
  }
  if (r.mlm_slots > 0) {
    r.mlm_accuracy = static_cast<double>(mlm_hits) / static_cast<double>(r.mlm_slots);
    r.mlm_loss = mlm_loss / static_cast<double>(r.mlm_slots);
  }
  if (r.pos_slots > 0) {
    r.pos_accuracy = static_cast<double>(pos_hits) / static_cast<double>(r.pos_slots);
    r.pos_loss = pos_loss / static_cast<double>(r.pos_slots);
  }
  r.total_loss = r.mlm_loss + weights.config.position_loss_weight * r.pos_loss;
  return r;
}

namespace {

// Training and held-out examples for one phase plus the fixed eval batches.
struct PhaseData {
  std::vector<Example> train;
  std::vector<MaskedBatch> eval;
};

PhaseData build_phase(std::span<const std::int32_t> stream, const TrainConfig& train, const ModelConfig& model,
                      int phase) {
  const PhaseConfig& pc = phase == 1 ? train.phase1 : train.phase2;
  std::vector<Example> all = make_examples(stream, pc.seq_len);
  const std::size_t eval_count = train.eval_batches * pc.batch_size;
  if (all.size() <= eval_count) {
    throw DataError("corpus yields " + std::to_string(all.size()) + " examples at sequence length " +
                    std::to_string(pc.seq_len) + "; need more than " + std::to_string(eval_count) +
                    " (eval_batches * batch_size)");
  }
  PhaseData d;
  d.train.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(eval_count));
  for (std::size_t j = 0; j < train.eval_batches; ++j) {
    auto first = all.end() - static_cast<std::ptrdiff_t>(eval_count - j * pc.batch_size);
    std::span<const Example> chunk(&*first, pc.batch_size);
    const std::uint64_t seed = derive_seed(train.seed, "eval-mask", static_cast<std::uint64_t>(phase) * 1000 + j);
    d.eval.push_back(assemble_batch(chunk, train.masking, model.vocab_size, model.max_positions, seed));
  }
  return d;
}

// Example order: a fresh seeded permutation per epoch of the phase.
class DataOrder {
 public:
  DataOrder(std::uint64_t seed, int phase, std::size_t n) : seed_(seed), phase_(phase), n_(n) {}

  std::size_t at(std::size_t position) {
    const std::size_t epoch = position / n_;
    if (epoch != epoch_ || perm_.empty()) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      Rng rng(seed_, "data-order", static_cast<std::uint64_t>(phase_) * 1000000 + epoch);
      for (std::size_t i = n_; i > 1; --i) std::swap(perm_[i - 1], perm_[rng.below(i)]);
      epoch_ = epoch;
    }
    return perm_[position % n_];
  }

 private:
  std::uint64_t seed_;
  int phase_;
  std::size_t n_;
  std::size_t epoch_ = 0;
  std::vector<std::size_t> perm_;
};

}  // namespace

PretrainResult run_pretraining(const TrainConfig& train_in, const ModelConfig& model_in,
                               std::span<const std::int32_t> token_stream, PretrainMode mode,
                               const PretrainOptions& options) {
  TrainConfig train = train_in;
  ModelConfig model = model_in;
  apply_mode(mode, train, model);
  train.validate();
  model.validate();
  if (train.phase2.seq_len > model.max_positions) {
    throw ConfigError("train.phase2.seq_len exceeds model.max_positions");
  }
  if (token_stream.empty()) throw DataError("pretraining corpus is empty");
  for (std::int32_t id : token_stream) {
    if (id < 0 || static_cast<std::size_t>(id) >= model.vocab_size) {
      throw DataError("corpus token id " + std::to_string(id) + " outside model.vocab_size");
    }
  }

  PretrainResult result;
  Checkpoint& ck = result.checkpoint;
  if (options.resume != nullptr) {
    ck = *options.resume;
    if (ck.weights.config.vocab_size != model.vocab_size || ck.weights.config.hidden != model.hidden ||
        ck.weights.config.layers != model.layers || ck.weights.config.max_positions != model.max_positions) {
      throw ConfigError("resume checkpoint does not match the model configuration");
    }
  } else {
    ck.weights = init_weights<float>(model, derive_seed(train.seed, "weights-init"));
    auto params = ck.weights.parameters();
    ck.momentum = make_momentum_buffers<float>(params);
  }
  ck.model_config = model;
  ck.train_config = train;
  ck.mode = mode;
  ck.rng_seed = train.seed;
  ck.weights.config = model;

  const std::size_t total = train.total_steps;
  const std::size_t p1 = train.phase1_steps();
  auto params = ck.weights.parameters();
  const auto clock_start = std::chrono::steady_clock::now();

  std::optional<PhaseData> data;
  int data_phase = 0;
  std::optional<DataOrder> order;

  try {
    for (std::size_t g = ck.global_step(); g < total; ++g) {
      if (options.stop_after_step && g >= *options.stop_after_step) break;
      const int phase = g < p1 ? 1 : 2;
      const PhaseConfig& pc = phase == 1 ? train.phase1 : train.phase2;
      if (data_phase != phase) {
        data = build_phase(token_stream, train, model, phase);
        order.emplace(train.seed, phase, data->train.size());
        data_phase = phase;
      }
      const std::size_t local = phase == 1 ? g : g - p1;

      std::vector<Example> picked;
      picked.reserve(pc.batch_size);
      for (std::size_t i = 0; i < pc.batch_size; ++i) picked.push_back(data->train[order->at(local * pc.batch_size + i)]);
      const MaskedBatch batch = assemble_batch(picked, train.masking, model.vocab_size, model.max_positions,
                                               derive_seed(train.seed, "batch", g));

      Rng dropout_rng(train.seed, "dropout", g);
      ForwardContext ctx;
      ctx.training = true;
      ctx.rng = &dropout_rng;
      const double lr = lr_at_step(g + 1, total, train.warmup_steps, train.lr_peak);
      {
        Tape<float> tape;
        ForwardOutput<float> out = pretrain_forward(tape, batch, ck.weights, ctx);
        tape.backward(out.total);
      }
      sgd_step<float>(params, ck.momentum, lr, train.momentum);

      if (phase == 1) {
        ++ck.phase1_steps_done;
      } else {
        ++ck.phase2_steps_done;
      }
      ck.tokens_seen += static_cast<std::uint64_t>(pc.batch_size * pc.seq_len);

      const std::size_t done = g + 1;
      const bool phase_end = done == p1 || done == total;
      if (done % train.eval_every == 0 || phase_end) {
        const EvalResult ev = evaluate(ck.weights, std::span<const MaskedBatch>(data->eval));
        MetricsRecord rec;
        rec.step = done;
        rec.phase = phase;
        rec.lr = lr;
        rec.total_loss = ev.total_loss;
        rec.mlm_loss = ev.mlm_loss;
        rec.pos_loss = ev.pos_loss;
        rec.mlm_accuracy = ev.mlm_accuracy;
        rec.pos_accuracy = ev.pos_accuracy;
        rec.tokens_seen = ck.tokens_seen;
        rec.wall_seconds = train.record_wall_time
                               ? std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count()
                               : 0.0;
        rec.seed = train.seed;
        if (!std::isfinite(rec.total_loss)) throw NonFiniteError("evaluate", "total loss");
        result.metrics.push_back(rec);
        if (options.on_metrics) options.on_metrics(rec);
      }
      if (train.checkpoint_every > 0 && done % train.checkpoint_every == 0 && options.on_checkpoint) {
        options.on_checkpoint(ck);
      }
    }
  } catch (const NonFiniteError& e) {
    throw DivergenceError(std::string("training diverged: ") + e.what(), result.metrics);
  }
  return result;
}

#define PMLM_INSTANTIATE_TRAINING(T)                                                                        \
  template void sgd_step<T>(std::span<Parameter<T>* const>, std::span<Tensor<T>>, double, double);          \
  template std::vector<Tensor<T>> make_momentum_buffers<T>(std::span<Parameter<T>* const>);                 \
  template std::vector<std::size_t> argmax_rows<T>(const Tensor<T>&);                                       \
  template EvalResult evaluate<T>(ModelWeights<T>&, std::span<const MaskedBatch>);

PMLM_INSTANTIATE_TRAINING(float)
PMLM_INSTANTIATE_TRAINING(double)

#undef PMLM_INSTANTIATE_TRAINING

}  // namespace pmlm
