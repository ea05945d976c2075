#include "pmlm/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "pmlm/errors.hpp"
#include "pmlm/ops.hpp"
#include "pmlm/rng.hpp"
#include "pmlm/training.hpp"
#include "pmlm/vocab.hpp"

namespace pmlm {

void FinetuneConfig::validate() const {
  if (batch_size == 0) throw ConfigError("finetune.batch_size must be positive");
  if (train_size == 0) throw ConfigError("finetune.train_size must be positive");
  if (dev_size == 0) throw ConfigError("finetune.dev_size must be positive");
  if (!(lr >= 0.0)) throw ConfigError("finetune.lr must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("finetune.momentum must be in [0,1)");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("finetune.warmup_fraction must be in [0,1]");
  if (!(attention_dropout >= 0.0 && attention_dropout < 1.0)) throw ConfigError("finetune.attention_dropout must be in [0,1)");
  if (!(hidden_dropout >= 0.0 && hidden_dropout < 1.0)) throw ConfigError("finetune.hidden_dropout must be in [0,1)");
  if (seq_len < kSpanBodyOffset + kSpanMaxLength + 2) {
    throw ConfigError("finetune.seq_len must be at least " + std::to_string(kSpanBodyOffset + kSpanMaxLength + 2));
  }
}

namespace {

SpanExample make_span_example(std::size_t S, std::size_t vocab_size, Rng& rng) {
  SpanExample ex;
  const std::size_t len = 1 + static_cast<std::size_t>(rng.below(kSpanMaxLength));
  const auto key = static_cast<std::int32_t>(rng.range(kSpanFirstContentId, static_cast<std::uint64_t>(vocab_size)));
  // Valid starts are kSpanBodyOffset .. S-1-len so the span ends before the final [SEP].
  const std::size_t start = kSpanBodyOffset + static_cast<std::size_t>(rng.below(S - kSpanBodyOffset - len));
  ex.ids.assign(S, 0);
  ex.ids[0] = Vocab::kCls;
  ex.ids[1] = key;
  ex.ids[2] = kSpanLengthTokenBase + static_cast<std::int32_t>(len) - 1;
  ex.ids[3] = Vocab::kSep;
  for (std::size_t i = kSpanBodyOffset; i + 1 < S; ++i) {
    auto t = static_cast<std::int32_t>(rng.range(kSpanFirstContentId, static_cast<std::uint64_t>(vocab_size) - 1));
    if (t >= key) ++t;
    ex.ids[i] = t;
  }
  ex.ids[S - 1] = Vocab::kSep;
  ex.ids[start] = key;
  ex.start = start;
  ex.end = start + len - 1;
  return ex;
}

}  // namespace

SpanDataset generate_span_dataset(const FinetuneConfig& config, std::size_t vocab_size) {
  config.validate();
  if (vocab_size < static_cast<std::size_t>(kSpanFirstContentId) + 2) {
    throw ConfigError("span task needs a vocabulary of at least " + std::to_string(kSpanFirstContentId + 2) + " ids");
  }
  SpanDataset d;
  Rng train_rng(config.seed, "span-train");
  Rng dev_rng(config.seed, "span-dev");
  d.train.reserve(config.train_size);
  d.dev.reserve(config.dev_size);
  for (std::size_t i = 0; i < config.train_size; ++i) d.train.push_back(make_span_example(config.seq_len, vocab_size, train_rng));
  for (std::size_t i = 0; i < config.dev_size; ++i) d.dev.push_back(make_span_example(config.seq_len, vocab_size, dev_rng));
  return d;
}

template <typename T>
SpanHeadWeights<T> init_span_head(std::size_t hidden, std::uint64_t seed) {
  Rng rng(seed, "span-head-init");
  auto matrix = [&](const char* name) {
    Tensor<T> v({hidden, 1});
    for (T& x : v.data()) x = static_cast<T>(rng.truncated_normal(kInitStddev));
    return Parameter<T>(name, std::move(v));
  };
  SpanHeadWeights<T> h;
  h.start_w = matrix("span_head.start.w");
  h.start_b = Parameter<T>("span_head.start.b", Tensor<T>({1}));
  h.end_w = matrix("span_head.end.w");
  h.end_b = Parameter<T>("span_head.end.b", Tensor<T>({1}));
  return h;
}

template <typename T>
SpanLogits<T> span_head_forward(Tape<T>& tape, Var<T> sequence_output, SpanHeadWeights<T>& head, std::size_t batch,
                                std::size_t seq) {
  if (sequence_output.shape().size() != 2 || sequence_output.shape()[0] != batch * seq ||
      head.start_w.value.dim(0) != sequence_output.shape()[1]) {
    throw DimensionError("span_head_forward: sequence output has shape " + shape_string(sequence_output.shape()));
  }
  SpanLogits<T> out;
  out.start = reshape(add_row_bias(matmul(sequence_output, tape.param(head.start_w)), tape.param(head.start_b)),
                      Shape{batch, seq});
  out.end = reshape(add_row_bias(matmul(sequence_output, tape.param(head.end_w)), tape.param(head.end_b)),
                    Shape{batch, seq});
  return out;
}

template <typename T>
Var<T> span_loss(Tape<T>& tape, std::span<const SpanExample> examples, ModelWeights<T>& weights,
                 SpanHeadWeights<T>& head, const ForwardContext& ctx, SpanLogits<T>* logits_out) {
  if (examples.empty()) throw UsageError("span_loss: empty batch");
  const std::size_t B = examples.size(), S = examples[0].ids.size();
  if (S > weights.config.max_positions) {
    throw ConfigError("finetune.seq_len " + std::to_string(S) + " exceeds the checkpoint's model.max_positions " +
                      std::to_string(weights.config.max_positions));
  }
  std::vector<std::int32_t> ids, positions;
  std::vector<std::size_t> valid(B, S);
  std::vector<std::int64_t> starts(B), ends(B);
  ids.reserve(B * S);
  positions.reserve(B * S);
  for (std::size_t b = 0; b < B; ++b) {
    if (examples[b].ids.size() != S) throw DimensionError("span_loss: examples differ in length");
    ids.insert(ids.end(), examples[b].ids.begin(), examples[b].ids.end());
    for (std::size_t s = 0; s < S; ++s) positions.push_back(static_cast<std::int32_t>(s));
    starts[b] = static_cast<std::int64_t>(examples[b].start);
    ends[b] = static_cast<std::int64_t>(examples[b].end);
  }
  Var<T> h = embed_forward(tape, weights, ids, positions, B, S, ctx);
  h = encoder_forward(tape, weights, h, B, S, valid, ctx);
  SpanLogits<T> logits = span_head_forward(tape, h, head, B, S);
  if (logits_out != nullptr) *logits_out = logits;
  Var<T> ls = cross_entropy_mean(logits.start, std::span<const std::int64_t>(starts));
  Var<T> le = cross_entropy_mean(logits.end, std::span<const std::int64_t>(ends));
  return scale(add(ls, le), T(0.5));
}

SpanScore span_em_f1(std::size_t pred_start, std::size_t pred_end, std::size_t gold_start, std::size_t gold_end) {
  if (pred_start > pred_end) std::swap(pred_start, pred_end);
  if (gold_start > gold_end) std::swap(gold_start, gold_end);
  SpanScore s;
  s.em = (pred_start == gold_start && pred_end == gold_end) ? 1.0 : 0.0;
  const std::size_t lo = std::max(pred_start, gold_start), hi = std::min(pred_end, gold_end);
  if (lo > hi) return s;
  const double overlap = static_cast<double>(hi - lo + 1);
  const double precision = overlap / static_cast<double>(pred_end - pred_start + 1);
  const double recall = overlap / static_cast<double>(gold_end - gold_start + 1);
  s.f1 = 2.0 * precision * recall / (precision + recall);
  return s;
}

template <typename T>
SpanMetrics evaluate_span(ModelWeights<T>& weights, SpanHeadWeights<T>& head, std::span<const SpanExample> dev,
                          std::size_t batch_size) {
  if (batch_size == 0) throw UsageError("evaluate_span: batch_size must be positive");
  SpanMetrics m;
  ForwardContext ctx;
  ctx.training = false;
  for (std::size_t first = 0; first < dev.size(); first += batch_size) {
    const std::size_t n = std::min(batch_size, dev.size() - first);
    std::span<const SpanExample> chunk = dev.subspan(first, n);
    Tape<T> tape;
    SpanLogits<T> logits;
    span_loss(tape, chunk, weights, head, ctx, &logits);
    const auto starts = argmax_rows(logits.start.value());
    const auto ends = argmax_rows(logits.end.value());
    for (std::size_t i = 0; i < n; ++i) {
      SpanPrediction p;
      p.example_id = first + i;
      p.gold_start = chunk[i].start;
      p.gold_end = chunk[i].end;
      p.pred_start = std::min(starts[i], ends[i]);
      p.pred_end = std::max(starts[i], ends[i]);
      const SpanScore sc = span_em_f1(p.pred_start, p.pred_end, p.gold_start, p.gold_end);
      p.em = sc.em;
      p.f1 = sc.f1;
      m.exact_match += sc.em;
      m.f1 += sc.f1;
      m.predictions.push_back(p);
    }
  }
  if (!dev.empty()) {
    m.exact_match /= static_cast<double>(dev.size());
    m.f1 /= static_cast<double>(dev.size());
  }
  return m;
}

void write_predictions_csv(std::ostream& out, std::span<const SpanPrediction> predictions) {
  out << "example_id,gold_start,gold_end,pred_start,pred_end,em,f1\n";
  for (const SpanPrediction& p : predictions) {
    out << p.example_id << ',' << p.gold_start << ',' << p.gold_end << ',' << p.pred_start << ',' << p.pred_end
        << ',' << format_number(p.em) << ',' << format_number(p.f1) << '\n';
  }
}

namespace {

ModelWeights<float> finetune_copy(const ModelWeights<float>& pretrained, const FinetuneConfig& config) {
  ModelWeights<float> w = pretrained;
  w.config.attention_dropout = config.attention_dropout;
  w.config.hidden_dropout = config.hidden_dropout;
  if (config.seq_len > w.config.max_positions) {
    throw ConfigError("finetune.seq_len " + std::to_string(config.seq_len) +
                      " exceeds the checkpoint's model.max_positions " + std::to_string(w.config.max_positions));
  }
  return w;
}

}  // namespace

FinetuneResult run_finetune(const ModelWeights<float>& pretrained, const FinetuneConfig& config,
                            const SpanDataset& data) {
  config.validate();
  if (data.train.empty() || data.dev.empty()) throw DataError("span dataset is empty");
  FinetuneResult r;
  r.weights = finetune_copy(pretrained, config);
  r.head = init_span_head<float>(r.weights.config.hidden, config.seed);

  std::vector<Parameter<float>*> params;
  for (Parameter<float>* p : r.weights.parameters()) {
    if (p->name.starts_with("embeddings.") || p->name.starts_with("encoder.")) params.push_back(p);
  }
  for (Parameter<float>* p : r.head.parameters()) params.push_back(p);
  std::vector<Tensor<float>> momentum = make_momentum_buffers<float>(params);

  const std::size_t n = data.train.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total = per_epoch * config.epochs;
  const auto warmup = static_cast<std::size_t>(std::llround(config.warmup_fraction * static_cast<double>(total)));

  auto record = [&](std::size_t epoch, double loss) {
    SpanMetrics m = evaluate_span(r.weights, r.head, std::span<const SpanExample>(data.dev));
    r.epochs.push_back({epoch, loss, m.exact_match, m.f1});
    r.predictions = std::move(m.predictions);
  };
  record(0, 0.0);

  std::size_t step = 0;
  std::vector<std::size_t> order(n);
  std::vector<SpanExample> batch;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng order_rng(config.seed, "finetune-order", epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    double loss_sum = 0.0;
    for (std::size_t first = 0; first < n; first += config.batch_size) {
      batch.clear();
      for (std::size_t i = first; i < std::min(n, first + config.batch_size); ++i) batch.push_back(data.train[order[i]]);
      Rng dropout(config.seed, "finetune-dropout", step);
      ForwardContext ctx;
      ctx.training = true;
      ctx.attention_dropout_mode = config.dropout_gradient_mode;
      ctx.rng = &dropout;
      {
        Tape<float> tape;
        Var<float> loss = span_loss(tape, std::span<const SpanExample>(batch), r.weights, r.head, ctx);
        loss_sum += static_cast<double>(loss.value().item());
        tape.backward(loss);
      }
      ++step;
      sgd_step<float>(params, momentum, lr_at_step(step, total, warmup, config.lr), config.momentum);
    }
    record(epoch, loss_sum / static_cast<double>(per_epoch));
  }
  return r;
}

ProbeResult probe_softmax_gradients(const ModelWeights<float>& weights, const SpanHeadWeights<float>& head,
                                    std::span<const SpanExample> batch, double attention_dropout,
                                    std::uint64_t seed) {
  if (!(attention_dropout >= 0.0 && attention_dropout < 1.0)) throw ConfigError("probe attention_dropout must be in [0,1)");
  ProbeResult r;
  auto measure = [&](DropoutMode mode) {
    ModelWeights<float> w = weights;
    SpanHeadWeights<float> h = head;
    w.config.attention_dropout = attention_dropout;
    w.config.hidden_dropout = 0.0;
    Rng dropout(seed, "probe-dropout");
    std::vector<AttentionSite> trace;
    ForwardContext ctx;
    ctx.training = true;
    ctx.attention_dropout_mode = mode;
    ctx.rng = &dropout;
    ctx.trace = &trace;
    Tape<float> tape;
    Var<float> loss = span_loss(tape, batch, w, h, ctx);
    tape.backward(loss);
    double total = 0.0;
    for (const AttentionSite& site : trace) {
      const Tensor<float> g = tape.grad(Var<float>(&tape, site.softmax));
      double sq = 0.0;
      for (float v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
      total += std::sqrt(sq);
    }
    r.sites = trace.size();
    return trace.empty() ? 0.0 : total / static_cast<double>(trace.size());
  };
  r.standard_norm = measure(DropoutMode::kStandard);
  r.straight_through_norm = measure(DropoutMode::kStraightThrough);
  r.ratio = r.standard_norm > 0.0 ? r.straight_through_norm / r.standard_norm : 0.0;
  return r;
}

#define PMLM_INSTANTIATE_FINETUNE(T)                                                                              \
  template SpanHeadWeights<T> init_span_head<T>(std::size_t, std::uint64_t);                                      \
  template SpanLogits<T> span_head_forward<T>(Tape<T>&, Var<T>, SpanHeadWeights<T>&, std::size_t, std::size_t);   \
  template Var<T> span_loss<T>(Tape<T>&, std::span<const SpanExample>, ModelWeights<T>&, SpanHeadWeights<T>&,      \
                               const ForwardContext&, SpanLogits<T>*);                                            \
  template SpanMetrics evaluate_span<T>(ModelWeights<T>&, SpanHeadWeights<T>&, std::span<const SpanExample>,       \
                                        std::size_t);

PMLM_INSTANTIATE_FINETUNE(float)
PMLM_INSTANTIATE_FINETUNE(double)

#undef PMLM_INSTANTIATE_FINETUNE

}  // namespace pmlm
