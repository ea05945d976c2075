#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "pmlm/autograd.hpp"
#include "pmlm/model.hpp"

namespace pmlm {

// [CLS] key length_token [SEP] body [SEP]; the answer is the span of
// length l that starts at the single occurrence of key in the body.
struct SpanExample {
  std::vector<std::int32_t> ids;
  std::size_t start = 0;  // absolute indices, inclusive
  std::size_t end = 0;
};

inline constexpr std::size_t kSpanBodyOffset = 4;
inline constexpr std::size_t kSpanMaxLength = 5;
inline constexpr std::int32_t kSpanLengthTokenBase = 5;  // ids 5..9 encode l = 1..5
inline constexpr std::int32_t kSpanFirstContentId = 10;

struct FinetuneConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double lr = 0.02;
  double momentum = 0.9;
  double warmup_fraction = 0.1;
  DropoutMode dropout_gradient_mode = DropoutMode::kStraightThrough;
  double attention_dropout = 0.1;  // replaces the checkpoint's rate while fine-tuning
  double hidden_dropout = 0.1;
  std::uint64_t seed = 0;
  std::size_t train_size = 2000;
  std::size_t dev_size = 500;
  std::size_t seq_len = 32;

  void validate() const;
};

struct SpanDataset {
  std::vector<SpanExample> train;
  std::vector<SpanExample> dev;
};

// Train and dev come from separate rng streams of config.seed.
SpanDataset generate_span_dataset(const FinetuneConfig& config, std::size_t vocab_size);

template <typename T>
struct SpanHeadWeights {
  Parameter<T> start_w;  // [H, 1]
  Parameter<T> start_b;  // [1]
  Parameter<T> end_w;
  Parameter<T> end_b;

  std::vector<Parameter<T>*> parameters() { return {&start_w, &start_b, &end_w, &end_b}; }
};

template <typename T>
SpanHeadWeights<T> init_span_head(std::size_t hidden, std::uint64_t seed);

template <typename T>
struct SpanLogits {
  Var<T> start;  // [B, S]
  Var<T> end;
};

// sequence_output is packed [B*S, H].
template <typename T>
SpanLogits<T> span_head_forward(Tape<T>& tape, Var<T> sequence_output, SpanHeadWeights<T>& head, std::size_t batch,
                                std::size_t seq);

// Mean of the start and end cross-entropies over a batch of examples.
template <typename T>
Var<T> span_loss(Tape<T>& tape, std::span<const SpanExample> examples, ModelWeights<T>& weights,
                 SpanHeadWeights<T>& head, const ForwardContext& ctx, SpanLogits<T>* logits_out = nullptr);

struct SpanScore {
  double em = 0.0;
  double f1 = 0.0;
};

// Spans are inclusive index ranges; a predicted start after its end is swapped.
SpanScore span_em_f1(std::size_t pred_start, std::size_t pred_end, std::size_t gold_start, std::size_t gold_end);

struct SpanPrediction {
  std::size_t example_id = 0;
  std::size_t gold_start = 0;
  std::size_t gold_end = 0;
  std::size_t pred_start = 0;
  std::size_t pred_end = 0;
  double em = 0.0;
  double f1 = 0.0;
};

struct SpanMetrics {
  double exact_match = 0.0;
  double f1 = 0.0;
  std::vector<SpanPrediction> predictions;
};

// Dropout off; predictions are argmax start/end logits, ties to the lowest index.
template <typename T>
SpanMetrics evaluate_span(ModelWeights<T>& weights, SpanHeadWeights<T>& head, std::span<const SpanExample> dev,
                          std::size_t batch_size = 32);

void write_predictions_csv(std::ostream& out, std::span<const SpanPrediction> predictions);

struct FinetuneEpoch {
  std::size_t epoch = 0;  // 0 is the pretrained model before any update
  double train_loss = 0.0;
  double exact_match = 0.0;
  double f1 = 0.0;
};

struct FinetuneResult {
  std::vector<FinetuneEpoch> epochs;
  ModelWeights<float> weights;
  SpanHeadWeights<float> head;
  std::vector<SpanPrediction> predictions;  // dev predictions after the last epoch
};

// Updates embeddings, encoder and span head. Attention-probability dropout
// uses config.dropout_gradient_mode in the backward pass; hidden dropout
// stays standard.
FinetuneResult run_finetune(const ModelWeights<float>& pretrained, const FinetuneConfig& config,
                            const SpanDataset& data);

struct ProbeResult {
  double standard_norm = 0.0;
  double straight_through_norm = 0.0;
  double ratio = 0.0;  // straight_through / standard
  std::size_t sites = 0;
};

// Mean over layers of the L2 norm of the loss gradient at each attention
// softmax output. Both modes see identical weights and dropout masks; no
// update is made.
ProbeResult probe_softmax_gradients(const ModelWeights<float>& weights, const SpanHeadWeights<float>& head,
                                    std::span<const SpanExample> batch, double attention_dropout,
                                    std::uint64_t seed);

}  // namespace pmlm
