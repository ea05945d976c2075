#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pmlm/autograd.hpp"
#include "pmlm/errors.hpp"
#include "pmlm/masking.hpp"
#include "pmlm/model.hpp"

namespace pmlm {

struct PhaseConfig {
  std::size_t seq_len = 32;
  std::size_t batch_size = 16;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t total_steps = 2000;
  double phase1_fraction = 0.9;  // share of total_steps run at phase1.seq_len
  PhaseConfig phase1{32, 16};
  PhaseConfig phase2{64, 8};
  double lr_peak = 0.15;
  std::size_t warmup_steps = 200;
  double momentum = 0.9;
  MaskingConfig masking;
  std::size_t eval_every = 100;
  std::size_t eval_batches = 16;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  bool record_wall_time = false;     // wall_seconds column is 0 unless set

  std::size_t phase1_steps() const;
  std::size_t phase2_steps() const { return total_steps - phase1_steps(); }
  void validate() const;
};

enum class PretrainMode { kBaseline, kPositionMasking };

std::string_view to_string(PretrainMode mode);
PretrainMode parse_pretrain_mode(std::string_view text);

// Baseline disables position masking entirely (pct = 0, lambda = 0).
void apply_mode(PretrainMode mode, TrainConfig& train, ModelConfig& model);

// Linear warmup from 0 to lr_peak, then linear decay to 0 at total_steps.
double lr_at_step(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double lr_peak);

// v <- momentum*v + g; theta <- theta - lr*v; grads zeroed. Every gradient
// is checked for NaN/Inf before anything is modified.
template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, std::span<Tensor<T>> momentum_buffers, double lr,
              double momentum);

template <typename T>
std::vector<Tensor<T>> make_momentum_buffers(std::span<Parameter<T>* const> params);

struct MetricsRecord {
  std::size_t step = 0;
  int phase = 1;
  double lr = 0.0;
  double total_loss = 0.0;
  double mlm_loss = 0.0;
  double pos_loss = 0.0;
  double mlm_accuracy = 0.0;
  double pos_accuracy = 0.0;
  std::uint64_t tokens_seen = 0;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr std::string_view kMetricsHeader =
    "step,phase,lr,total_loss,mlm_loss,pos_loss,mlm_acc,pos_acc,tokens_seen,wall_seconds,seed";

// Shortest round-trip decimal representation.
std::string format_number(double value);

std::string metrics_csv_row(const MetricsRecord& r);
void write_metrics_csv(std::ostream& out, std::span<const MetricsRecord> records);
std::vector<MetricsRecord> read_metrics_csv(std::istream& in);

// Index of the largest entry in each row; ties go to the lowest index.
template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits);

struct EvalResult {
  double mlm_accuracy = 0.0;
  double pos_accuracy = 0.0;
  double mlm_loss = 0.0;
  double pos_loss = 0.0;
  double total_loss = 0.0;
  std::size_t mlm_slots = 0;
  std::size_t pos_slots = 0;
};

// Dropout off. Accuracy = fraction of masked slots whose argmax equals the
// label; position accuracy is 0 when there are no position slots. Losses
// are slot-weighted means.
template <typename T>
EvalResult evaluate(ModelWeights<T>& weights, std::span<const MaskedBatch> batches);

}  // namespace pmlm
