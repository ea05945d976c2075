#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pmlm/autograd.hpp"
#include "pmlm/masking.hpp"
#include "pmlm/rng.hpp"

namespace pmlm {

struct ModelConfig {
  std::size_t vocab_size = 2000;
  std::size_t max_positions = 64;
  std::size_t hidden = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t ffn_size = 512;
  double attention_dropout = 0.1;
  double hidden_dropout = 0.1;
  std::int32_t mask_token_id = 4;
  double position_loss_weight = 1.0;

  // Reserved extra row of the position table standing for a masked position.
  std::size_t mask_position_id() const noexcept { return max_positions; }

  void validate() const;
};

inline constexpr double kLayerNormEps = 1e-12;
inline constexpr double kInitStddev = 0.02;

template <typename T>
struct EncoderLayerWeights {
  Parameter<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter<T> attn_norm_gain, attn_norm_bias;
  Parameter<T> w1, b1, w2, b2;
  Parameter<T> ffn_norm_gain, ffn_norm_bias;
};

// All learnable tensors. The MLM output projection is tied to
// token_embedding; the position head is a single dense layer.
template <typename T>
struct ModelWeights {
  ModelConfig config;
  Parameter<T> token_embedding;     // [V, H]
  Parameter<T> position_embedding;  // [P+1, H]
  Parameter<T> embed_norm_gain, embed_norm_bias;
  std::vector<EncoderLayerWeights<T>> layers;
  Parameter<T> mlm_transform_w, mlm_transform_b;
  Parameter<T> mlm_norm_gain, mlm_norm_bias;
  Parameter<T> mlm_output_bias;  // [V]
  Parameter<T> position_w;       // [H, P]
  Parameter<T> position_b;       // [P]

  // Stable order; names are unique dotted paths.
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;

  void zero_grad();

  template <typename U>
  ModelWeights<U> cast() const;
};

// Truncated-normal(0.02) matrices, zero biases, unit norm gains.
template <typename T>
ModelWeights<T> init_weights(const ModelConfig& config, std::uint64_t seed);

// Node ids of one attention layer's softmax output and the (possibly
// identical) dropout output that feeds the value mixing.
struct AttentionSite {
  NodeId softmax = 0;
  NodeId dropout = 0;
};

struct ForwardContext {
  bool training = false;
  DropoutMode attention_dropout_mode = DropoutMode::kStandard;
  Rng* rng = nullptr;                          // required when training with dropout
  std::vector<AttentionSite>* trace = nullptr;  // optional, filled per layer
};

// Hidden states are packed as [batch*seq, H] (row b*seq+s).
template <typename T>
Var<T> embed_forward(Tape<T>& tape, ModelWeights<T>& w, std::span<const std::int32_t> input_ids,
                     std::span<const std::int32_t> position_ids, std::size_t batch, std::size_t seq,
                     const ForwardContext& ctx);

template <typename T>
Var<T> encoder_forward(Tape<T>& tape, ModelWeights<T>& w, Var<T> hidden, std::size_t batch, std::size_t seq,
                       std::span<const std::size_t> valid_lengths, const ForwardContext& ctx);

// Packs the hidden rows of the given (batch, seq) slots, order preserved.
template <typename T>
Var<T> gather_slots(Var<T> sequence_output, std::span<const Slot> slots, std::size_t batch, std::size_t seq);

// dense + GELU + norm, then the tied embedding projection plus output bias.
template <typename T>
Var<T> mlm_head_forward(Tape<T>& tape, ModelWeights<T>& w, Var<T> packed);

// Single dense layer to max_positions classes.
template <typename T>
Var<T> position_head_forward(Tape<T>& tape, ModelWeights<T>& w, Var<T> packed);

template <typename T>
struct ForwardOutput {
  Var<T> sequence_output;  // [B*S, H]
  Var<T> mlm_logits;       // [M, V]
  Var<T> pos_logits;       // [Mp, P]; invalid when the batch has no position slots
  Var<T> mlm_loss;
  Var<T> pos_loss;
  Var<T> total;  // mlm + lambda * pos
};

template <typename T>
ForwardOutput<T> pretrain_forward(Tape<T>& tape, const MaskedBatch& batch, ModelWeights<T>& w,
                                  const ForwardContext& ctx);

}  // namespace pmlm
