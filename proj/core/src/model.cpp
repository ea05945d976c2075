#include "pmlm/model.hpp"

#include <cmath>
#include <string>

#include "pmlm/errors.hpp"
#include "pmlm/ops.hpp"

namespace pmlm {

void ModelConfig::validate() const {
  if (vocab_size <= 5) throw ConfigError("model.vocab_size must exceed the 5 reserved tokens");
  if (max_positions < 4) throw ConfigError("model.max_positions must be at least 4");
  if (hidden == 0 || heads == 0 || hidden % heads != 0) {
    throw ConfigError("model.hidden (" + std::to_string(hidden) + ") must be divisible by model.heads (" +
                      std::to_string(heads) + ")");
  }
  if (ffn_size == 0) throw ConfigError("model.ffn_size must be positive");
  if (mask_token_id < 0 || static_cast<std::size_t>(mask_token_id) >= vocab_size) {
    throw ConfigError("model.mask_token_id must be < vocab_size");
  }
  if (!(attention_dropout >= 0.0 && attention_dropout < 1.0)) throw ConfigError("model.attention_dropout must be in [0,1)");
  if (!(hidden_dropout >= 0.0 && hidden_dropout < 1.0)) throw ConfigError("model.hidden_dropout must be in [0,1)");
  if (!(position_loss_weight >= 0.0)) throw ConfigError("model.position_loss_weight must be >= 0");
}

namespace {

template <typename T, typename F>
void for_each_param(ModelWeights<T>& w, F&& f) {
  f(w.token_embedding);
  f(w.position_embedding);
  f(w.embed_norm_gain);
  f(w.embed_norm_bias);
  for (auto& l : w.layers) {
    for (Parameter<T>* p : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.attn_norm_gain,
                            &l.attn_norm_bias, &l.w1, &l.b1, &l.w2, &l.b2, &l.ffn_norm_gain, &l.ffn_norm_bias}) {
      f(*p);
    }
  }
  f(w.mlm_transform_w);
  f(w.mlm_transform_b);
  f(w.mlm_norm_gain);
  f(w.mlm_norm_bias);
  f(w.mlm_output_bias);
  f(w.position_w);
  f(w.position_b);
}

enum class Init { kNormal, kZero, kOne };

template <typename T>
Parameter<T> make_param(std::string name, Shape shape, Init init, Rng& rng) {
  Tensor<T> value(std::move(shape));
  if (init == Init::kOne) value.fill(T(1));
  if (init == Init::kNormal) {
    for (T& v : value.data()) v = static_cast<T>(rng.truncated_normal(kInitStddev));
  }
  return Parameter<T>(std::move(name), std::move(value));
}

template <typename T>
Var<T> dense(Tape<T>& tape, Var<T> x, Parameter<T>& w, Parameter<T>& b) {
  return add_row_bias(matmul(x, tape.param(w)), tape.param(b));
}

template <typename T>
Var<T> norm(Tape<T>& tape, Var<T> x, Parameter<T>& gain, Parameter<T>& bias) {
  return layer_norm(x, tape.param(gain), tape.param(bias), static_cast<T>(kLayerNormEps));
}

Rng& dropout_rng(const ForwardContext& ctx, double p) {
  if (ctx.training && p > 0.0 && ctx.rng == nullptr) {
    throw UsageError("training forward with dropout needs a ForwardContext rng");
  }
  static thread_local Rng unused(0);
  return ctx.rng != nullptr ? *ctx.rng : unused;
}

}  // namespace

template <typename T>
std::vector<Parameter<T>*> ModelWeights<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for_each_param(*this, [&](Parameter<T>& p) { out.push_back(&p); });
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> ModelWeights<T>::parameters() const {
  std::vector<const Parameter<T>*> out;
  for_each_param(const_cast<ModelWeights<T>&>(*this), [&](Parameter<T>& p) { out.push_back(&p); });
  return out;
}

template <typename T>
void ModelWeights<T>::zero_grad() {
  for_each_param(*this, [](Parameter<T>& p) { p.zero_grad(); });
}

template <typename T>
template <typename U>
ModelWeights<U> ModelWeights<T>::cast() const {
  ModelWeights<U> out;
  out.config = config;
  out.layers.resize(layers.size());
  auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = Parameter<U>(src[i]->name, src[i]->value.template cast<U>());
  return out;
}

template <typename T>
ModelWeights<T> init_weights(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed, "weights-init");
  const std::size_t V = c.vocab_size, P = c.max_positions, H = c.hidden, F = c.ffn_size;
  ModelWeights<T> w;
  w.config = c;
  w.token_embedding = make_param<T>("embeddings.token", {V, H}, Init::kNormal, rng);
  w.position_embedding = make_param<T>("embeddings.position", {P + 1, H}, Init::kNormal, rng);
  w.embed_norm_gain = make_param<T>("embeddings.norm.gain", {H}, Init::kOne, rng);
  w.embed_norm_bias = make_param<T>("embeddings.norm.bias", {H}, Init::kZero, rng);
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string pre = "encoder.layer" + std::to_string(i) + ".";
    EncoderLayerWeights<T> l;
    l.wq = make_param<T>(pre + "attn.wq", {H, H}, Init::kNormal, rng);
    l.bq = make_param<T>(pre + "attn.bq", {H}, Init::kZero, rng);
    l.wk = make_param<T>(pre + "attn.wk", {H, H}, Init::kNormal, rng);
    l.bk = make_param<T>(pre + "attn.bk", {H}, Init::kZero, rng);
    l.wv = make_param<T>(pre + "attn.wv", {H, H}, Init::kNormal, rng);
    l.bv = make_param<T>(pre + "attn.bv", {H}, Init::kZero, rng);
    l.wo = make_param<T>(pre + "attn.wo", {H, H}, Init::kNormal, rng);
    l.bo = make_param<T>(pre + "attn.bo", {H}, Init::kZero, rng);
    l.attn_norm_gain = make_param<T>(pre + "attn.norm.gain", {H}, Init::kOne, rng);
    l.attn_norm_bias = make_param<T>(pre + "attn.norm.bias", {H}, Init::kZero, rng);
    l.w1 = make_param<T>(pre + "ffn.w1", {H, F}, Init::kNormal, rng);
    l.b1 = make_param<T>(pre + "ffn.b1", {F}, Init::kZero, rng);
    l.w2 = make_param<T>(pre + "ffn.w2", {F, H}, Init::kNormal, rng);
    l.b2 = make_param<T>(pre + "ffn.b2", {H}, Init::kZero, rng);
    l.ffn_norm_gain = make_param<T>(pre + "ffn.norm.gain", {H}, Init::kOne, rng);
    l.ffn_norm_bias = make_param<T>(pre + "ffn.norm.bias", {H}, Init::kZero, rng);
    w.layers.push_back(std::move(l));
  }
  w.mlm_transform_w = make_param<T>("mlm_head.transform.w", {H, H}, Init::kNormal, rng);
  w.mlm_transform_b = make_param<T>("mlm_head.transform.b", {H}, Init::kZero, rng);
  w.mlm_norm_gain = make_param<T>("mlm_head.norm.gain", {H}, Init::kOne, rng);
  w.mlm_norm_bias = make_param<T>("mlm_head.norm.bias", {H}, Init::kZero, rng);
  w.mlm_output_bias = make_param<T>("mlm_head.output_bias", {V}, Init::kZero, rng);
  w.position_w = make_param<T>("position_head.w", {H, P}, Init::kNormal, rng);
  w.position_b = make_param<T>("position_head.b", {P}, Init::kZero, rng);
  return w;
}

template <typename T>
Var<T> embed_forward(Tape<T>& tape, ModelWeights<T>& w, std::span<const std::int32_t> input_ids,
                     std::span<const std::int32_t> position_ids, std::size_t batch, std::size_t seq,
                     const ForwardContext& ctx) {
  const ModelConfig& c = w.config;
  if (input_ids.size() != batch * seq || position_ids.size() != batch * seq) {
    throw DimensionError("embed_forward: expected " + std::to_string(batch * seq) + " ids");
  }
  std::vector<std::size_t> tok(batch * seq), pos(batch * seq);
  for (std::size_t i = 0; i < batch * seq; ++i) {
    const std::int32_t id = input_ids[i];
    const std::int32_t p = position_ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw DataError("batch row " + std::to_string(i / seq) + ": token id " + std::to_string(id) +
                      " outside vocabulary of size " + std::to_string(c.vocab_size));
    }
    if (p < 0 || static_cast<std::size_t>(p) > c.mask_position_id()) {
      throw DataError("batch row " + std::to_string(i / seq) + ": position id " + std::to_string(p) +
                      " outside [0," + std::to_string(c.mask_position_id()) + "]");
    }
    tok[i] = static_cast<std::size_t>(id);
    pos[i] = static_cast<std::size_t>(p);
  }
  Var<T> sum_emb = add(gather_rows(tape.param(w.token_embedding), std::span<const std::size_t>(tok)),
                       gather_rows(tape.param(w.position_embedding), std::span<const std::size_t>(pos)));
  Var<T> normed = norm(tape, sum_emb, w.embed_norm_gain, w.embed_norm_bias);
  return dropout_forward(normed, c.hidden_dropout, dropout_rng(ctx, c.hidden_dropout), ctx.training,
                         DropoutMode::kStandard);
}

template <typename T>
Var<T> encoder_forward(Tape<T>& tape, ModelWeights<T>& w, Var<T> hidden, std::size_t batch, std::size_t seq,
                       std::span<const std::size_t> valid_lengths, const ForwardContext& ctx) {
  const ModelConfig& c = w.config;
  if (hidden.shape() != Shape{batch * seq, c.hidden}) {
    throw DimensionError("encoder_forward: hidden has shape " + shape_string(hidden.shape()));
  }
  AttentionShape attn;
  attn.batch = batch;
  attn.seq = seq;
  attn.heads = c.heads;
  attn.valid_lengths.assign(valid_lengths.begin(), valid_lengths.end());
  attn.scale = 1.0 / std::sqrt(static_cast<double>(c.hidden / c.heads));

  Rng& attn_rng = dropout_rng(ctx, c.attention_dropout);
  Rng& hid_rng = dropout_rng(ctx, c.hidden_dropout);
  Var<T> x = hidden;
  for (auto& l : w.layers) {
    Var<T> q = dense(tape, x, l.wq, l.bq);
    // The key bias adds the same constant to every score of a query row and
    // cancels in the softmax, so it is left out of the projection; its
    // gradient is exactly zero.
    Var<T> k = matmul(x, tape.param(l.wk));
    Var<T> v = dense(tape, x, l.wv, l.bv);
    Var<T> probs = softmax_rows(attention_scores(q, k, attn));
    Var<T> dropped = dropout_forward(probs, c.attention_dropout, attn_rng, ctx.training, ctx.attention_dropout_mode);
    if (ctx.trace != nullptr) ctx.trace->push_back({probs.id(), dropped.id()});
    Var<T> attn_out = dense(tape, attention_context(dropped, v, attn), l.wo, l.bo);
    attn_out = dropout_forward(attn_out, c.hidden_dropout, hid_rng, ctx.training, DropoutMode::kStandard);
    x = norm(tape, add(x, attn_out), l.attn_norm_gain, l.attn_norm_bias);

    Var<T> ff = dense(tape, gelu(dense(tape, x, l.w1, l.b1)), l.w2, l.b2);
    ff = dropout_forward(ff, c.hidden_dropout, hid_rng, ctx.training, DropoutMode::kStandard);
    x = norm(tape, add(x, ff), l.ffn_norm_gain, l.ffn_norm_bias);
  }
  return x;
}

template <typename T>
Var<T> gather_slots(Var<T> sequence_output, std::span<const Slot> slots, std::size_t batch, std::size_t seq) {
  std::vector<std::size_t> rows(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].batch >= batch || slots[i].seq >= seq) {
      throw IndexError("mask slot (" + std::to_string(slots[i].batch) + "," + std::to_string(slots[i].seq) +
                       ") outside batch " + std::to_string(batch) + "x" + std::to_string(seq));
    }
    rows[i] = slots[i].batch * seq + slots[i].seq;
  }
  return gather_rows(sequence_output, std::span<const std::size_t>(rows));
}

template <typename T>
Var<T> mlm_head_forward(Tape<T>& tape, ModelWeights<T>& w, Var<T> packed) {
  Var<T> h = gelu(dense(tape, packed, w.mlm_transform_w, w.mlm_transform_b));
  h = norm(tape, h, w.mlm_norm_gain, w.mlm_norm_bias);
  return add_row_bias(matmul_nt(h, tape.param(w.token_embedding)), tape.param(w.mlm_output_bias));
}

template <typename T>
Var<T> position_head_forward(Tape<T>& tape, ModelWeights<T>& w, Var<T> packed) {
  return dense(tape, packed, w.position_w, w.position_b);
}

template <typename T>
ForwardOutput<T> pretrain_forward(Tape<T>& tape, const MaskedBatch& batch, ModelWeights<T>& w,
                                  const ForwardContext& ctx) {
  const std::size_t B = batch.batch_size, S = batch.seq_len;
  if (S > w.config.max_positions) {
    throw ConfigError("batch sequence length " + std::to_string(S) + " exceeds model.max_positions " +
                      std::to_string(w.config.max_positions));
  }
  ForwardOutput<T> out;
  Var<T> h = embed_forward(tape, w, batch.input_ids, batch.position_ids, B, S, ctx);
  out.sequence_output = encoder_forward(tape, w, h, B, S, batch.valid_lengths, ctx);

  std::vector<std::int64_t> token_targets(batch.token_labels.begin(), batch.token_labels.end());
  out.mlm_logits = mlm_head_forward(tape, w, gather_slots(out.sequence_output, std::span<const Slot>(batch.token_slots), B, S));
  out.mlm_loss = cross_entropy_mean(out.mlm_logits, std::span<const std::int64_t>(token_targets));

  if (batch.position_slots.empty()) {
    out.pos_loss = tape.constant(Tensor<T>::scalar(T(0)));
    out.total = out.mlm_loss;
    return out;
  }
  std::vector<std::int64_t> pos_targets(batch.position_labels.begin(), batch.position_labels.end());
  out.pos_logits =
      position_head_forward(tape, w, gather_slots(out.sequence_output, std::span<const Slot>(batch.position_slots), B, S));
  out.pos_loss = cross_entropy_mean(out.pos_logits, std::span<const std::int64_t>(pos_targets));
  const T lambda = static_cast<T>(w.config.position_loss_weight);
  out.total = lambda == T(0) ? out.mlm_loss : add(out.mlm_loss, scale(out.pos_loss, lambda));
  return out;
}

template struct ModelWeights<float>;
template struct ModelWeights<double>;
template ModelWeights<double> ModelWeights<float>::cast<double>() const;
template ModelWeights<float> ModelWeights<double>::cast<float>() const;
template ModelWeights<float> ModelWeights<float>::cast<float>() const;
template ModelWeights<double> ModelWeights<double>::cast<double>() const;

#define PMLM_INSTANTIATE_MODEL(T)                                                                             \
  template ModelWeights<T> init_weights<T>(const ModelConfig&, std::uint64_t);                               \
  template Var<T> embed_forward<T>(Tape<T>&, ModelWeights<T>&, std::span<const std::int32_t>,                 \
                                   std::span<const std::int32_t>, std::size_t, std::size_t,                   \
                                   const ForwardContext&);                                                    \
  template Var<T> encoder_forward<T>(Tape<T>&, ModelWeights<T>&, Var<T>, std::size_t, std::size_t,            \
                                     std::span<const std::size_t>, const ForwardContext&);                    \
  template Var<T> gather_slots<T>(Var<T>, std::span<const Slot>, std::size_t, std::size_t);                  \
  template Var<T> mlm_head_forward<T>(Tape<T>&, ModelWeights<T>&, Var<T>);                                    \
  template Var<T> position_head_forward<T>(Tape<T>&, ModelWeights<T>&, Var<T>);                               \
  template ForwardOutput<T> pretrain_forward<T>(Tape<T>&, const MaskedBatch&, ModelWeights<T>&,               \
                                                const ForwardContext&);

PMLM_INSTANTIATE_MODEL(float)
PMLM_INSTANTIATE_MODEL(double)

#undef PMLM_INSTANTIATE_MODEL

}  // namespace pmlm
