#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pmlm/autograd.hpp"
#include "pmlm/rng.hpp"

namespace pmlm {

// Score assigned to padded keys; exp() of it underflows to exactly 0.
inline constexpr double kMaskedScore = -1e9;

// Layout of multi-head attention over a packed [batch*seq, hidden] block.
struct AttentionShape {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t heads = 1;
  std::vector<std::size_t> valid_lengths;  // per batch row; keys >= length are masked
  double scale = 1.0;
};

// [m,k] x [k,n] -> [m,n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

// [m,k] x [n,k]^T -> [m,n]
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

// x[r,c] + bias[c] broadcast over rows.
template <typename T>
Var<T> add_row_bias(Var<T> x, Var<T> bias);

template <typename T>
Var<T> scale(Var<T> x, T factor);

template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

// Sum of all elements, accumulated sequentially over the flat index.
template <typename T>
Var<T> sum(Var<T> x);

// Exact (erf) GELU.
template <typename T>
Var<T> gelu(Var<T> x);

template <typename T>
Var<T> softmax_rows(Var<T> x);

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps);

// Mean token-level cross entropy over rows whose target != ignore_index.
// When every row is ignored the loss is 0 and no gradient flows.
template <typename T>
Var<T> cross_entropy_mean(Var<T> logits, std::span<const std::int64_t> targets, std::int64_t ignore_index = -1);

// Inverted dropout. Returns `x` itself (no node) when !training or p == 0.
// The keep-mask is saved on the node; `mode` selects the backward rule.
template <typename T>
Var<T> dropout_forward(Var<T> x, double p, Rng& rng, bool training, DropoutMode mode);

// Backward rule of dropout: Standard applies mask/(1-p), StraightThrough
// returns the upstream gradient untouched.
template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& upstream, std::span<const std::uint8_t> mask, double p,
                           DropoutMode mode);

// Selects rows of a 2-D tensor, preserving the order of `rows`.
template <typename T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows);

template <typename T>
Var<T> reshape(Var<T> x, Shape shape);

// q,k: [batch*seq, hidden] -> scaled scores [batch*heads*seq, seq].
template <typename T>
Var<T> attention_scores(Var<T> q, Var<T> k, const AttentionShape& shape);

// probs: [batch*heads*seq, seq], v: [batch*seq, hidden] -> [batch*seq, hidden].
template <typename T>
Var<T> attention_context(Var<T> probs, Var<T> v, const AttentionShape& shape);

}  // namespace pmlm
