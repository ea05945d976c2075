#include "pmlm/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <string>

namespace pmlm {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.raw(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t) {
  return MatMap<T>(t.raw(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
  }
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b, const char* op) {
  if (&a.tape() != &b.tape()) throw UsageError(std::string(op) + ": operands live on different tapes");
  return a.tape();
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b, "matmul");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_rank(av.shape(), 2, "matmul");
  require_rank(bv.shape(), 2, "matmul");
  if (av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
  }
  Tensor<T> out({av.dim(0), bv.dim(1)});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  return tape.push("matmul", {a.id(), b.id()}, std::move(out), [](Tape<T>& t, const TapeNode<T>& n) {
    const Tensor<T>& A = t.value(n.inputs[0]);
    const Tensor<T>& B = t.value(n.inputs[1]);
    if (t.needs_grad(n.inputs[0])) {
      Tensor<T> dA(A.shape());
      as_matrix(dA).noalias() = as_matrix(n.grad) * as_matrix(B).transpose();
      t.accumulate(n.inputs[0], std::move(dA));
    }
    if (t.needs_grad(n.inputs[1])) {
      Tensor<T> dB(B.shape());
      as_matrix(dB).noalias() = as_matrix(A).transpose() * as_matrix(n.grad);
      t.accumulate(n.inputs[1], std::move(dB));
    }
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b, "matmul_nt");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_rank(av.shape(), 2, "matmul_nt");
  require_rank(bv.shape(), 2, "matmul_nt");
  if (av.dim(1) != bv.dim(1)) {
    throw DimensionError("matmul_nt: inner dimensions disagree " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()) + "^T");
  }
  Tensor<T> out({av.dim(0), bv.dim(0)});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv).transpose();
  return tape.push("matmul_nt", {a.id(), b.id()}, std::move(out), [](Tape<T>& t, const TapeNode<T>& n) {
    const Tensor<T>& A = t.value(n.inputs[0]);
    const Tensor<T>& B = t.value(n.inputs[1]);
    if (t.needs_grad(n.inputs[0])) {
      Tensor<T> dA(A.shape());
      as_matrix(dA).noalias() = as_matrix(n.grad) * as_matrix(B);
      t.accumulate(n.inputs[0], std::move(dA));
    }
    if (t.needs_grad(n.inputs[1])) {
      Tensor<T> dB(B.shape());
      as_matrix(dB).noalias() = as_matrix(n.grad).transpose() * as_matrix(A);
      t.accumulate(n.inputs[1], std::move(dB));
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b, "add");
  require_same(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const T* bp = b.value().raw();
  T* op = out.raw();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) op[i] += bp[i];
  return tape.push("add", {a.id(), b.id()}, std::move(out), [](Tape<T>& t, const TapeNode<T>& n) {
    if (t.needs_grad(n.inputs[0])) t.accumulate(n.inputs[0], n.grad);
    if (t.needs_grad(n.inputs[1])) t.accumulate(n.inputs[1], n.grad);
  });
}

template <typename T>
Var<T> add_row_bias(Var<T> x, Var<T> bias) {
  Tape<T>& tape = same_tape(x, bias, "add_row_bias");
  const Tensor<T>& xv = x.value();
  require_rank(xv.shape(), 2, "add_row_bias");
  if (bias.value().shape() != Shape{xv.dim(1)}) {
    throw DimensionError("add_row_bias: bias shape " + shape_string(bias.shape()) + " does not match columns of " +
                         shape_string(xv.shape()));
  }
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  Tensor<T> out = xv;
  const T* bp = bias.value().raw();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.raw() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += bp[c];
  }
  return tape.push("add_row_bias", {x.id(), bias.id()}, std::move(out),
                   [rows, cols](Tape<T>& t, const TapeNode<T>& n) {
                     if (t.needs_grad(n.inputs[0])) t.accumulate(n.inputs[0], n.grad);
                     if (t.needs_grad(n.inputs[1])) {
                       Tensor<T> db({cols});
                       for (std::size_t r = 0; r < rows; ++r) {
                         const T* g = n.grad.raw() + r * cols;
                         for (std::size_t c = 0; c < cols; ++c) db[c] += g[c];
                       }
                       t.accumulate(n.inputs[1], std::move(db));
                     }
                   });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v *= factor;
  return x.tape().push("scale", {x.id()}, std::move(out), [factor](Tape<T>& t, const TapeNode<T>& n) {
    Tensor<T> g = n.grad;
    for (T& v : g.data()) v *= factor;
    t.accumulate(n.inputs[0], std::move(g));
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& tape = same_tape(a, b, "mul");
  require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const T* bp = b.value().raw();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) out[i] *= bp[i];
  return tape.push("mul", {a.id(), b.id()}, std::move(out), [](Tape<T>& t, const TapeNode<T>& n) {
    const Tensor<T>& A = t.value(n.inputs[0]);
    const Tensor<T>& B = t.value(n.inputs[1]);
    if (t.needs_grad(n.inputs[0])) {
      Tensor<T> g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= B[i];
      t.accumulate(n.inputs[0], std::move(g));
    }
    if (t.needs_grad(n.inputs[1])) {
      Tensor<T> g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= A[i];
      t.accumulate(n.inputs[1], std::move(g));
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T total{0};
  for (T v : x.value().data()) total += v;
  return x.tape().push("sum", {x.id()}, Tensor<T>::scalar(total), [](Tape<T>& t, const TapeNode<T>& n) {
    t.accumulate(n.inputs[0], Tensor<T>(t.value(n.inputs[0]).shape(), n.grad[0]));
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (T& v : out.data()) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  return x.tape().push("gelu", {x.id()}, std::move(out), [inv_sqrt2](Tape<T>& t, const TapeNode<T>& n) {
    const Tensor<T>& X = t.value(n.inputs[0]);
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    Tensor<T> g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = X[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] *= cdf + v * pdf;
    }
    t.accumulate(n.inputs[0], std::move(g));
  });
}

template <typename T>
Var<T> softmax_rows(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require_rank(xv.shape(), 2, "softmax_rows");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (cols == 0) throw DimensionError("softmax_rows: rows must have at least one column");
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.raw() + r * cols;
    T* o = out.raw() + r * cols;
    T mx = in[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    T total{0};
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
  }
  return x.tape().push("softmax_rows", {x.id()}, std::move(out), [rows, cols](Tape<T>& t, const TapeNode<T>& n) {
    Tensor<T> g(n.value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = n.value.raw() + r * cols;
      const T* dy = n.grad.raw() + r * cols;
      T dot{0};
      for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
      T* dx = g.raw() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dx[c] = y[c] * (dy[c] - dot);
    }
    t.accumulate(n.inputs[0], std::move(g));
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  Tape<T>& tape = same_tape(x, gain, "layer_norm");
  const Tensor<T>& xv = x.value();
  require_rank(xv.shape(), 2, "layer_norm");
  if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (gain.value().shape() != Shape{cols} || bias.value().shape() != Shape{cols}) {
    throw DimensionError("layer_norm: gain/bias must have shape [" + std::to_string(cols) + "]");
  }
  std::vector<T> mean(rows), rstd(rows);
  Tensor<T> out(xv.shape());
  const T* gp = gain.value().raw();
  const T* bp = bias.value().raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.raw() + r * cols;
    T mu{0};
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= T(cols);
    T var{0};
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= T(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    T* o = out.raw() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) o[c] = (in[c] - mu) * rs * gp[c] + bp[c];
  }
  return tape.push(
      "layer_norm", {x.id(), gain.id(), bias.id()}, std::move(out),
      [rows, cols, mean = std::move(mean), rstd = std::move(rstd)](Tape<T>& t, const TapeNode<T>& n) {
        const Tensor<T>& X = t.value(n.inputs[0]);
        const T* gp = t.value(n.inputs[1]).raw();
        Tensor<T> dx(X.shape());
        Tensor<T> dg({cols});
        Tensor<T> db({cols});
        std::vector<T> xhat(cols), dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* in = X.raw() + r * cols;
          const T* dy = n.grad.raw() + r * cols;
          T mean_dxhat{0}, mean_dxhat_xhat{0};
          for (std::size_t c = 0; c < cols; ++c) {
            xhat[c] = (in[c] - mean[r]) * rstd[r];
            dxhat[c] = dy[c] * gp[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xhat[c];
            dg[c] += dy[c] * xhat[c];
            db[c] += dy[c];
          }
          mean_dxhat /= T(cols);
          mean_dxhat_xhat /= T(cols);
          T* o = dx.raw() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) {
            o[c] = rstd[r] * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
          }
        }
        t.accumulate(n.inputs[0], std::move(dx));
        t.accumulate(n.inputs[1], std::move(dg));
        t.accumulate(n.inputs[2], std::move(db));
      });
}

template <typename T>
Var<T> cross_entropy_mean(Var<T> logits, std::span<const std::int64_t> targets, std::int64_t ignore_index) {
  const Tensor<T>& lv = logits.value();
  require_rank(lv.shape(), 2, "cross_entropy_mean");
  const std::size_t rows = lv.dim(0), cols = lv.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy_mean: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int64_t tgt = targets[r];
    if (tgt == ignore_index) continue;
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= cols) {
      throw IndexError("cross_entropy_mean: target " + std::to_string(tgt) + " at row " + std::to_string(r) +
                       " outside [0," + std::to_string(cols) + ")");
    }
    ++counted;
  }
  Tensor<T> probs(lv.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) continue;
    const T* in = lv.raw() + r * cols;
    T* p = probs.raw() + r * cols;
    T mx = in[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    T z{0};
    for (std::size_t c = 0; c < cols; ++c) {
      p[c] = std::exp(in[c] - mx);
      z += p[c];
    }
    for (std::size_t c = 0; c < cols; ++c) p[c] /= z;
    total += static_cast<double>(mx + std::log(z) - in[targets[r]]);
  }
  const T value = counted == 0 ? T(0) : static_cast<T>(total / static_cast<double>(counted));
  std::vector<std::int64_t> tg(targets.begin(), targets.end());
  return logits.tape().push(
      "cross_entropy_mean", {logits.id()}, Tensor<T>::scalar(value),
      [rows, cols, counted, ignore_index, tg = std::move(tg), probs = std::move(probs)](Tape<T>& t,
                                                                                      const TapeNode<T>& n) {
        if (counted == 0) return;
        const T coef = n.grad[0] / T(counted);
        Tensor<T> g({rows, cols});
        for (std::size_t r = 0; r < rows; ++r) {
          if (tg[r] == ignore_index) continue;
          const T* p = probs.raw() + r * cols;
          T* o = g.raw() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) o[c] = p[c] * coef;
          o[tg[r]] -= coef;
        }
        t.accumulate(n.inputs[0], std::move(g));
      });
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& upstream, std::span<const std::uint8_t> mask, double p,
                           DropoutMode mode) {
  if (mask.size() != upstream.size()) {
    throw TapeCorruptionError("dropout_backward: mask of " + std::to_string(mask.size()) +
                              " elements for upstream " + shape_string(upstream.shape()));
  }
  if (mode == DropoutMode::kStraightThrough) return upstream;
  Tensor<T> g(upstream.shape());
  const T keep = static_cast<T>(1.0 - p);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = upstream[i] * static_cast<T>(mask[i]) / keep;
  return g;
}

template <typename T>
Var<T> dropout_forward(Var<T> x, double p, Rng& rng, bool training, DropoutMode mode) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0,1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const Tensor<T>& xv = x.value();
  std::vector<std::uint8_t> mask(xv.size());
  Tensor<T> out(xv.shape());
  const T keep = static_cast<T>(1.0 - p);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mask[i] = rng.uniform() < p ? 0 : 1;
    out[i] = xv[i] * static_cast<T>(mask[i]) / keep;
  }
  return x.tape().push(
      "dropout", {x.id()}, std::move(out),
      [p, mode](Tape<T>& t, const TapeNode<T>& n) {
        t.accumulate(n.inputs[0], dropout_backward(n.grad, n.mask, p, mode));
      },
      std::move(mask));
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows) {
  const Tensor<T>& xv = x.value();
  require_rank(xv.shape(), 2, "gather_rows");
  const std::size_t n_rows = xv.dim(0), cols = xv.dim(1);
  Tensor<T> out({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n_rows) {
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                       shape_string(xv.shape()));
    }
    std::copy_n(xv.raw() + rows[i] * cols, cols, out.raw() + i * cols);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return x.tape().push("gather_rows", {x.id()}, std::move(out),
                       [idx = std::move(idx), cols](Tape<T>& t, const TapeNode<T>& n) {
                         Tensor<T> g(t.value(n.inputs[0]).shape());
                         for (std::size_t i = 0; i < idx.size(); ++i) {
                           const T* src = n.grad.raw() + i * cols;
                           T* dst = g.raw() + idx[i] * cols;
                           for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                         }
                         t.accumulate(n.inputs[0], std::move(g));
                       });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape().push("reshape", {x.id()}, std::move(out), [](Tape<T>& t, const TapeNode<T>& n) {
    t.accumulate(n.inputs[0], n.grad.reshaped(t.value(n.inputs[0]).shape()));
  });
}

namespace {

void check_attention_shape(const AttentionShape& s, const Shape& qshape, const char* op) {
  require_rank(qshape, 2, op);
  if (s.heads == 0 || qshape[1] % s.heads != 0) {
    throw DimensionError(std::string(op) + ": hidden " + std::to_string(qshape[1]) + " not divisible by heads " +
                         std::to_string(s.heads));
  }
  if (qshape[0] != s.batch * s.seq) {
    throw DimensionError(std::string(op) + ": rows " + std::to_string(qshape[0]) + " != batch*seq " +
                         std::to_string(s.batch * s.seq));
  }
  if (s.valid_lengths.size() != s.batch) {
    throw DimensionError(std::string(op) + ": need one valid length per batch row");
  }
}

}  // namespace

template <typename T>
Var<T> attention_scores(Var<T> q, Var<T> k, const AttentionShape& shape) {
  Tape<T>& tape = same_tape(q, k, "attention_scores");
  check_attention_shape(shape, q.shape(), "attention_scores");
  require_same(q.shape(), k.shape(), "attention_scores");
  const auto B = shape.batch, S = shape.seq, A = shape.heads;
  const auto H = q.shape()[1], d = H / A;
  const T sc = static_cast<T>(shape.scale);
  const Eigen::Index Si = static_cast<Eigen::Index>(S), di = static_cast<Eigen::Index>(d);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(H));
  Tensor<T> out({B * A * S, S});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < A; ++h) {
      ConstStridedMap<T> Q(q.value().raw() + b * S * H + h * d, Si, di, stride);
      ConstStridedMap<T> K(k.value().raw() + b * S * H + h * d, Si, di, stride);
      MatMap<T> O(out.raw() + (b * A + h) * S * S, Si, Si);
      O.noalias() = sc * (Q * K.transpose());
      for (std::size_t i = 0; i < S; ++i) {
        for (std::size_t j = shape.valid_lengths[b]; j < S; ++j) O(i, j) = static_cast<T>(kMaskedScore);
      }
    }
  }
  return tape.push("attention_scores", {q.id(), k.id()}, std::move(out), [shape](Tape<T>& t, const TapeNode<T>& n) {
    const Tensor<T>& Qt = t.value(n.inputs[0]);
    const Tensor<T>& Kt = t.value(n.inputs[1]);
    const auto B = shape.batch, S = shape.seq, A = shape.heads;
    const auto H = Qt.dim(1), d = H / A;
    const T sc = static_cast<T>(shape.scale);
    const Eigen::Index Si = static_cast<Eigen::Index>(S), di = static_cast<Eigen::Index>(d);
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(H));
    Tensor<T> dQ(Qt.shape()), dK(Kt.shape());
    RowMat<T> dS(Si, Si);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < A; ++h) {
        dS = ConstMatMap<T>(n.grad.raw() + (b * A + h) * S * S, Si, Si);
        for (std::size_t i = 0; i < S; ++i) {
          for (std::size_t j = shape.valid_lengths[b]; j < S; ++j) dS(i, j) = T(0);
        }
        ConstStridedMap<T> Q(Qt.raw() + b * S * H + h * d, Si, di, stride);
        ConstStridedMap<T> K(Kt.raw() + b * S * H + h * d, Si, di, stride);
        StridedMap<T> dq(dQ.raw() + b * S * H + h * d, Si, di, stride);
        StridedMap<T> dk(dK.raw() + b * S * H + h * d, Si, di, stride);
        dq.noalias() = sc * (dS * K);
        dk.noalias() = sc * (dS.transpose() * Q);
      }
    }
    t.accumulate(n.inputs[0], std::move(dQ));
    t.accumulate(n.inputs[1], std::move(dK));
  });
}

template <typename T>
Var<T> attention_context(Var<T> probs, Var<T> v, const AttentionShape& shape) {
  Tape<T>& tape = same_tape(probs, v, "attention_context");
  check_attention_shape(shape, v.shape(), "attention_context");
  const auto B = shape.batch, S = shape.seq, A = shape.heads;
  const auto H = v.shape()[1], d = H / A;
  if (probs.shape() != Shape{B * A * S, S}) {
    throw DimensionError("attention_context: probabilities have shape " + shape_string(probs.shape()));
  }
  const Eigen::Index Si = static_cast<Eigen::Index>(S), di = static_cast<Eigen::Index>(d);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(H));
  Tensor<T> out({B * S, H});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < A; ++h) {
      ConstMatMap<T> P(probs.value().raw() + (b * A + h) * S * S, Si, Si);
      ConstStridedMap<T> V(v.value().raw() + b * S * H + h * d, Si, di, stride);
      StridedMap<T> O(out.raw() + b * S * H + h * d, Si, di, stride);
      O.noalias() = P * V;
    }
  }
  return tape.push("attention_context", {probs.id(), v.id()}, std::move(out),
                   [shape](Tape<T>& t, const TapeNode<T>& n) {
                     const Tensor<T>& Pt = t.value(n.inputs[0]);
                     const Tensor<T>& Vt = t.value(n.inputs[1]);
                     const auto B = shape.batch, S = shape.seq, A = shape.heads;
                     const auto H = Vt.dim(1), d = H / A;
                     const Eigen::Index Si = static_cast<Eigen::Index>(S), di = static_cast<Eigen::Index>(d);
                     const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(H));
                     Tensor<T> dP(Pt.shape()), dV(Vt.shape());
                     for (std::size_t b = 0; b < B; ++b) {
                       for (std::size_t h = 0; h < A; ++h) {
                         ConstMatMap<T> P(Pt.raw() + (b * A + h) * S * S, Si, Si);
                         ConstStridedMap<T> V(Vt.raw() + b * S * H + h * d, Si, di, stride);
                         ConstStridedMap<T> dO(n.grad.raw() + b * S * H + h * d, Si, di, stride);
                         MatMap<T> dp(dP.raw() + (b * A + h) * S * S, Si, Si);
                         StridedMap<T> dv(dV.raw() + b * S * H + h * d, Si, di, stride);
                         dp.noalias() = dO * V.transpose();
                         dv.noalias() = P.transpose() * dO;
                       }
                     }
                     if (t.needs_grad(n.inputs[0])) t.accumulate(n.inputs[0], std::move(dP));
                     if (t.needs_grad(n.inputs[1])) t.accumulate(n.inputs[1], std::move(dV));
                   });
}

#define PMLM_INSTANTIATE_OPS(T)                                                                           \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                             \
  template Var<T> matmul_nt<T>(Var<T>, Var<T>);                                                          \
  template Var<T> add<T>(Var<T>, Var<T>);                                                                \
  template Var<T> add_row_bias<T>(Var<T>, Var<T>);                                                       \
  template Var<T> scale<T>(Var<T>, T);                                                                   \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                                \
  template Var<T> sum<T>(Var<T>);                                                                        \
  template Var<T> gelu<T>(Var<T>);                                                                       \
  template Var<T> softmax_rows<T>(Var<T>);                                                               \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                              \
  template Var<T> cross_entropy_mean<T>(Var<T>, std::span<const std::int64_t>, std::int64_t);            \
  template Var<T> dropout_forward<T>(Var<T>, double, Rng&, bool, DropoutMode);                           \
  template Tensor<T> dropout_backward<T>(const Tensor<T>&, std::span<const std::uint8_t>, double,        \
                                         DropoutMode);                                                   \
  template Var<T> gather_rows<T>(Var<T>, std::span<const std::size_t>);                                  \
  template Var<T> reshape<T>(Var<T>, Shape);                                                             \
  template Var<T> attention_scores<T>(Var<T>, Var<T>, const AttentionShape&);                            \
  template Var<T> attention_context<T>(Var<T>, Var<T>, const AttentionShape&);

PMLM_INSTANTIATE_OPS(float)
PMLM_INSTANTIATE_OPS(double)

#undef PMLM_INSTANTIATE_OPS

}  // namespace pmlm
