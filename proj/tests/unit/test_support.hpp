#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "pmlm/corpus.hpp"
#include "pmlm/finetune.hpp"
#include "pmlm/masking.hpp"
#include "pmlm/model.hpp"
#include "pmlm/training.hpp"
#include "pmlm/vocab.hpp"

namespace pmlm::test {

inline ModelConfig tiny_model(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.max_positions = 8;
  c.hidden = 16;
  c.layers = 2;
  c.heads = 2;
  c.ffn_size = 32;
  return c;
}

// Random bodies of full length S (every example valid to the end but the last,
// which is padded by two) masked through the real pipeline.
inline MaskedBatch random_batch(const ModelConfig& c, std::size_t B, std::size_t S, double token_pct,
                                double position_pct, std::uint64_t seed) {
  Rng rng(seed, "test-batch");
  std::vector<Example> examples(B);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t valid = (b + 1 == B && S > 5) ? S - 2 : S;
    examples[b].ids.assign(S, Vocab::kPad);
    examples[b].valid_length = valid;
    examples[b].ids[0] = Vocab::kCls;
    for (std::size_t s = 1; s + 1 < valid; ++s) {
      examples[b].ids[s] = static_cast<std::int32_t>(rng.range(Vocab::kNumReserved, c.vocab_size));
    }
    examples[b].ids[valid - 1] = Vocab::kSep;
  }
  MaskingConfig m;
  m.token_mask_pct = token_pct;
  m.position_mask_pct = position_pct;
  return assemble_batch(examples, m, c.vocab_size, c.max_positions, seed);
}

struct SmallCorpus {
  Vocab vocab;
  std::vector<std::int32_t> stream;
};

inline SmallCorpus small_corpus(std::size_t documents = 60) {
  SyntheticCorpusConfig sc;
  sc.documents = documents;
  sc.phrases = 30;
  const auto lines = synthetic_corpus(sc);
  SmallCorpus out{Vocab::build(lines, 500), {}};
  out.stream = encode_corpus(lines, out.vocab);
  return out;
}

inline TrainConfig small_train(std::size_t steps) {
  TrainConfig t;
  t.total_steps = steps;
  t.phase1 = {8, 4};
  t.phase2 = {12, 2};
  t.warmup_steps = steps / 5;
  t.eval_every = 5;
  t.eval_batches = 2;
  return t;
}

inline ModelConfig small_model(std::size_t vocab) {
  ModelConfig c = tiny_model(vocab);
  c.max_positions = 16;
  c.layers = 1;
  return c;
}

// A zero-layer model whose span head points at marker tokens: id 20 wins the
// start argmax, id 21 the end argmax, id 22 both, every other id scores 0.
struct MarkerModel {
  static constexpr std::int32_t kStart = 20, kEnd = 21, kBoth = 22, kFiller = 30;
  ModelWeights<float> weights;
  SpanHeadWeights<float> head;
};

inline MarkerModel marker_model(std::size_t seq_len) {
  ModelConfig c = tiny_model(50);
  c.layers = 0;
  c.max_positions = seq_len;
  MarkerModel m{init_weights<float>(c, 0), init_span_head<float>(c.hidden, 0)};
  m.weights.token_embedding.value.fill(0.0f);
  m.weights.position_embedding.value.fill(0.0f);
  m.weights.token_embedding.value.at(MarkerModel::kStart, 0) = 1.0f;
  m.weights.token_embedding.value.at(MarkerModel::kEnd, 1) = 1.0f;
  m.weights.token_embedding.value.at(MarkerModel::kBoth, 0) = 1.0f;
  m.weights.token_embedding.value.at(MarkerModel::kBoth, 1) = 1.0f;
  m.head.start_w.value.fill(0.0f);
  m.head.end_w.value.fill(0.0f);
  m.head.start_w.value[0] = 1.0f;
  m.head.end_w.value[1] = 1.0f;
  return m;
}

// Gold span (gs, ge); the marker model will predict (ps, pe).
inline SpanExample marker_example(std::size_t seq_len, std::size_t gs, std::size_t ge, std::size_t ps,
                                  std::size_t pe) {
  SpanExample ex;
  ex.ids.assign(seq_len, MarkerModel::kFiller);
  if (ps == pe) {
    ex.ids[ps] = MarkerModel::kBoth;
  } else {
    ex.ids[ps] = MarkerModel::kStart;
    ex.ids[pe] = MarkerModel::kEnd;
  }
  ex.start = gs;
  ex.end = ge;
  return ex;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("pmlm-test-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace pmlm::test
