#include <benchmark/benchmark.h>

#include "pmlm/corpus.hpp"
#include "pmlm/masking.hpp"
#include "pmlm/model.hpp"
#include "pmlm/ops.hpp"
#include "pmlm/training.hpp"
#include "pmlm/vocab.hpp"

using namespace pmlm;

namespace {

Tensor<float> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t({r, c});
  for (float& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

std::vector<Example> corpus_examples(std::size_t seq_len) {
  SyntheticCorpusConfig sc;
  sc.documents = 400;
  const auto lines = synthetic_corpus(sc);
  const Vocab vocab = Vocab::build(lines, 2000);
  return make_examples(encode_corpus(lines, vocab), seq_len);
}

}  // namespace

// [rows, H] x [H, H], the shape of every projection in the encoder.
static void BM_Matmul(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto h = static_cast<std::size_t>(state.range(1));
  Parameter<float> a("a", random_matrix(rows, h, 1)), b("b", random_matrix(h, h, 2));
  for (auto _ : state) {
    Tape<float> tape;
    Var<float> c = matmul(tape.param(a), tape.param(b));
    benchmark::DoNotOptimize(c.value().raw());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * rows * h * h * 2));
}
BENCHMARK(BM_Matmul)->Args({512, 128})->Args({512, 512})->Args({1024, 128});

// One training step (forward, backward, SGD) of the default model.
static void BM_TrainStep(benchmark::State& state) {
  const auto seq = static_cast<std::size_t>(state.range(0));
  const auto batch_size = static_cast<std::size_t>(state.range(1));
  ModelConfig c;
  const auto examples = corpus_examples(seq);
  std::vector<Example> picked(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(batch_size));
  const MaskedBatch batch = assemble_batch(picked, MaskingConfig{}, c.vocab_size, c.max_positions, 1);
  auto w = init_weights<float>(c, 1);
  auto params = w.parameters();
  auto momentum = make_momentum_buffers<float>(params);
  std::uint64_t step = 0;
  for (auto _ : state) {
    Rng rng(1, "dropout", step++);
    ForwardContext ctx;
    ctx.training = true;
    ctx.rng = &rng;
    {
      Tape<float> tape;
      tape.backward(pretrain_forward(tape, batch, w, ctx).total);
    }
    sgd_step<float>(params, momentum, 1e-4, 0.9);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * seq * batch_size));
}
BENCHMARK(BM_TrainStep)->Args({32, 16})->Args({64, 8})->Unit(benchmark::kMillisecond);

// Masking and packing one batch.
static void BM_AssembleBatch(benchmark::State& state) {
  const auto seq = static_cast<std::size_t>(state.range(0));
  const auto examples = corpus_examples(seq);
  const std::span<const Example> chunk(examples.data(), 16);
  std::uint64_t seed = 0;
  for (auto _ : state) {
    MaskedBatch b = assemble_batch(chunk, MaskingConfig{}, 2000, 64, seed++);
    benchmark::DoNotOptimize(b.input_ids.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 16 * seq));
}
BENCHMARK(BM_AssembleBatch)->Arg(32)->Arg(64);

BENCHMARK_MAIN();
