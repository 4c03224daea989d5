#include <benchmark/benchmark.h>

#include <random>

#include "btok/pooling.hpp"
#include "btok/retrieval.hpp"
#include "btok/trainer.hpp"

namespace {

using namespace btok;

struct Fixture {
  ModelConfig model;
  TrainerConfig trainer;
  ModelState<float> state;

  explicit Fixture(Index k) {
    model.max_seq_len = 1100;
    trainer.btok_count = k;
    state = init_model_state<float>(model, trainer);
  }
};

TokenSequence random_input(Index n, Index vocab) {
  std::mt19937_64 g(7);
  std::uniform_int_distribution<TokenId> d(2, static_cast<TokenId>(vocab - 1));
  TokenSequence x(static_cast<std::size_t>(n));
  for (auto& t : x) t = d(g);
  return x;
}

void bm_embed_btok(benchmark::State& st) {
  const Fixture f(st.range(1));
  const auto x = random_input(st.range(0), f.model.vocab_size);
  for (auto _ : st) benchmark::DoNotOptimize(embed(f.state.params, f.state.bank, x));
  st.counters["positions"] = double(st.range(0) + st.range(1));
}

void bm_embed_eos(benchmark::State& st) {
  const Fixture f(1);
  const auto x = random_input(st.range(0), f.model.vocab_size);
  for (auto _ : st) benchmark::DoNotOptimize(embed_eos_baseline(f.state.params, x, f.trainer.eos_id));
  st.counters["positions"] = double(st.range(0) + 1);
}

void bm_train_step(benchmark::State& st) {
  ModelConfig model;
  TrainerConfig cfg;
  cfg.total_steps = 1 << 20;
  cfg.lambda.total_steps = cfg.total_steps;
  const SyntheticTask task;
  const auto vocab = TaskVocabulary::for_size(model.vocab_size);
  Trainer<float> trainer(model, cfg, [&](Index step) { return training_batch(task, vocab, cfg.global_batch, 0, step); });
  for (auto _ : st) benchmark::DoNotOptimize(trainer.step());
}

}  // namespace

BENCHMARK(bm_embed_btok)->Args({128, 4})->Args({1024, 1})->Args({1024, 4})->Args({1024, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(bm_embed_eos)->Arg(128)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_train_step)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
