// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "localist/attention.hpp"
#include "localist/objective.hpp"
#include "localist/rules.hpp"
#include "localist/trainer.hpp"
#include "support.hpp"

namespace {

using namespace localist;

// Sequence length n = state.range(0), 4 heads over a 4-block partition.
void BM_Forward(benchmark::State& state) {
  Rng rng(1);
  const auto bundle = build_partition({4, 1, 2, 8, 0.5}, rng);
  const auto model = init_model({4, bundle.partition.dim(), 8, 8, bundle.partition.vocab_size()}, 1.0, 0.3, rng);
  std::vector<TokenId> tokens(static_cast<std::size_t>(state.range(0)));
  for (auto& t : tokens) t = rng.index(bundle.partition.vocab_size());
  const Matrix x = embed(tokens, bundle.embeddings);
  for (auto _ : state) benchmark::DoNotOptimize(forward(model, x, SelfMask::kExcludeSelf));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Forward)->RangeMultiplier(4)->Range(4, 256)->Complexity();

void BM_GradSmooth(benchmark::State& state) {
  const auto f = testing::pointer_fixture(1, 512);
  Rng rng(2);
  const auto model =
      init_model({4, f.bundle.partition.dim(), 8, 8, f.bundle.partition.vocab_size()}, 1.0, 0.3, rng, true);
  const auto dial = make_dial(RegimePreset::kLocalist, 4, 4);
  const auto batch = std::span(f.samples).first(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state)
    benchmark::DoNotOptimize(grad_smooth(model, batch, f.bundle.partition, f.bundle.embeddings, dial));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_GradSmooth)->Arg(32)->Arg(128)->Arg(512);

void BM_TrainStep(benchmark::State& state) {
  const auto f = testing::pointer_fixture(1, 2000);
  auto cfg = testing::trainer_config(RegimePreset::kLocalist);
  cfg.steps = 50;
  for (auto _ : state) benchmark::DoNotOptimize(train(cfg, f.data()));
  state.SetItemsProcessed(state.iterations() * 50);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_ParseRules(benchmark::State& state) {
  std::string text;
  for (int i = 0; i < state.range(0); ++i)
    text += "rule r" + std::to_string(i) + " priority " + std::to_string(i) +
            " criticality medium { when class \"c\" then attend block \"b\"; }\n";
  for (auto _ : state) benchmark::DoNotOptimize(parse_rules(text));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(text.size()));
}
BENCHMARK(BM_ParseRules)->Arg(50)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();
