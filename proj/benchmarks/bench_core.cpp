#include <benchmark/benchmark.h>

#include "eptlab/fewshot.hpp"
#include "eptlab/peft.hpp"
#include "eptlab/rng.hpp"

using namespace eptlab;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = rng.normal();
  return t;
}

const Dataset& colon() {
  static const Dataset d = synth_dataset(SynthSpec::toy_colon(), 0);
  return d;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(dense::matmul(a, b));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(16, 256)->Complexity(benchmark::oNCubed);

void BM_PromptedSoftmax(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto way = static_cast<EmbeddingWay>(state.range(1));
  const Tensor ktq = random_matrix(n, n, 3), prompt = random_matrix(4, n, 4);
  for (auto _ : state) benchmark::DoNotOptimize(prompted_softmax(ktq, prompt, way));
  state.SetLabel(std::string(to_string(way)));
}
BENCHMARK(BM_PromptedSoftmax)->ArgsProduct({{17, 197}, {0, 1, 2, 3}});

void BM_PlainSoftmax(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor ktq = random_matrix(n, n, 3);
  for (auto _ : state) benchmark::DoNotOptimize(dense::softmax_columns(ktq));
}
BENCHMARK(BM_PlainSoftmax)->Arg(17)->Arg(197);

PeftMethod method_for(int index) {
  switch (index) {
    case 0: return PeftMethod::simple(MethodTag::Linear);
    case 1: return PeftMethod::ept(2);
    case 2: return PeftMethod::vpt(2);
    case 3: return PeftMethod::lora(2);
    default: return PeftMethod::simple(MethodTag::Full);
  }
}

void BM_Forward(benchmark::State& state) {
  const Model m = Model::create(BackboneConfig{}, method_for(static_cast<int>(state.range(0))), 0, 0);
  const Tensor& img = colon().samples[0].image;
  for (auto _ : state) benchmark::DoNotOptimize(m.logits(img));
  state.SetLabel(m.method().label());
}
BENCHMARK(BM_Forward)->DenseRange(0, 4);

void BM_ForwardBackward(benchmark::State& state) {
  const Model m = Model::create(BackboneConfig{}, method_for(static_cast<int>(state.range(0))), 0, 0);
  const TrainableMask mask = m.trainable();
  const std::vector<std::size_t> batch = {0, 1, 2, 3};
  for (auto _ : state) {
    benchmark::DoNotOptimize(batch_objective(m, m.parameters(), colon(), batch, mask, LossKind::CrossEntropy));
  }
  state.SetLabel(m.method().label());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch.size()));
}
BENCHMARK(BM_ForwardBackward)->DenseRange(0, 4);

}  // namespace

BENCHMARK_MAIN();
