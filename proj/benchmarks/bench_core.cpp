#include <benchmark/benchmark.h>

#include "eqcm/eval.hpp"
#include "eqcm/graph.hpp"
#include "eqcm/model.hpp"
#include "eqcm/rng.hpp"
#include "eqcm/synth.hpp"
#include "eqcm/train.hpp"

using namespace eqcm;

namespace {

Tensor<real> random_tensor(std::vector<int> shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<real> t(std::move(shape));
  for (auto& x : t.v) x = static_cast<real>(rng.normal());
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  const auto x = random_tensor({16, 8, 32, 32}, 1);
  const auto w = random_tensor({16, 8, 3, 3}, 2);
  const auto b = random_tensor({16}, 3);
  for (auto _ : state) {
    Graph<real> g;
    benchmark::DoNotOptimize(g.value(g.conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 1)).data());
  }
}
BENCHMARK(BM_Conv2dForward);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto x = random_tensor({16, 8, 32, 32}, 1);
  const auto w = random_tensor({16, 8, 3, 3}, 2);
  const auto b = random_tensor({16}, 3);
  for (auto _ : state) {
    Graph<real> g;
    const NodeId xn = g.leaf(x, true);
    const NodeId out = g.conv2d(xn, g.leaf(w, true), g.leaf(b, true), 1);
    g.backward(g.sum(out));
    benchmark::DoNotOptimize(g.grad(xn).data());
  }
}
BENCHMARK(BM_Conv2dBackward);

void BM_WarpBilinear(benchmark::State& state) {
  const auto x = random_tensor({16, 1, 32, 32}, 4);
  AffineTransform t;
  t.kind = TransformKind::scale;
  t.scale_ratio = 1.1;
  for (auto _ : state) benchmark::DoNotOptimize(apply_transform(x, t).data());
}
BENCHMARK(BM_WarpBilinear);

void BM_TrainStep(benchmark::State& state) {
  DatasetSpec spec;
  spec.n_train = 16;
  spec.n_val = 1;
  spec.n_test = 1;
  const Dataset data = generate(spec);
  TrainConfig config;
  config.epochs = 1;
  config.weights = LossWeights::full();
  for (auto _ : state) {
    TrainResult r = train(config, data);
    benchmark::DoNotOptimize(r.nets.front().params.front().second.data());
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_Assd(benchmark::State& state) {
  Rng rng(9);
  BinaryMask a, b;
  a.h = a.w = b.h = b.w = 32;
  a.m.resize(1024);
  b.m.resize(1024);
  for (std::size_t i = 0; i < 1024; ++i) {
    a.m[i] = rng.bernoulli(0.2);
    b.m[i] = rng.bernoulli(0.2);
  }
  for (auto _ : state) benchmark::DoNotOptimize(assd(a, b));
}
BENCHMARK(BM_Assd);

}  // namespace

BENCHMARK_MAIN();
