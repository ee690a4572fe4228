#include <benchmark/benchmark.h>

#include <random>

#include "equivar/contrastive.hpp"
#include "equivar/layers.hpp"
#include "equivar/ops.hpp"

using namespace equivar;

namespace {

GroupKind kind_of(std::int64_t i) {
  switch (i) {
    case 0: return GroupKind::trivial;
    case 1: return GroupKind::rot4;
    default: return GroupKind::rot4_flip;
  }
}

void BM_conv2d(benchmark::State& state) {
  std::mt19937_64 rng(1);
  const auto b = static_cast<std::size_t>(state.range(0));
  const auto x = Tensor<float>::randn({b, 16, 32, 32}, rng);
  const auto w = Tensor<float>::randn({16, 16, 3, 3}, rng);
  for (auto _ : state) {
    NoGradGuard guard;
    benchmark::DoNotOptimize(conv2d(x, w, 1, 1));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(b));
}
BENCHMARK(BM_conv2d)->Arg(8)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_lifting_conv(benchmark::State& state) {
  std::mt19937_64 rng(2);
  const auto group = make_group(kind_of(state.range(0)));
  const auto x = Tensor<float>::randn({32, 3, 32, 32}, rng);
  const auto w = Tensor<float>::randn({8, 3, 3, 3}, rng);
  for (auto _ : state) {
    NoGradGuard guard;
    benchmark::DoNotOptimize(lifting_conv(x, w, group, 1));
  }
}
BENCHMARK(BM_lifting_conv)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_group_conv(benchmark::State& state) {
  std::mt19937_64 rng(3);
  const auto group = make_group(kind_of(state.range(0)));
  const std::size_t n = group.order();
  GroupFeatureMap<float> x{Tensor<float>::randn({32, n, 8, 16, 16}, rng), group};
  const auto w = Tensor<float>::randn({n, 8, 8, 3, 3}, rng);
  for (auto _ : state) {
    NoGradGuard guard;
    benchmark::DoNotOptimize(group_conv(x, w, group, 1));
  }
}
BENCHMARK(BM_group_conv)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_backbone_train_step(benchmark::State& state) {
  std::mt19937_64 rng(4);
  BackboneConfig cfg;
  cfg.group = kind_of(state.range(0));
  cfg.width = 8;
  Backbone<float> net(cfg, rng);
  const auto x = Tensor<float>::randn({32, 3, 32, 32}, rng);
  for (auto _ : state) {
    for (auto* p : net.parameter_slots()) p->zero_grad();
    backward(sum(net(x).tensor));
  }
}
BENCHMARK(BM_backbone_train_step)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_sinkhorn(benchmark::State& state) {
  std::mt19937_64 rng(5);
  const auto scores = Tensor<double>::randn({256, 32}, rng);
  const auto iterations = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(sinkhorn_knopp(scores, iterations));
}
BENCHMARK(BM_sinkhorn)->Arg(3)->Arg(100);

}  // namespace

BENCHMARK_MAIN();
