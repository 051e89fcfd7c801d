#include <cmath>
#include <vector>

#include <benchmark/benchmark.h>

#include "nao/arch_space.hpp"
#include "nao/audio_frontend.hpp"
#include "nao/child_network.hpp"
#include "nao/graph.hpp"
#include "nao/params.hpp"
#include "nao/surrogate.hpp"

namespace {

using namespace nao;

void BM_CodecRoundTrip(benchmark::State& state) {
  Rng rng(7);
  const Architecture arch = random_architecture(rng, static_cast<int>(state.range(0)));
  for (auto _ : state) {
    Architecture back = decode_tokens(encode_tokens(arch));
    benchmark::DoNotOptimize(back);
  }
}
BENCHMARK(BM_CodecRoundTrip)->Arg(1)->Arg(5);

void BM_Mfcc(benchmark::State& state) {
  std::vector<float> clip(kClipSamples);
  for (int i = 0; i < kClipSamples; ++i) clip[i] = 0.5F * std::sin(2.0F * 3.14159265F * 1000.0F * i / kSampleRate);
  for (auto _ : state) {
    FeatureMap f = compute_mfcc(clip);
    benchmark::DoNotOptimize(f);
  }
}
BENCHMARK(BM_Mfcc);

Tensor<float> filled(std::vector<int> shape, std::uint64_t seed) {
  Tensor<float> t(std::move(shape));
  Rng rng(seed);
  std::uniform_real_distribution<float> u(-1.0F, 1.0F);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

void BM_SepConvForwardBackward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  ParamStoreF store;
  const ParamId dw = store.add("dw", filled({c, 1, 3, 3}, 1));
  const ParamId pw = store.add("pw", filled({c, c, 1, 1}, 2));
  const Tensor<float> x = filled({16, c, kNumFrames, kNumCoeffs}, 3);
  for (auto _ : state) {
    GraphF g;
    Var h = g.depthwise_conv2d(g.input(x), g.param(store[dw]), 1, 1, true);
    h = g.conv2d(h, g.param(store[pw]), 1, 0);
    Var pooled = g.global_avg_pool(h);
    std::vector<int> targets(16, 0);
    g.backward(g.softmax_cross_entropy(pooled, targets));
  }
}
BENCHMARK(BM_SepConvForwardBackward)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_SurrogateEpoch(benchmark::State& state) {
  constexpr int kB = 5;
  SurrogateModel model(kB, 3);
  Rng rng(11);
  std::vector<TrainPair> pairs;
  for (int i = 0; i < 20; ++i) pairs.push_back({encode_tokens(random_architecture(rng, kB)), 0.05F * i});
  SurrogateTrainConfig cfg;
  cfg.epochs = 1;
  for (auto _ : state) {
    auto losses = train_surrogate(model, pairs, cfg);
    benchmark::DoNotOptimize(losses);
  }
}
BENCHMARK(BM_SurrogateEpoch)->Unit(benchmark::kMillisecond);

void BM_ChildForward(benchmark::State& state) {
  Rng rng(5);
  NetworkConfig cfg;
  cfg.num_cells = 3;
  cfg.channels = 16;
  ChildNetwork net = build_network(random_architecture(rng, 5), cfg);
  const Tensor<float> x = filled({8, 1, kNumFrames, kNumCoeffs}, 9);
  for (auto _ : state) {
    GraphF g;
    Var logits = net.forward(g, g.input(x), false);
    benchmark::DoNotOptimize(g.value(logits).data());
  }
}
BENCHMARK(BM_ChildForward)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
