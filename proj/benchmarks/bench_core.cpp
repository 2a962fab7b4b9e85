#include <benchmark/benchmark.h>

#include <random>

#include "geofew/losses.hpp"
#include "geofew/model.hpp"
#include "geofew/rng.hpp"
#include "geofew/tensor.hpp"

namespace {

using geofew::Tape;
using geofew::Tensor;

void fill_random(Tensor& t, std::mt19937_64& rng) {
  for (double& x : t.data) x = 2.0 * geofew::rand_uniform01(rng) - 1.0;
}

void BM_MatmulForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  Tensor a({n, n}, 0.0), b({n, n}, 0.0);
  fill_random(a, rng);
  fill_random(b, rng);
  for (auto _ : state) {
    Tape tape;
    Tensor& al = tape.leaf(a.shape(), a.data, false);
    Tensor& bl = tape.leaf(b.shape(), b.data, false);
    benchmark::DoNotOptimize(tape.matmul(al, bl).data.data());
  }
}
BENCHMARK(BM_MatmulForward)->Arg(32)->Arg(64)->Arg(128);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(2);
  Tensor a({n, n}, 0.0, true), b({n, n}, 0.0, true);
  fill_random(a, rng);
  fill_random(b, rng);
  for (auto _ : state) {
    a.zero_grad();
    b.zero_grad();
    Tape tape;
    Tensor& loss = tape.sum(tape.matmul(a, b));
    tape.backward(loss);
    benchmark::DoNotOptimize(a.grad.data());
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(32)->Arg(64);

void BM_TotalLossStep(benchmark::State& state) {
  // combined objective forward + backward at the default benchmark scale
  const std::size_t d = 64, n_base = 10, n_novel = 5, batch = 100, k = 5;
  std::mt19937_64 rng(3);
  Tensor features({batch, d}, 0.0, true);
  Tensor w_base({d, n_base}, 0.0, false);
  Tensor w_novel({d, n_novel}, 0.0, true);
  Tensor scale = Tensor::scalar(10.0);
  fill_random(features, rng);
  fill_random(w_base, rng);
  fill_random(w_novel, rng);
  std::vector<int> labels(batch);
  for (std::size_t i = 0; i < batch; ++i)
    labels[i] = static_cast<int>(n_base + (i % n_novel));
  geofew::LossConfig config;

  for (auto _ : state) {
    features.zero_grad();
    w_novel.zero_grad();
    Tape tape;
    geofew::Stage2Batch stage2;
    stage2.features = &tape.leaf(features.shape(), features.data, true);
    stage2.labels = labels;
    std::vector<geofew::Tensor*> slices;
    for (std::size_t c = 0; c < n_novel; ++c)
      slices.push_back(&tape.slice_rows(*stage2.features, c * (batch / n_novel), k));
    stage2.support_features = slices;
    auto result =
        geofew::total_loss(tape, stage2, w_base, w_novel, scale, config);
    tape.backward(*result.total);
    benchmark::DoNotOptimize(w_novel.grad.data());
  }
}
BENCHMARK(BM_TotalLossStep);

void BM_TwoStreamScores(benchmark::State& state) {
  geofew::BlockSpec spec;
  spec.input_dim = 16;
  spec.blocks = {{64}, {64}, {64}, {64}};
  geofew::BlockNetwork net(spec, 10, 11);
  net.duplicate_top_blocks(1);
  net.classifier().w_novel = Tensor({64, 5}, 0.1);
  std::mt19937_64 rng(4);
  Tensor batch({225, 16}, 0.0);
  fill_random(batch, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(net.scores_two_stream(batch).data.data());
  }
}
BENCHMARK(BM_TwoStreamScores);

}  // namespace

BENCHMARK_MAIN();
