#include <benchmark/benchmark.h>

#include <random>

#include "vse/tensor.hpp"

namespace {

vse::TensorPtr random_tensor(int r, int c, std::uint64_t seed, bool grad = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  auto t = vse::Tensor::zeros({r, c}, grad);
  for (auto& x : t->data) x = nd(rng);
  return t;
}

void BM_MatmulForward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  auto a = random_tensor(n, n, 1);
  auto b = random_tensor(n, n, 2);
  for (auto _ : state) {
    vse::Tape tape(false);
    benchmark::DoNotOptimize(tape.matmul(a, b));
  }
  state.SetItemsProcessed(state.iterations() * 2ll * n * n * n);
}
BENCHMARK(BM_MatmulForward)->Arg(64)->Arg(256)->Arg(512);

void BM_MatmulBackward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  auto a = random_tensor(n, n, 1, true);
  auto b = random_tensor(n, n, 2, true);
  for (auto _ : state) {
    vse::Tape tape;
    auto loss = tape.mean_all(tape.matmul(a, b));
    tape.backward(loss);
    vse::zero_grads({{"a", a}, {"b", b}});
  }
  state.SetItemsProcessed(state.iterations() * 6ll * n * n * n);
}
BENCHMARK(BM_MatmulBackward)->Arg(64)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
