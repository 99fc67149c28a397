#include <benchmark/benchmark.h>

#include <random>

#include "vse/retrieval.hpp"

namespace {

vse::EmbeddingIndex make_index(int rows, int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  vse::EmbeddingIndex idx;
  idx.num_rows = rows;
  idx.dim = dim;
  idx.matrix.resize(static_cast<std::size_t>(rows) * dim);
  for (auto& x : idx.matrix) x = nd(rng);
  for (int r = 0; r < rows; ++r) {
    float ss = 0.0f;
    for (int d = 0; d < dim; ++d) ss += idx.matrix[r * dim + d] * idx.matrix[r * dim + d];
    float inv = 1.0f / std::sqrt(ss);
    for (int d = 0; d < dim; ++d) idx.matrix[r * dim + d] *= inv;
  }
  idx.ids.reserve(rows);
  for (int r = 0; r < rows; ++r) idx.ids.push_back(std::to_string(r));
  return idx;
}

// Full scan throughput: items/sec through the tiled top-K kernel.
void BM_TopKScan(benchmark::State& state) {
  const int rows = static_cast<int>(state.range(0));
  const int dim = 256;
  const int queries = 64;
  auto idx = make_index(rows, dim, 1);
  auto q = make_index(queries, dim, 2);
  for (auto _ : state) {
    auto top = vse::top_k(q.matrix, queries, dim, idx, 10);
    benchmark::DoNotOptimize(top);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows) * queries);
}
BENCHMARK(BM_TopKScan)->Arg(10000)->Arg(100000)->Unit(benchmark::kMillisecond);

void BM_TopKThreads(benchmark::State& state) {
  const int rows = 100000, dim = 256, queries = 256;
  auto idx = make_index(rows, dim, 1);
  auto q = make_index(queries, dim, 2);
  const int threads = static_cast<int>(state.range(0));
  for (auto _ : state) {
    auto top = vse::top_k(q.matrix, queries, dim, idx, 10, 512ull << 20, threads);
    benchmark::DoNotOptimize(top);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows) * queries);
}
BENCHMARK(BM_TopKThreads)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

}  // namespace
