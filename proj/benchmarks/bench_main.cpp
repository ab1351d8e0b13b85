#include "xfrn/detector.hpp"
#include "xfrn/fixture.hpp"
#include "xfrn/geometry.hpp"
#include "xfrn/rng.hpp"

#include <benchmark/benchmark.h>

using namespace xfrn;

namespace {

Matrix gaussian(Rng& rng, int rows, int cols) {
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

// n samples, d hidden, d_m neurons: one layer of transfer scores.
void BM_ScoreLayer(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0)), d = 256, dm = static_cast<int>(state.range(1));
  Rng rng(1);
  const Matrix pre = gaussian(rng, n, d), alpha = gaussian(rng, n, dm), values = gaussian(rng, dm, d);
  const Vector c = gaussian(rng, d, 1).col(0);
  for (auto _ : state) benchmark::DoNotOptimize(score_layer(pre, alpha, values, c));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * dm);
}
BENCHMARK(BM_ScoreLayer)->Args({100, 1024})->Args({500, 1024})->Args({500, 4096})->Unit(benchmark::kMillisecond);

void BM_MutualKnn(benchmark::State& state) {
  const int b = static_cast<int>(state.range(0));
  Rng rng(2);
  const Matrix phi = gaussian(rng, b, 256), psi = gaussian(rng, b, 256);
  for (auto _ : state) benchmark::DoNotOptimize(mutual_knn_alignment(phi, psi, 5));
}
BENCHMARK(BM_MutualKnn)->Arg(100)->Arg(500)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_FixtureForward(benchmark::State& state) {
  FixtureOptions o;
  o.mlp_dim = static_cast<int>(state.range(0));
  const auto fx = build_planted_fixture(o);
  const auto tokens = fx.model->tokenize(fx.make_corpus(1, 3).sentence(0, "ja"));
  const ForwardHooks hooks;
  for (auto _ : state) benchmark::DoNotOptimize(fx.model->forward(tokens, hooks));
}
BENCHMARK(BM_FixtureForward)->Arg(256)->Arg(1024)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
