#include <benchmark/benchmark.h>

#include "storyviz/autograd.hpp"
#include "storyviz/rng.hpp"

namespace {

using namespace storyviz;

void BM_Gemm(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(1);
  TensorF a = TensorF::from_normal({n, n}, rng);
  TensorF b = TensorF::from_normal({n, n}, rng);
  TensorF c({n, n});
  for (auto _ : state) {
    gemm<float>(false, false, n, n, n, 1.0f, a.data(), b.data(), 0.0f, c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Gemm)->Arg(256)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
