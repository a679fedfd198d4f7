#include <benchmark/benchmark.h>

#include "rlkv/rng.hpp"
#include "rlkv/tensor.hpp"

namespace {

rlkv::Tensor random_tensor(rlkv::Rng& rng, rlkv::Shape shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<float> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = static_cast<float>(rng.next_normal());
  return rlkv::Tensor::from_data(std::move(shape), std::move(data));
}

void BM_Matmul(benchmark::State& state) {
  int n = static_cast<int>(state.range(0));
  rlkv::Rng rng(1);
  rlkv::Tensor a = random_tensor(rng, {n, n});
  rlkv::Tensor b = random_tensor(rng, {n, n});
  for (auto _ : state) {
    rlkv::Tensor c = rlkv::matmul(a, b);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2ll * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_SoftmaxRows(benchmark::State& state) {
  int n = static_cast<int>(state.range(0));
  rlkv::Rng rng(2);
  rlkv::Tensor x = random_tensor(rng, {n, n});
  for (auto _ : state) {
    rlkv::Tensor s = rlkv::softmax_lastdim(x);
    benchmark::DoNotOptimize(s.data());
  }
}
BENCHMARK(BM_SoftmaxRows)->Arg(128)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
