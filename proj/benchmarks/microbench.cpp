#include <benchmark/benchmark.h>

#include <memory>
#include <vector>

#include "nnscene/ann_index.hpp"
#include "nnscene/decoder.hpp"
#include "nnscene/kernels.hpp"
#include "nnscene/memory_bank.hpp"
#include "nnscene/synthetic.hpp"

namespace nnscene {
namespace {

constexpr std::uint32_t kDim = 64;

std::shared_ptr<const MemoryBank> clustered_bank(std::size_t rows) {
  auto bank = std::make_shared<MemoryBank>();
  bank->dim = kDim;
  bank->spec = {Task::kSegmentation, 4};
  const auto keys = clustered_unit_vectors(rows, kDim, 1024, 0.5, 1, 2);
  std::vector<float> ch(5, 0.0f);
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill(ch.begin(), ch.end(), 0.0f);
    ch[r % 4] = 1.0f;
    bank->append(std::span(keys.data() + r * kDim, kDim), ch, Provenance{r, 0, 0});
  }
  return bank;
}

void BM_Dot(benchmark::State& state) {
  const auto n = static_cast<std::uint32_t>(state.range(0));
  const auto v = clustered_unit_vectors(2, n, 1, 0.5, 3, 4);
  for (auto _ : state) benchmark::DoNotOptimize(dot(v.data(), v.data() + n, n));
}
BENCHMARK(BM_Dot)->Arg(64)->Arg(768);

void BM_ExactSearch(benchmark::State& state) {
  const auto index = AnnIndex::build_exact(clustered_bank(static_cast<std::size_t>(state.range(0))));
  const auto q = clustered_unit_vectors(64, kDim, 1024, 0.5, 5, 2);
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(index.search(std::span(q.data() + (i++ % 64) * kDim, kDim), 30));
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_ExactSearch)->Arg(10'000)->Arg(100'000);

void BM_QuantizedSearch(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto index = AnnIndex::build_quantized(clustered_bank(rows), IndexParams::scaled_for(rows));
  const auto q = clustered_unit_vectors(64, kDim, 1024, 0.5, 5, 2);
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(index.search(std::span(q.data() + (i++ % 64) * kDim, kDim), 30));
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_QuantizedSearch)->Arg(10'000)->Arg(100'000);

void BM_DecodePatch(benchmark::State& state) {
  const LabelSpec spec{Task::kSegmentation, 4};
  std::vector<std::vector<float>> channels(30, std::vector<float>(5, 0.0f));
  std::vector<ScoredLabel> neighbors;
  for (std::size_t i = 0; i < 30; ++i) {
    channels[i][i % 4] = 1.0f;
    neighbors.push_back({1.0 - 0.01 * double(i), channels[i]});
  }
  for (auto _ : state) benchmark::DoNotOptimize(decode_patch(spec, neighbors, 0.02));
}
BENCHMARK(BM_DecodePatch);

void BM_UpsampleBilinear(benchmark::State& state) {
  const std::vector<float> grid(32 * 32 * 4, 0.25f);
  for (auto _ : state) benchmark::DoNotOptimize(upsample_bilinear(grid, 32, 32, 4, 512, 512));
}
BENCHMARK(BM_UpsampleBilinear);

}  // namespace
}  // namespace nnscene

BENCHMARK_MAIN();
