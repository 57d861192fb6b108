#pragma once

// Lookup-latency sweep over memory-bank sizes: one dense image (H x W query
// patches) is decoded against synthetic banks of increasing length, for the
// exact and the quantized index. Bank and index construction are excluded
// from the timings.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nnscene/ann_index.hpp"

namespace nnscene {

struct BenchRow {
  std::uint64_t bank_size = 0;
  IndexMode index_mode = IndexMode::kExact;
  std::uint32_t k = 0;
  std::uint32_t leaves_to_search = 0;  // 0 for the exact index
  std::uint32_t reorder_n = 0;         // 0 for the exact index
  double mean_latency_us = 0.0;
  double p50_us = 0.0;
  double p95_us = 0.0;
  /// Against the exact index; NaN when the size exceeds recall_max_size.
  double recall_at_k = 0.0;
  std::uint64_t seed = 0;

  bool operator==(const BenchRow& o) const;
};

struct SweepOptions {
  std::vector<IndexMode> modes{IndexMode::kExact, IndexMode::kQuantized};
  std::uint32_t dim = 64;
  /// Query grid of one image; 32 x 32 patches for a 512-pixel input.
  std::uint32_t grid_height = 32;
  std::uint32_t grid_width = 32;
  std::size_t k = 30;
  double temperature = 0.02;
  /// Used for every size when set; otherwise IndexParams::scaled_for(size).
  std::optional<IndexParams> index_params;
  std::uint64_t seed = 0;
  std::size_t clusters = 1024;
  double spread = 0.5;
  std::size_t recall_max_size = 1'000'000;
  /// Sweep is rejected up front when the largest size would need more.
  std::uint64_t memory_budget_bytes = 3ull << 30;
  std::uint32_t min_samples = 3;
  std::uint32_t max_samples = 15;
  /// Sampling stops once min_samples are taken and this much time is spent.
  double time_budget_s = 2.0;
  /// A sample repeats the decode until it lasts at least this long.
  double min_sample_s = 0.002;
  std::size_t threads = 1;
};

/// Rough peak bytes for a bank of `size` rows plus its quantized index.
std::uint64_t estimate_bench_bytes(std::uint64_t size, std::uint32_t dim);

/// One row per (size, mode), sizes in the given (ascending) order. Throws
/// ConfigError for unsorted or zero sizes and for sizes over the budget.
std::vector<BenchRow> run_latency_sweep(std::span<const std::uint64_t> sizes, const SweepOptions& options,
                                        const std::function<void(const BenchRow&)>& on_row = {});

/// Header row with the BenchRow field names, then one line per row.
std::string emit_csv(std::span<const BenchRow> rows);
std::vector<BenchRow> parse_csv(std::string_view text);

/// Self-contained SVG: log-x bank size, linear-y mean latency, one polyline
/// per index mode. Throws ConfigError for an empty input.
std::string render_svg(std::span<const BenchRow> rows);
/// Writes the SVG to `path` and the CSV next to it (extension .csv).
void emit_plot(std::span<const BenchRow> rows, const std::filesystem::path& path);

}  // namespace nnscene
