#pragma once

// Cosine top-k search over memory-bank keys.
//
// Two modes share one search interface:
//   exact      brute-force scan of every key.
//   quantized  spherical k-means partition into leaves; every key is also
//              stored as 4-bit codes, one per block of dims_per_block
//              dimensions (16-center codebook per block). A query scores the
//              codes of its leaves_to_search closest leaves with lookup
//              tables, keeps the reorder_n best candidates and rescores those
//              exactly against the stored keys.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "nnscene/memory_bank.hpp"

namespace nnscene {

enum class IndexMode : std::uint8_t { kExact = 0, kQuantized = 1 };

std::string_view to_string(IndexMode mode);
IndexMode parse_index_mode(std::string_view name);

inline constexpr std::uint32_t kCodebookSize = 16;

struct IndexParams {
  std::uint32_t num_leaves = 512;
  std::uint32_t leaves_to_search = 32;
  std::uint32_t dims_per_block = 4;
  std::uint32_t reorder_n = 120;
  std::uint32_t kmeans_iters = 10;
  std::uint64_t seed = 0;
  /// Rows used to train the partition and codebooks; 0 means
  /// min(|M|, kDefaultTrainSample).
  std::uint64_t train_sample = 0;

  static constexpr std::uint64_t kDefaultTrainSample = 262'144;

  /// Values used for large banks (>= 10 * 512^2 rows).
  static IndexParams large_bank();
  /// Same shape scaled down: num_leaves = max(1, round(sqrt(|M|) / 2)) and
  /// leaves_to_search keeps the 32/512 probe fraction.
  static IndexParams scaled_for(std::size_t bank_size);

  void validate(std::uint32_t dim, std::size_t bank_size) const;
  bool operator==(const IndexParams&) const = default;
};

/// Query-time overrides; 0 keeps the build-time value.
struct SearchParams {
  std::uint32_t leaves_to_search = 0;
  std::uint32_t reorder_n = 0;
};

struct Neighbor {
  std::uint32_t row = 0;
  float score = 0.0f;  // unscaled cosine similarity
  bool operator==(const Neighbor&) const = default;
};

class AnnIndex {
 public:
  static AnnIndex build_exact(std::shared_ptr<const MemoryBank> bank);
  static AnnIndex build_quantized(std::shared_ptr<const MemoryBank> bank, const IndexParams& params,
                                  std::size_t threads = 1);

  /// Top min(k, |M|) rows by cosine, scores descending, ties to the lower row.
  /// Throws on a zero or non-finite query.
  std::vector<Neighbor> search(std::span<const float> query, std::size_t k,
                               const SearchParams& overrides = {}) const;
  /// `queries` holds num_queries rows of dim floats.
  std::vector<std::vector<Neighbor>> search_batch(std::span<const float> queries, std::size_t k,
                                                  const SearchParams& overrides = {},
                                                  std::size_t threads = 1) const;

  IndexMode mode() const noexcept { return mode_; }
  const IndexParams& params() const noexcept { return params_; }
  const MemoryBank& bank() const noexcept { return *bank_; }
  std::shared_ptr<const MemoryBank> bank_ptr() const noexcept { return bank_; }
  std::uint32_t dim() const noexcept { return bank_->dim; }

  std::uint32_t num_leaves() const noexcept { return num_leaves_; }
  std::uint32_t num_blocks() const noexcept { return num_blocks_; }
  std::span<const float> centroid(std::uint32_t leaf) const;
  std::span<const std::uint32_t> leaf_rows(std::uint32_t leaf) const;
  std::span<const float> codebook(std::uint32_t block) const;
  std::uint8_t code(std::uint32_t row, std::uint32_t block) const;
  /// Concatenated codebook centers selected by a row's codes.
  std::vector<float> reconstruct(std::uint32_t row) const;

  /// HBIX section (appended after the bank section in a bank file).
  std::vector<std::uint8_t> encode() const;
  static AnnIndex decode(std::span<const std::uint8_t> bytes, std::shared_ptr<const MemoryBank> bank);

 private:
  AnnIndex() = default;

  std::vector<Neighbor> search_quantized(const float* unit_query, std::size_t k, std::uint32_t probe,
                                         std::uint32_t reorder, std::vector<float>& lut) const;

  IndexMode mode_ = IndexMode::kExact;
  IndexParams params_;
  std::shared_ptr<const MemoryBank> bank_;
  std::uint32_t num_leaves_ = 0;
  std::uint32_t num_blocks_ = 0;
  std::uint32_t code_bytes_ = 0;
  std::vector<float> centroids_;             // num_leaves x dim
  std::vector<std::uint32_t> leaf_offsets_;  // num_leaves + 1
  std::vector<std::uint32_t> leaf_rows_;     // rows grouped by leaf
  std::vector<std::uint32_t> row_slot_;      // row -> position in leaf_rows_
  std::vector<float> codebooks_;             // num_blocks x 16 x dims_per_block
  std::vector<std::uint8_t> codes_;          // leaf_rows_ order, code_bytes_ per row
};

inline AnnIndex build_exact(std::shared_ptr<const MemoryBank> bank) {
  return AnnIndex::build_exact(std::move(bank));
}
inline AnnIndex build_quantized(std::shared_ptr<const MemoryBank> bank, const IndexParams& params) {
  return AnnIndex::build_quantized(std::move(bank), params);
}
inline std::vector<Neighbor> search(const AnnIndex& index, std::span<const float> query, std::size_t k,
                                    const SearchParams& overrides = {}) {
  return index.search(query, k, overrides);
}

/// |ids(approx) ∩ ids(exact)| / k. Throws ShapeError when either list is
/// longer than k or the exact list is shorter than k.
double recall_at_k(std::span<const Neighbor> approx, std::span<const Neighbor> exact, std::size_t k);

/// Bank file: HBMB section, optionally followed by an HBIX section.
struct BankFile {
  std::shared_ptr<const MemoryBank> bank;
  std::optional<AnnIndex> index;
};
void write_bank_file(const std::filesystem::path& path, const MemoryBank& bank, const AnnIndex* index);
BankFile read_bank_file(const std::filesystem::path& path);
BankFile decode_bank_file(std::span<const std::uint8_t> bytes);

}  // namespace nnscene
