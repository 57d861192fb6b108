#pragma once

// Evaluation memory bank: L2-normalized patch features paired with patch
// labels, plus the per-image subsampling used to fill it.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "nnscene/feature_store.hpp"
#include "nnscene/random.hpp"

namespace nnscene {

struct Provenance {
  std::uint64_t image_id = 0;
  std::uint32_t epoch = 0;
  std::uint32_t patch_index = 0;
  bool operator==(const Provenance&) const = default;
};

struct MemoryBank {
  std::uint32_t dim = 0;
  LabelSpec spec;
  std::vector<float> keys;    // size() x dim, unit rows
  std::vector<float> values;  // size() x spec.channels()
  std::vector<Provenance> provenance;

  std::size_t size() const noexcept { return provenance.size(); }
  bool empty() const noexcept { return provenance.empty(); }
  std::span<const float> key(std::size_t row) const { return {keys.data() + row * dim, dim}; }
  std::span<const float> value(std::size_t row) const {
    return {values.data() + row * spec.channels(), spec.channels()};
  }
  PatchLabel label(std::size_t row) const { return PatchLabel::from_channels(spec, value(row)); }

  /// Appends a row; the key is L2-normalized here. Throws on a zero key.
  void append(std::span<const float> feature, std::span<const float> label_channels, Provenance from);
  void validate() const;
  bool operator==(const MemoryBank&) const = default;
};

struct SamplerConfig {
  std::uint64_t capacity = 10'240'000;
  std::uint32_t aug_epochs = 2;
  bool downsample = true;
  std::uint64_t seed = 0;
};

struct BankBuildReport {
  /// Patches kept per (image, epoch) when downsampling; 0 otherwise.
  std::uint64_t n_per_image = 0;
  /// Patches dropped because the bank was full (downsample = false).
  std::uint64_t truncated = 0;
};

/// floor(capacity / (num_images * aug_epochs)).
std::uint64_t features_per_image(std::uint64_t capacity, std::uint64_t num_images,
                                 std::uint64_t aug_epochs);

/// Slots needed to store every patch of every image once.
std::uint64_t required_bank_length(std::uint64_t num_images, std::uint64_t height,
                                   std::uint64_t width);

/// Saliency score per patch (lower is kept first):
///   kappa_c     = number of patches whose histogram has mass on class c
///   class_score = sum of kappa_c over classes present in the patch
///   final       = class_score * jitter + 1e6 * [patch has no class]
/// `jitter` holds one draw from U[0,1) per patch.
std::vector<double> segmentation_patch_scores(const PatchLabelGrid& labels,
                                              std::span<const double> jitter);
/// Same, drawing the jitter from `rng` in patch order.
std::vector<double> segmentation_patch_scores(const PatchLabelGrid& labels, Rng& rng);

/// Picks n patch indices. Segmentation: the n lowest final scores (ties go to
/// the lower patch index), in rank order. Depth: a random permutation with
/// valid patches before fully invalid ones, truncated to n.
std::vector<std::uint32_t> select_patches(const PatchLabelGrid& labels, std::size_t n, Rng& rng);

/// Segmentation selection from precomputed scores.
std::vector<std::uint32_t> lowest_scores(std::span<const double> scores, std::size_t n);

/// Builds the bank from the first cfg.aug_epochs epochs of `set`. Rows are
/// concatenated by (epoch, image, selection rank); each (image, epoch) uses
/// its own generator keyed by (seed, image_id, epoch).
MemoryBank build_bank(const FeatureSet& set, const SamplerConfig& cfg,
                      BankBuildReport* report = nullptr, std::size_t threads = 1);

inline constexpr std::string_view kBankMagic = "HBMB0001";

std::vector<std::uint8_t> encode_bank(const MemoryBank& bank);
/// Parses the bank section; `consumed` receives the number of bytes used so a
/// trailing index section can follow.
MemoryBank decode_bank(std::span<const std::uint8_t> bytes, std::size_t* consumed = nullptr);

}  // namespace nnscene
