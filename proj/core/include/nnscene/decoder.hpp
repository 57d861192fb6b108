#pragma once

// Retrieval decoding: every query patch attends over its top-k bank neighbors
// with a temperature-scaled softmax on cosine similarity and takes the
// weighted combination of their labels. Patch predictions are upsampled to
// pixel resolution with half-pixel-center bilinear interpolation.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "nnscene/ann_index.hpp"
#include "nnscene/feature_store.hpp"

namespace nnscene {

struct DecodeConfig {
  std::size_t k = 30;
  double temperature = 0.02;
  SearchParams search;
  std::size_t threads = 1;

  void validate() const;
};

/// One retrieved neighbor: cosine score and label channels (LabelSpec layout).
struct ScoredLabel {
  double score = 0.0;
  std::span<const float> channels;
};

/// softmax(scores / temperature), max-subtracted, in double.
std::vector<double> attention_weights(std::span<const double> scores, double temperature);

/// Decoded label of one patch.
///   segmentation: num_classes probabilities (ignore mass removed, renormalized)
///   depth:        {mean_depth}
/// `flagged` marks a segmentation patch whose neighbors carry only ignore
/// mass (output is uniform) or a depth patch whose neighbors are all invalid
/// (output is 0).
struct DecodedPatch {
  std::vector<double> values;
  bool flagged = false;
};

/// Depth neighbors are weighted by attention * valid_fraction and
/// renormalized, so invalid pixels never pull the estimate toward 0.
DecodedPatch decode_patch(const LabelSpec& spec, std::span<const ScoredLabel> neighbors,
                          double temperature);

/// Patch-resolution output of decode_image: height x width x channels with
/// channels = num_classes (segmentation) or 1 (depth).
struct DecodedGrid {
  LabelSpec spec;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<float> values;
  std::vector<std::uint8_t> flagged;

  std::size_t channels() const noexcept {
    return spec.task == Task::kSegmentation ? spec.num_classes : 1;
  }
  std::size_t flagged_count() const;
};

DecodedGrid decode_image(const FeatureGrid& grid, const AnnIndex& index, const DecodeConfig& cfg);

/// Channel-wise bilinear resize of an H x W x C raster to out_h x out_w with
/// half-pixel centers (align_corners = false); samples outside the source
/// are clamped to the edge.
std::vector<float> upsample_bilinear(std::span<const float> values, std::uint32_t height,
                                     std::uint32_t width, std::uint32_t channels, std::uint32_t out_h,
                                     std::uint32_t out_w);

struct DensePrediction {
  Task task = Task::kSegmentation;
  std::uint64_t image_id = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t num_classes = 0;
  std::vector<float> distribution;    // segmentation: H' x W' x num_classes
  std::vector<std::uint16_t> classes;  // segmentation: argmax per pixel
  std::vector<float> depth;            // depth: H' x W'

  bool operator==(const DensePrediction&) const = default;
};

/// Segmentation: argmax per pixel (ties to the lowest class) and the
/// distribution kept alongside. Depth: copied unchanged.
DensePrediction finalize_prediction(std::vector<float> dense, std::uint32_t height, std::uint32_t width,
                                    const LabelSpec& spec);

/// decode_image + upsample (patch_size x) + finalize.
DensePrediction predict_image(const FeatureGrid& grid, const AnnIndex& index, const DecodeConfig& cfg,
                              std::uint32_t patch_size = kPatchSize);

/// Predictions for every image of one epoch of `set`.
std::vector<DensePrediction> predict_feature_set(const FeatureSet& set, const AnnIndex& index,
                                                 const DecodeConfig& cfg, std::size_t epoch = 0);

/// HBPR prediction file: magic "HBPR0001", task u8, flags u8 (bit 0: raw
/// distributions present), num_classes u32, num_images u32; per image
/// image_id u64, H' u32, W' u32, then u16 class map or f32 depth map, then the
/// f32 distribution when flagged.
inline constexpr std::string_view kPredictionMagic = "HBPR0001";

std::vector<std::uint8_t> encode_predictions(std::span<const DensePrediction> predictions,
                                             bool with_distributions);
std::vector<DensePrediction> decode_predictions(std::span<const std::uint8_t> bytes);
void write_predictions(const std::filesystem::path& path, std::span<const DensePrediction> predictions,
                       bool with_distributions);
std::vector<DensePrediction> read_predictions(const std::filesystem::path& path);

}  // namespace nnscene
