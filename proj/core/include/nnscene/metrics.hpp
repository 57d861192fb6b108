#pragma once

// Segmentation mIoU from a dataset-level confusion matrix and depth RMSE over
// valid pixels.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nnscene/decoder.hpp"
#include "nnscene/feature_store.hpp"

namespace nnscene {

/// counts[gt * C + pred] over non-ignored pixels.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::uint32_t num_classes, std::uint16_t ignore_id = kIgnoreClass);

  /// Throws ShapeError on size mismatch and for class ids >= num_classes that
  /// are not the ignore id.
  void add(std::span<const std::uint16_t> pred, std::span<const std::uint16_t> gt);
  void merge(const ConfusionMatrix& other);

  std::uint32_t num_classes() const noexcept { return num_classes_; }
  std::uint64_t at(std::uint32_t gt, std::uint32_t pred) const { return counts_[std::size_t{gt} * num_classes_ + pred]; }
  std::uint64_t evaluated() const noexcept { return evaluated_; }
  std::uint64_t ignored() const noexcept { return ignored_; }

 private:
  std::uint32_t num_classes_;
  std::uint16_t ignore_id_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t evaluated_ = 0;
  std::uint64_t ignored_ = 0;
};

struct EvalReport {
  Task task = Task::kSegmentation;
  /// IoU per class; NaN for classes absent from both prediction and ground truth.
  std::vector<double> class_iou;
  double miou = 0.0;
  std::uint32_t classes_evaluated = 0;
  double rmse = 0.0;
  std::uint64_t pixels_used = 0;
  std::uint64_t pixels_ignored = 0;

  /// One "key=value" per line.
  std::string to_key_value() const;
  /// Header row plus one data row.
  std::string to_csv() const;
};

/// IoU_c = TP / (TP + FP + FN) over the global matrix; mean over classes
/// present in prediction or ground truth. Throws NumericError when no pixel
/// was evaluated.
EvalReport mean_iou(const ConfusionMatrix& cm);
EvalReport mean_iou(std::span<const std::vector<std::uint16_t>> pred, std::span<const std::vector<std::uint16_t>> gt,
                    std::uint32_t num_classes, std::uint16_t ignore_id = kIgnoreClass);

/// sqrt(mean (pred - gt)^2) over pixels with valid != 0, pooled over images.
/// Throws NumericError when no pixel is valid.
EvalReport rmse_depth(std::span<const std::vector<float>> pred, std::span<const std::vector<float>> gt,
                      std::span<const std::vector<std::uint8_t>> valid);

/// Scores predictions against the pixel labels of `images`, in order.
EvalReport evaluate_predictions(std::span<const DensePrediction> predictions, std::span<const LabeledImage> images,
                                std::uint32_t num_classes);

}  // namespace nnscene
