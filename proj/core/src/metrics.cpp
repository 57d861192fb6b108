#include "nnscene/metrics.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "nnscene/errors.hpp"

namespace nnscene {
namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(std::uint32_t num_classes, std::uint16_t ignore_id)
    : num_classes_(num_classes), ignore_id_(ignore_id), counts_(std::size_t{num_classes} * num_classes, 0) {
  if (num_classes == 0) throw ConfigError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(std::span<const std::uint16_t> pred, std::span<const std::uint16_t> gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                     std::to_string(gt.size()));
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore_id_) {
      ++ignored_;
      continue;
    }
    if (gt[i] >= num_classes_ || pred[i] >= num_classes_) {
      throw ShapeError("class id out of range at pixel " + std::to_string(i));
    }
    ++counts_[std::size_t{gt[i]} * num_classes_ + pred[i]];
    ++evaluated_;
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes_ != num_classes_) throw ShapeError("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  evaluated_ += other.evaluated_;
  ignored_ += other.ignored_;
}

EvalReport mean_iou(const ConfusionMatrix& cm) {
  if (cm.evaluated() == 0) throw NumericError("mIoU undefined: zero evaluated pixels (all ignored)");
  const std::uint32_t c_count = cm.num_classes();
  EvalReport r;
  r.task = Task::kSegmentation;
  r.pixels_used = cm.evaluated();
  r.pixels_ignored = cm.ignored();
  r.class_iou.assign(c_count, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  for (std::uint32_t c = 0; c < c_count; ++c) {
    std::uint64_t gt_total = 0, pred_total = 0;
    for (std::uint32_t o = 0; o < c_count; ++o) {
      gt_total += cm.at(c, o);
      pred_total += cm.at(o, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t uni = gt_total + pred_total - tp;
    if (uni == 0) continue;
    r.class_iou[c] = double(tp) / double(uni);
    sum += r.class_iou[c];
    ++r.classes_evaluated;
  }
  r.miou = sum / r.classes_evaluated;
  return r;
}

EvalReport mean_iou(std::span<const std::vector<std::uint16_t>> pred, std::span<const std::vector<std::uint16_t>> gt,
                    std::uint32_t num_classes, std::uint16_t ignore_id) {
  if (pred.size() != gt.size()) throw ShapeError("prediction and ground-truth image counts differ");
  ConfusionMatrix cm(num_classes, ignore_id);
  for (std::size_t i = 0; i < pred.size(); ++i) cm.add(pred[i], gt[i]);
  return mean_iou(cm);
}

EvalReport rmse_depth(std::span<const std::vector<float>> pred, std::span<const std::vector<float>> gt,
                      std::span<const std::vector<std::uint8_t>> valid) {
  if (pred.size() != gt.size() || pred.size() != valid.size()) throw ShapeError("depth image counts differ");
  EvalReport r;
  r.task = Task::kDepth;
  double sq = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].size() != gt[i].size() || valid[i].size() != gt[i].size()) {
      throw ShapeError("depth map " + std::to_string(i) + " shapes differ");
    }
    for (std::size_t p = 0; p < gt[i].size(); ++p) {
      if (!valid[i][p]) {
        ++r.pixels_ignored;
        continue;
      }
      const double d = double(pred[i][p]) - gt[i][p];
      sq += d * d;
      ++r.pixels_used;
    }
  }
  if (r.pixels_used == 0) throw NumericError("RMSE undefined: zero valid depth pixels");
  r.rmse = std::sqrt(sq / double(r.pixels_used));
  return r;
}

EvalReport evaluate_predictions(std::span<const DensePrediction> predictions, std::span<const LabeledImage> images,
                                std::uint32_t num_classes) {
  if (predictions.size() != images.size()) throw ShapeError("prediction count does not match image count");
  if (images.empty()) throw NumericError("nothing to evaluate");
  if (predictions.front().task == Task::kSegmentation) {
    ConfusionMatrix cm(num_classes);
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (images[i].labels.task != Task::kSegmentation) throw ConfigError("ground truth is not segmentation");
      cm.add(predictions[i].classes, images[i].labels.classes);
    }
    return mean_iou(cm);
  }
  std::vector<std::vector<float>> pred, gt;
  std::vector<std::vector<std::uint8_t>> valid;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].labels.task != Task::kDepth) throw ConfigError("ground truth is not depth");
    pred.push_back(predictions[i].depth);
    gt.push_back(images[i].labels.depth);
    valid.push_back(images[i].labels.valid);
  }
  return rmse_depth(pred, gt, valid);
}

std::string EvalReport::to_key_value() const {
  std::ostringstream os;
  os << "task=" << to_string(task) << "\n";
  if (task == Task::kSegmentation) {
    os << "miou=" << fmt(miou) << "\n";
    os << "classes_evaluated=" << classes_evaluated << "\n";
    for (std::size_t c = 0; c < class_iou.size(); ++c) os << "iou_" << c << "=" << fmt(class_iou[c]) << "\n";
  } else {
    os << "rmse=" << fmt(rmse) << "\n";
  }
  os << "pixels_used=" << pixels_used << "\n";
  os << "pixels_ignored=" << pixels_ignored << "\n";
  return os.str();
}

std::string EvalReport::to_csv() const {
  std::ostringstream head, row;
  head << "task,miou,classes_evaluated,rmse,pixels_used,pixels_ignored";
  row << to_string(task) << "," << fmt(miou) << "," << classes_evaluated << "," << fmt(rmse) << "," << pixels_used
      << "," << pixels_ignored;
  for (std::size_t c = 0; c < class_iou.size(); ++c) {
    head << ",iou_" << c;
    row << "," << fmt(class_iou[c]);
  }
  return head.str() + "\n" + row.str() + "\n";
}

}  // namespace nnscene
