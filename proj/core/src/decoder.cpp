#include "nnscene/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "nnscene/binary_io.hpp"
#include "nnscene/errors.hpp"
#include "nnscene/parallel.hpp"

namespace nnscene {

void DecodeConfig::validate() const {
  if (k == 0) throw ConfigError("k must be >= 1");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be a positive number");
}

std::vector<double> attention_weights(std::span<const double> scores, double temperature) {
  if (scores.empty()) throw ShapeError("attention over zero neighbors");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  const double top = *std::max_element(scores.begin(), scores.end());
  std::vector<double> w(scores.size());
  double z = 0.0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    w[j] = std::exp((scores[j] - top) / temperature);
    z += w[j];
  }
  for (auto& x : w) x /= z;
  return w;
}

DecodedPatch decode_patch(const LabelSpec& spec, std::span<const ScoredLabel> neighbors, double temperature) {
  std::vector<double> scores(neighbors.size());
  for (std::size_t j = 0; j < neighbors.size(); ++j) {
    if (neighbors[j].channels.size() != spec.channels()) throw ShapeError("neighbor label has the wrong channel count");
    scores[j] = neighbors[j].score;
  }
  const auto w = attention_weights(scores, temperature);
  DecodedPatch out;

  if (spec.task == Task::kSegmentation) {
    const std::uint32_t c_count = spec.num_classes;
    out.values.assign(c_count, 0.0);
    for (std::size_t j = 0; j < neighbors.size(); ++j) {
      for (std::uint32_t c = 0; c < c_count; ++c) out.values[c] += w[j] * neighbors[j].channels[c];
    }
    double real = 0.0;
    for (double v : out.values) real += v;
    if (!(real > 0.0)) {
      std::fill(out.values.begin(), out.values.end(), 1.0 / c_count);
      out.flagged = true;
    } else {
      for (auto& v : out.values) v /= real;
    }
    return out;
  }

  double num = 0.0, den = 0.0;
  for (std::size_t j = 0; j < neighbors.size(); ++j) {
    const double wv = w[j] * neighbors[j].channels[1];
    num += wv * neighbors[j].channels[0];
    den += wv;
  }
  if (!(den > 0.0)) {
    out.values = {0.0};
    out.flagged = true;
  } else {
    out.values = {num / den};
  }
  return out;
}

std::size_t DecodedGrid::flagged_count() const {
  return static_cast<std::size_t>(std::count(flagged.begin(), flagged.end(), std::uint8_t{1}));
}

DecodedGrid decode_image(const FeatureGrid& grid, const AnnIndex& index, const DecodeConfig& cfg) {
  cfg.validate();
  const MemoryBank& bank = index.bank();
  if (grid.num_patches() > 0 && grid.dim != bank.dim) {
    throw ShapeError("feature dim " + std::to_string(grid.dim) + " does not match bank dim " +
                     std::to_string(bank.dim));
  }
  DecodedGrid out;
  out.spec = bank.spec;
  out.height = grid.height;
  out.width = grid.width;
  const std::size_t n = grid.num_patches();
  const std::size_t ch = out.channels();
  out.values.assign(n * ch, 0.0f);
  out.flagged.assign(n, 0);
  if (n == 0) return out;
  grid.validate();

  const auto hits = index.search_batch(grid.features, cfg.k, cfg.search, cfg.threads);
  parallel_for(
      n,
      [&](std::size_t p) {
        std::vector<ScoredLabel> nb;
        nb.reserve(hits[p].size());
        for (const auto& h : hits[p]) nb.push_back({h.score, bank.value(h.row)});
        const auto d = decode_patch(bank.spec, nb, cfg.temperature);
        for (std::size_t c = 0; c < ch; ++c) out.values[p * ch + c] = static_cast<float>(d.values[c]);
        out.flagged[p] = d.flagged;
      },
      cfg.threads);
  return out;
}

std::vector<float> upsample_bilinear(std::span<const float> values, std::uint32_t height, std::uint32_t width,
                                     std::uint32_t channels, std::uint32_t out_h, std::uint32_t out_w) {
  if (out_h == 0 || out_w == 0) throw ConfigError("upsample target dimensions must be positive");
  if (height == 0 || width == 0 || channels == 0) throw ShapeError("cannot upsample an empty raster");
  if (values.size() != std::size_t{height} * width * channels) throw ShapeError("raster size does not match its shape");

  struct Tap {
    std::uint32_t i0, i1;
    double f;
  };
  auto taps = [](std::uint32_t in, std::uint32_t out) {
    std::vector<Tap> t(out);
    const double scale = double(in) / double(out);
    for (std::uint32_t o = 0; o < out; ++o) {
      double src = (o + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, double(in - 1));
      const auto i0 = static_cast<std::uint32_t>(std::floor(src));
      t[o] = {i0, std::min(i0 + 1, in - 1), src - i0};
    }
    return t;
  };
  const auto ty = taps(height, out_h), tx = taps(width, out_w);

  std::vector<float> out(std::size_t{out_h} * out_w * channels);
  for (std::uint32_t y = 0; y < out_h; ++y) {
    const Tap& a = ty[y];
    for (std::uint32_t x = 0; x < out_w; ++x) {
      const Tap& b = tx[x];
      const float* p00 = values.data() + (std::size_t{a.i0} * width + b.i0) * channels;
      const float* p01 = values.data() + (std::size_t{a.i0} * width + b.i1) * channels;
      const float* p10 = values.data() + (std::size_t{a.i1} * width + b.i0) * channels;
      const float* p11 = values.data() + (std::size_t{a.i1} * width + b.i1) * channels;
      float* dst = out.data() + (std::size_t{y} * out_w + x) * channels;
      for (std::uint32_t c = 0; c < channels; ++c) {
        const double top = p00[c] + b.f * (double(p01[c]) - p00[c]);
        const double bot = p10[c] + b.f * (double(p11[c]) - p10[c]);
        dst[c] = static_cast<float>(top + a.f * (bot - top));
      }
    }
  }
  return out;
}

DensePrediction finalize_prediction(std::vector<float> dense, std::uint32_t height, std::uint32_t width,
                                    const LabelSpec& spec) {
  DensePrediction p;
  p.task = spec.task;
  p.height = height;
  p.width = width;
  const std::size_t pixels = std::size_t{height} * width;
  if (spec.task == Task::kDepth) {
    if (dense.size() != pixels) throw ShapeError("depth map size does not match its shape");
    p.depth = std::move(dense);
    return p;
  }
  const std::uint32_t c_count = spec.num_classes;
  if (c_count == 0 || dense.size() != pixels * c_count) throw ShapeError("distribution size does not match its shape");
  p.num_classes = c_count;
  p.classes.resize(pixels);
  for (std::size_t i = 0; i < pixels; ++i) {
    const float* d = dense.data() + i * c_count;
    std::uint32_t best = 0;
    for (std::uint32_t c = 1; c < c_count; ++c) {
      if (d[c] > d[best]) best = c;
    }
    p.classes[i] = static_cast<std::uint16_t>(best);
  }
  p.distribution = std::move(dense);
  return p;
}

DensePrediction predict_image(const FeatureGrid& grid, const AnnIndex& index, const DecodeConfig& cfg,
                              std::uint32_t patch_size) {
  const auto local = decode_image(grid, index, cfg);
  const std::uint32_t oh = grid.height * patch_size, ow = grid.width * patch_size;
  DensePrediction p;
  if (local.values.empty()) {
    p.task = local.spec.task;
    p.num_classes = local.spec.task == Task::kSegmentation ? local.spec.num_classes : 0;
  } else {
    p = finalize_prediction(
        upsample_bilinear(local.values, grid.height, grid.width, static_cast<std::uint32_t>(local.channels()), oh, ow),
        oh, ow, local.spec);
  }
  p.image_id = grid.image_id;
  return p;
}

std::vector<DensePrediction> predict_feature_set(const FeatureSet& set, const AnnIndex& index,
                                                 const DecodeConfig& cfg, std::size_t epoch) {
  if (epoch >= set.num_epochs()) throw ConfigError("feature set has no epoch " + std::to_string(epoch));
  if (set.task != index.bank().spec.task) throw ConfigError("feature set task does not match the bank task");
  if (set.task == Task::kSegmentation && set.num_classes != index.bank().spec.num_classes) {
    throw ConfigError("feature set has " + std::to_string(set.num_classes) + " classes, bank has " +
                      std::to_string(index.bank().spec.num_classes));
  }
  std::vector<DensePrediction> out;
  out.reserve(set.num_images());
  for (const auto& img : set.epochs[epoch]) out.push_back(predict_image(img.grid, index, cfg, set.patch_size));
  return out;
}

std::vector<std::uint8_t> encode_predictions(std::span<const DensePrediction> predictions, bool with_distributions) {
  io::ByteWriter w;
  w.magic(kPredictionMagic);
  const Task task = predictions.empty() ? Task::kSegmentation : predictions.front().task;
  const std::uint32_t classes = predictions.empty() ? 0 : predictions.front().num_classes;
  const bool dist = with_distributions && task == Task::kSegmentation;
  w.put<std::uint8_t>(static_cast<std::uint8_t>(task));
  w.put<std::uint8_t>(dist ? 1 : 0);
  w.put<std::uint32_t>(classes);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(predictions.size()));
  for (const auto& p : predictions) {
    if (p.task != task || p.num_classes != classes) throw Error("predictions mix tasks or class counts");
    w.put<std::uint64_t>(p.image_id);
    w.put<std::uint32_t>(p.height);
    w.put<std::uint32_t>(p.width);
    if (task == Task::kSegmentation) {
      w.put_array<std::uint16_t>(p.classes);
      if (dist) {
        if (p.distribution.size() != p.classes.size() * classes) throw Error("prediction has no distribution to write");
        w.put_array<float>(p.distribution);
      }
    } else {
      w.put_array<float>(p.depth);
    }
  }
  return std::move(w).take();
}

std::vector<DensePrediction> decode_predictions(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(kPredictionMagic, "HBPR");
  const std::uint64_t task_at = r.offset();
  const auto task = r.get<std::uint8_t>("task");
  if (task > 1) throw ParseError("unknown task code " + std::to_string(task), task_at);
  const auto flags = r.get<std::uint8_t>("flags");
  const auto classes = r.get<std::uint32_t>("num_classes");
  const auto count = r.get<std::uint32_t>("num_images");
  std::vector<DensePrediction> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    DensePrediction p;
    p.task = static_cast<Task>(task);
    p.num_classes = classes;
    p.image_id = r.get<std::uint64_t>("image_id");
    p.height = r.get<std::uint32_t>("height");
    p.width = r.get<std::uint32_t>("width");
    const std::uint64_t px = io::checked_mul(p.height, p.width, r.offset());
    if (px * 2 > r.remaining()) throw ParseError("truncated prediction raster", r.offset());
    if (p.task == Task::kSegmentation) {
      p.classes.resize(px);
      r.get_array<std::uint16_t>(p.classes, "class map");
      if (flags & 1) {
        p.distribution.resize(io::checked_mul(px, classes, r.offset()));
        r.get_array<float>(p.distribution, "distribution");
      }
    } else {
      p.depth.resize(px);
      r.get_array<float>(p.depth, "depth map");
    }
    out.push_back(std::move(p));
  }
  if (!r.at_end()) throw ParseError("trailing bytes after the last prediction", r.offset());
  return out;
}

void write_predictions(const std::filesystem::path& path, std::span<const DensePrediction> predictions,
                       bool with_distributions) {
  io::write_file(path, encode_predictions(predictions, with_distributions));
}

std::vector<DensePrediction> read_predictions(const std::filesystem::path& path) {
  return decode_predictions(io::read_file(path));
}

}  // namespace nnscene
