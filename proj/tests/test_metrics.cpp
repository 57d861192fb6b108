#include <gtest/gtest.h>

#include <cmath>

#include "nnscene/errors.hpp"
#include "nnscene/metrics.hpp"
#include "test_support.hpp"

namespace nnscene {
namespace {

using testing::for_all;
using testing::Gen;
using Maps = std::vector<std::vector<std::uint16_t>>;

TEST(MeanIou, PerfectPrediction) {
  const Maps gt{{0, 1, 2, 2, 1}};
  const auto r = mean_iou(gt, gt, 3);
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_EQ(r.classes_evaluated, 3u);
}

TEST(MeanIou, HalfAndHalfPredictedAllA) {
  const Maps gt{{0, 0, 1, 1}}, pred{{0, 0, 0, 0}};
  const auto r = mean_iou(pred, gt, 2);
  EXPECT_DOUBLE_EQ(r.class_iou[0], 0.5);
  EXPECT_DOUBLE_EQ(r.class_iou[1], 0.0);
  EXPECT_DOUBLE_EQ(r.miou, 0.25);
}

TEST(MeanIou, AbsentClassExcluded) {
  const Maps gt{{0, 1}}, pred{{0, 1}};
  const auto r = mean_iou(pred, gt, 4);
  EXPECT_TRUE(std::isnan(r.class_iou[2]));
  EXPECT_TRUE(std::isnan(r.class_iou[3]));
  EXPECT_EQ(r.classes_evaluated, 2u);
  EXPECT_EQ(r.miou, 1.0);
}

TEST(MeanIou, IgnoredPixelsSkippedAndCounted) {
  const Maps gt{{0, kIgnoreClass, 1, kIgnoreClass}}, pred{{0, 1, 1, 0}};
  const auto r = mean_iou(pred, gt, 2);
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_EQ(r.pixels_used, 2u);
  EXPECT_EQ(r.pixels_ignored, 2u);
}

TEST(MeanIou, AllIgnoredIsAnError) {
  const Maps gt{{kIgnoreClass, kIgnoreClass}}, pred{{0, 1}};
  EXPECT_THROW(mean_iou(pred, gt, 2), NumericError);
}

TEST(MeanIou, ShapeMismatchRejected) {
  const Maps gt{{0, 1}}, pred{{0}};
  EXPECT_THROW(mean_iou(pred, gt, 2), ShapeError);
  const Maps two{{0, 1}, {0, 1}};
  EXPECT_THROW(mean_iou(two, gt, 2), ShapeError);
  const Maps out_of_range{{0, 5}};
  EXPECT_THROW(mean_iou(out_of_range, gt, 2), ShapeError);
}

/// IoU from explicit per-pixel counting.
double oracle_miou(const Maps& pred, const Maps& gt, std::uint32_t classes) {
  double total = 0.0;
  int present = 0;
  for (std::uint32_t c = 0; c < classes; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      for (std::size_t p = 0; p < gt[i].size(); ++p) {
        if (gt[i][p] == kIgnoreClass) continue;
        tp += pred[i][p] == c && gt[i][p] == c;
        fp += pred[i][p] == c && gt[i][p] != c;
        fn += pred[i][p] != c && gt[i][p] == c;
      }
    }
    if (tp + fp + fn > 0) {
      total += tp / (tp + fp + fn);
      ++present;
    }
  }
  return total / present;
}

Maps random_maps(Gen& g, std::size_t images, std::uint32_t classes, bool ignore) {
  Maps m(images);
  for (auto& img : m) {
    img.resize(static_cast<std::size_t>(g.integer(1, 200)));
    for (auto& c : img) c = ignore && g.coin(0.1) ? kIgnoreClass : static_cast<std::uint16_t>(g.integer(0, classes - 1));
  }
  return m;
}

TEST(MeanIouProperty, MatchesCountingOracle) {
  for_all(60, 71, [](Gen& g) {
    const auto classes = static_cast<std::uint32_t>(g.integer(1, 6));
    const auto images = static_cast<std::size_t>(g.integer(1, 4));
    const auto gt = random_maps(g, images, classes, true);
    Maps pred = gt;
    for (auto& img : pred) {
      for (auto& c : img) c = static_cast<std::uint16_t>(g.integer(0, classes - 1));
    }
    EXPECT_NEAR(mean_iou(pred, gt, classes).miou, oracle_miou(pred, gt, classes), 1e-12);
  });
}

TEST(MeanIouProperty, InvariantUnderRelabeling) {
  for_all(40, 72, [](Gen& g) {
    const auto classes = static_cast<std::uint32_t>(g.integer(2, 6));
    const auto gt = random_maps(g, 2, classes, true);
    const auto pred = random_maps(g, 2, classes, false);
    Maps pred2 = pred, gt2 = gt;
    for (std::size_t i = 0; i < 2; ++i) {
      pred2[i].resize(gt[i].size());
      for (std::size_t p = 0; p < gt[i].size(); ++p) pred2[i][p] = static_cast<std::uint16_t>(p % classes);
    }
    std::vector<std::uint16_t> perm(classes);
    for (std::uint32_t c = 0; c < classes; ++c) perm[c] = static_cast<std::uint16_t>((c + 1) % classes);
    Maps pp = pred2, gp = gt2;
    for (auto& img : pp) {
      for (auto& c : img) c = perm[c];
    }
    for (auto& img : gp) {
      for (auto& c : img) {
        if (c != kIgnoreClass) c = perm[c];
      }
    }
    EXPECT_NEAR(mean_iou(pred2, gt2, classes).miou, mean_iou(pp, gp, classes).miou, 1e-12);
  });
}

TEST(MeanIouProperty, PoolingEqualsConcatenation) {
  for_all(40, 73, [](Gen& g) {
    const auto classes = static_cast<std::uint32_t>(g.integer(1, 5));
    const auto gt = random_maps(g, 3, classes, true);
    Maps pred = gt;
    for (auto& img : pred) {
      for (auto& c : img) c = static_cast<std::uint16_t>(g.integer(0, classes - 1));
    }
    Maps cat_p(1), cat_g(1);
    for (std::size_t i = 0; i < 3; ++i) {
      cat_p[0].insert(cat_p[0].end(), pred[i].begin(), pred[i].end());
      cat_g[0].insert(cat_g[0].end(), gt[i].begin(), gt[i].end());
    }
    EXPECT_NEAR(mean_iou(pred, gt, classes).miou, mean_iou(cat_p, cat_g, classes).miou, 1e-9);
    ConfusionMatrix merged(classes), whole(classes);
    for (std::size_t i = 0; i < 3; ++i) {
      ConfusionMatrix part(classes);
      part.add(pred[i], gt[i]);
      merged.merge(part);
    }
    whole.add(cat_p[0], cat_g[0]);
    for (std::uint32_t a = 0; a < classes; ++a) {
      for (std::uint32_t b = 0; b < classes; ++b) EXPECT_EQ(merged.at(a, b), whole.at(a, b));
    }
  });
}

using DMaps = std::vector<std::vector<float>>;
using VMaps = std::vector<std::vector<std::uint8_t>>;

TEST(Rmse, Examples) {
  const DMaps gt{{1.0f, 2.0f, 3.0f}};
  const VMaps valid{{1, 1, 1}};
  EXPECT_EQ(rmse_depth(gt, gt, valid).rmse, 0.0);
  const DMaps off{{2.0f, 3.0f, 4.0f}};
  EXPECT_DOUBLE_EQ(rmse_depth(off, gt, valid).rmse, 1.0);
  const DMaps p2{{1.0f, 4.0f}}, g2{{1.0f, 2.0f}};
  EXPECT_NEAR(rmse_depth(p2, g2, VMaps{{1, 1}}).rmse, std::sqrt(2.0), 1e-12);
}

TEST(Rmse, MaskedPixelsIgnored) {
  const DMaps pred{{1.0f, 100.0f}}, gt{{1.0f, 0.0f}};
  const auto r = rmse_depth(pred, gt, VMaps{{1, 0}});
  EXPECT_EQ(r.rmse, 0.0);
  EXPECT_EQ(r.pixels_used, 1u);
  EXPECT_EQ(r.pixels_ignored, 1u);
  EXPECT_THROW(rmse_depth(pred, gt, VMaps{{0, 0}}), NumericError);
  EXPECT_THROW(rmse_depth(pred, DMaps{{1.0f}}, VMaps{{1}}), ShapeError);
}

TEST(RmseProperty, ShiftInvariantAndPooled) {
  for_all(40, 74, [](Gen& g) {
    DMaps pred(3), gt(3);
    VMaps valid(3);
    DMaps cat_p(1), cat_g(1);
    VMaps cat_v(1);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto n = static_cast<std::size_t>(g.integer(1, 50));
      for (std::size_t p = 0; p < n; ++p) {
        pred[i].push_back(static_cast<float>(g.uniform(0, 10)));
        gt[i].push_back(static_cast<float>(g.uniform(0, 10)));
        valid[i].push_back(p == 0 || g.coin(0.7));
      }
      cat_p[0].insert(cat_p[0].end(), pred[i].begin(), pred[i].end());
      cat_g[0].insert(cat_g[0].end(), gt[i].begin(), gt[i].end());
      cat_v[0].insert(cat_v[0].end(), valid[i].begin(), valid[i].end());
    }
    const double base = rmse_depth(pred, gt, valid).rmse;
    EXPECT_NEAR(base, rmse_depth(cat_p, cat_g, cat_v).rmse, 1e-9);
    DMaps sp = pred, sg = gt;
    for (std::size_t i = 0; i < 3; ++i) {
      for (auto& x : sp[i]) x += 0.5f;
      for (auto& x : sg[i]) x += 0.5f;
    }
    EXPECT_NEAR(base, rmse_depth(sp, sg, valid).rmse, 1e-5);
  });
}

TEST(EvalReport, TextFormats) {
  const Maps gt{{0, 0, 1, 1}}, pred{{0, 0, 0, 0}};
  const auto r = mean_iou(pred, gt, 2);
  const auto kv = r.to_key_value();
  EXPECT_NE(kv.find("miou=0.25\n"), std::string::npos);
  EXPECT_NE(kv.find("iou_1=0\n"), std::string::npos);
  const auto csv = r.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "task,miou,classes_evaluated,rmse,pixels_used,pixels_ignored,iou_0,iou_1");
}

}  // namespace
}  // namespace nnscene
