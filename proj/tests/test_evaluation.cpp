#include <gtest/gtest.h>

#include "gfss/evaluation.hpp"
#include "support.hpp"

using namespace gfss;

namespace {

ClassTaxonomy four_classes() { return split_folds({1, 2, 3, 4}, 2, 1); }  // base 1,2 novel 3,4

}  // namespace

TEST(Metrics, PublishedHarmonicMeans) {
  EXPECT_NEAR(harmonic_mean(75.23, 43.93), 55.47, 0.01);
  EXPECT_NEAR(harmonic_mean(75.73, 57.00), 65.04, 0.01);
  EXPECT_NEAR(harmonic_mean(54.81, 21.83), 31.22, 0.01);
  EXPECT_NEAR(harmonic_mean(55.68, 31.62), 40.33, 0.01);
}

TEST(Metrics, WeightedMeanGroupsBackgroundWithBase) {
  EXPECT_NEAR(weighted_mean(75.23, 43.93, 15, 5), 67.78, 0.01);
  EXPECT_NEAR(weighted_mean(75.73, 57.00, 15, 5), 71.28, 0.02);
  EXPECT_NEAR(weighted_mean(75.23, 43.93, 15, 5), (16 * 75.23 + 5 * 43.93) / 21, 1e-12);
  EXPECT_NEAR(weighted_mean(10, 20, 3, 1, false), 12.5, 1e-12);
}

TEST(Metrics, EqualInputsAndZeroes) {
  Rng rng(1, "equal");
  for (int trial = 0; trial < 100; ++trial) {
    const double x = rng.uniform(0, 100);
    const auto r = metrics_from_summary(x, x, 1 + rng.index(20), 1 + rng.index(20));
    EXPECT_NEAR(r.h_mean, x, 1e-9);
    EXPECT_NEAR(r.mean_metric, x, 1e-9);
  }
  EXPECT_EQ(harmonic_mean(0, 0), 0.0);
  EXPECT_EQ(harmonic_mean(50, 0), 0.0);
}

TEST(Metrics, HarmonicMeanNeverExceedsArithmetic) {
  Rng rng(2, "hm-am");
  for (int trial = 0; trial < 1000; ++trial) {
    const double a = rng.uniform(0, 100), b = rng.uniform(0, 100);
    EXPECT_LE(harmonic_mean(a, b), 0.5 * (a + b) + 1e-12);
    EXPECT_GE(harmonic_mean(a, b), std::min(a, b) - 1e-12);
  }
}

TEST(Confusion, PerfectPredictionIsDiagonal) {
  Rng rng(3);
  const auto tax = four_classes();
  const auto mask = fixtures::random_mask(10, 10, 4, rng);
  ConfusionMatrix cm(5);
  accumulate_confusion(mask, mask, tax, cm);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      if (i != j) EXPECT_EQ(cm(i, j), 0u);
  const auto r = compute_metrics(cm, tax);
  for (const auto& v : r.iou_per_class)
    if (v) EXPECT_DOUBLE_EQ(*v, 100.0);
}

TEST(Confusion, SingleClassPredictionFillsOneColumn) {
  Rng rng(4);
  const auto tax = four_classes();
  const auto mask = fixtures::random_mask(10, 10, 4, rng);
  ConfusionMatrix cm(5);
  accumulate_confusion(Tensor<int>(mask.shape(), 2), mask, tax, cm);
  for (std::size_t j = 0; j < 5; ++j)
    if (j != 2) EXPECT_EQ(cm.col_sum(j), 0u);
}

TEST(Confusion, AccumulationIsAssociative) {
  Rng rng(5, "assoc");
  const auto tax = four_classes();
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = fixtures::random_mask(8, 8, 4, rng), b = fixtures::random_mask(8, 8, 4, rng);
    auto pa = fixtures::random_mask(8, 8, 4, rng), pb = fixtures::random_mask(8, 8, 4, rng);
    for (auto* p : {&pa, &pb})
      for (auto& v : p->values())
        if (v == kIgnoreId) v = 0;
    ConfusionMatrix whole(5), ha(5), hb(5);
    accumulate_confusion(pa, a, tax, whole);
    accumulate_confusion(pb, b, tax, whole);
    accumulate_confusion(pa, a, tax, ha);
    accumulate_confusion(pb, b, tax, hb);
    ha += hb;
    EXPECT_EQ(ha, whole);
  }
}

TEST(Confusion, IgnorePixelsAreSkippedAndBadIdsRejected) {
  const auto tax = four_classes();
  ConfusionMatrix cm(5);
  const Tensor<int> mask({1, 3}, std::vector<int>{kIgnoreId, 1, 3});
  accumulate_confusion(Tensor<int>({1, 3}, std::vector<int>{4, 1, 3}), mask, tax, cm);
  EXPECT_EQ(cm.total(), 2u);
  EXPECT_THROW(accumulate_confusion(Tensor<int>({1, 3}, std::vector<int>{0, 9, 0}), mask, tax, cm), DataError);
  EXPECT_THROW(compute_metrics(ConfusionMatrix(5), tax), DataError);
  EXPECT_THROW(compute_metrics(ConfusionMatrix(4), tax), ShapeError);
}

TEST(Metrics, HandComputedIoU) {
  const auto tax = four_classes();
  ConfusionMatrix cm(5);
  // background: 3 right, 1 predicted as class 1
  for (int k = 0; k < 3; ++k) cm.add(0, 0);
  cm.add(0, 1);
  // class 1: 2 right; class 3 (channel 3): 1 right, 1 predicted background
  cm.add(1, 1);
  cm.add(1, 1);
  cm.add(3, 3);
  cm.add(3, 0);
  const auto r = compute_metrics(cm, tax);
  EXPECT_NEAR(*r.iou_per_class[0], 100.0 * 3 / 5, 1e-12);
  EXPECT_NEAR(*r.iou_per_class[1], 100.0 * 2 / 3, 1e-12);
  EXPECT_FALSE(r.iou_per_class[2].has_value());
  EXPECT_NEAR(*r.iou_per_class[3], 50.0, 1e-12);
  EXPECT_FALSE(r.iou_per_class[4].has_value());
  EXPECT_NEAR(r.miou_base, (60.0 + 200.0 / 3) / 2, 1e-9);
  EXPECT_NEAR(r.miou_novel, 50.0, 1e-12);
  const auto without_bg = compute_metrics(cm, tax, false);
  EXPECT_NEAR(without_bg.miou_base, 200.0 / 3, 1e-9);
}

TEST(CrossValidation, AveragesBaseAndNovelBeforeCombining) {
  const std::vector<std::pair<double, double>> folds{{70, 10}, {72, 60}, {74, 30}, {76, 50}};
  const auto cv = cross_validate([&](int f) { return metrics_from_summary(folds[f].first, folds[f].second, 15, 5); },
                                 4, 15, 5);
  EXPECT_TRUE(cv.complete);
  EXPECT_DOUBLE_EQ(cv.aggregate.miou_base, 73.0);
  EXPECT_DOUBLE_EQ(cv.aggregate.miou_novel, 37.5);
  EXPECT_NEAR(cv.aggregate.h_mean, harmonic_mean(73.0, 37.5), 1e-12);
  double per_fold = 0;
  for (const auto& f : folds) per_fold += harmonic_mean(f.first, f.second) / 4;
  EXPECT_GT(std::abs(per_fold - cv.aggregate.h_mean), 1.0);
}

TEST(CrossValidation, IdenticalFoldsGiveTheSameAggregate) {
  const auto cv = cross_validate([](int) { return metrics_from_summary(60, 40, 3, 1); }, 4, 3, 1);
  EXPECT_DOUBLE_EQ(cv.aggregate.h_mean, harmonic_mean(60, 40));
  EXPECT_DOUBLE_EQ(cv.aggregate.mean_metric, weighted_mean(60, 40, 3, 1));
}

TEST(CrossValidation, FailedFoldGivesAPartialReport) {
  const auto cv = cross_validate(
      [](int f) {
        if (f == 1) throw DataError("boom");
        return metrics_from_summary(50, 20, 3, 1);
      },
      3, 3, 1);
  EXPECT_FALSE(cv.complete);
  ASSERT_EQ(cv.folds.size(), 3u);
  EXPECT_FALSE(cv.folds[1].report.has_value());
  EXPECT_EQ(cv.folds[1].error, "boom");
  EXPECT_DOUBLE_EQ(cv.aggregate.miou_base, 50.0);
  const auto csv = cross_validation_csv(cv);
  EXPECT_NE(csv.find("1,,,,,failed: boom"), std::string::npos);
  EXPECT_NE(csv.find("mean,50.00,20.00,"), std::string::npos);
  EXPECT_NE(csv.find(",partial\n"), std::string::npos);
}

TEST(Reports, PerClassCsvLeavesAbsentClassesBlank) {
  const auto tax = four_classes();
  ConfusionMatrix cm(5);
  cm.add(0, 0);
  cm.add(1, 1);
  const auto csv = per_class_csv(compute_metrics(cm, tax), tax);
  EXPECT_NE(csv.find("0,0,background,100.00\n"), std::string::npos);
  EXPECT_NE(csv.find("4,4,novel,\n"), std::string::npos);
}
