#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gfss/classifiers.hpp"
#include "support.hpp"

using namespace gfss;
using fixtures::random_matrix;

namespace {

// Column means shifted so the average of the means is exactly zero.
Tensor<double> zero_mean_base(std::size_t d, std::size_t M, Rng& rng) {
  auto B = random_matrix(d, M, rng, rng.uniform(0.1, 2.0));
  const double mu = weight_stats(B).mu_bar;
  for (auto& v : B.values()) v -= mu;
  return B;
}

std::size_t count_warnings(const std::function<void()>& f) {
  std::size_t n = 0;
  log::ScopedSink guard([&](log::Level l, std::string_view) { n += l == log::Level::warning; });
  f();
  return n;
}

}  // namespace

TEST(WeightStats, PopulationStdOfAColumn) {
  const auto s = weight_stats(Tensor<double>::matrix({{1, 5}, {3, 5}}));
  EXPECT_DOUBLE_EQ(s.mu[0], 2.0);
  EXPECT_DOUBLE_EQ(s.sigma[0], 1.0);
  EXPECT_DOUBLE_EQ(s.mu[1], 5.0);
  EXPECT_DOUBLE_EQ(s.sigma[1], 0.0);
  EXPECT_DOUBLE_EQ(s.mu_bar, 3.5);
  EXPECT_DOUBLE_EQ(s.sigma_bar, 0.5);
}

TEST(WeightStats, AverageOfTwoClassMeans) {
  EXPECT_DOUBLE_EQ(weight_stats(Tensor<double>::matrix({{-1, 3}, {1, 5}})).mu_bar, 2.0);
}

TEST(WeightStats, MatchesATwoPassOracle) {
  Rng rng(1, "stats");
  for (int trial = 0; trial < 100; ++trial) {
    const auto Z = random_matrix(2 + rng.index(30), 1 + rng.index(6), rng, 3);
    const auto s = weight_stats(Z);
    for (std::size_t i = 0; i < Z.cols(); ++i) {
      std::vector<double> col(Z.rows());
      for (std::size_t j = 0; j < Z.rows(); ++j) col[j] = Z(j, i);
      const double m = std::accumulate(col.begin(), col.end(), 0.0) / double(col.size());
      const double sq = std::inner_product(col.begin(), col.end(), col.begin(), 0.0) / double(col.size());
      EXPECT_NEAR(s.mu[i], m, 1e-12);
      EXPECT_NEAR(s.sigma[i], std::sqrt(std::max(0.0, sq - m * m)), 1e-9);
    }
  }
}

TEST(WeightStats, NeedsAtLeastTwoRows) {
  EXPECT_THROW(weight_stats(Tensor<double>({1, 3})), ShapeError);
}

TEST(Calibration, SingleColumnExample) {
  WeightStats base;
  base.mu_bar = 0;
  base.sigma_bar = 2;
  const auto r = calibrate_novel(Tensor<double>::matrix({{1}, {3}}), base);
  EXPECT_TRUE(r.degenerate_columns.empty());
  EXPECT_DOUBLE_EQ(r.theta(0, 0), -2.0);
  EXPECT_DOUBLE_EQ(r.theta(1, 0), 2.0);
  const auto s = weight_stats(r.theta);
  EXPECT_DOUBLE_EQ(s.sigma[0], 2.0);
  EXPECT_DOUBLE_EQ(s.mu[0], 0.0);
}

TEST(Calibration, EveryNovelColumnTakesTheBaseStd) {
  Rng rng(2, "ncc-std");
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t d = 2 + rng.index(40);
    const auto B = random_matrix(d, 1 + rng.index(8), rng, rng.uniform(0.05, 3.0));
    auto N = random_matrix(d, 1 + rng.index(6), rng, rng.uniform(0.05, 3.0));
    for (auto& v : N.values()) v += rng.uniform(-2.0, 2.0);
    const auto base = weight_stats(B);
    const auto r = calibrate_novel(N, base);
    const auto before = weight_stats(N), after = weight_stats(r.theta);
    for (std::size_t i = 0; i < N.cols(); ++i) {
      EXPECT_NEAR(after.sigma[i], base.sigma_bar, 1e-6);
      const double ratio = base.sigma_bar / before.sigma[i];
      EXPECT_NEAR(after.mu[i], ratio * (before.mu[i] - before.mu_bar + base.mu_bar), 1e-9);
    }
  }
}

TEST(Calibration, FixedPointWhenStatisticsAlreadyMatch) {
  // both columns have std 1 and the means average to mu_bar_b = 0.5
  const auto N = Tensor<double>::matrix({{-1, 2}, {1, 0}});
  WeightStats base;
  base.mu_bar = 0.5;
  base.sigma_bar = 1;
  EXPECT_LE(max_abs_diff(calibrate_novel(N, base).theta, N), 1e-12);
}

TEST(Calibration, IdempotentForOneColumnAtZeroBaseMean) {
  Rng rng(3, "ncc-idem-1");
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 2 + rng.index(40);
    const auto base = weight_stats(zero_mean_base(d, 1 + rng.index(8), rng));
    auto N = random_matrix(d, 1, rng, rng.uniform(0.05, 3.0));
    for (auto& v : N.values()) v += 1.5;
    const auto once = calibrate_novel(N, base).theta;
    EXPECT_LE(max_abs_diff(calibrate_novel(once, base).theta, once), 1e-6);
  }
}

TEST(Calibration, IdempotentForAveragedSigmaAtZeroBaseMean) {
  Rng rng(4, "ncc-idem-avg");
  CalibrationOptions opts;
  opts.sigma = SigmaMode::averaged;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 2 + rng.index(40);
    const auto base = weight_stats(zero_mean_base(d, 1 + rng.index(8), rng));
    const auto N = random_matrix(d, 1 + rng.index(6), rng, rng.uniform(0.05, 3.0));
    const auto once = calibrate_novel(N, base, opts).theta;
    EXPECT_LE(max_abs_diff(calibrate_novel(once, base, opts).theta, once), 1e-6);
  }
}

// With per-class sigma and several columns the first pass leaves column
// means (r_i (mu_i - mu_bar_n)) whose average is not zero, so a second pass
// at mu_bar_b = 0 is exactly a scalar shift by that average.
TEST(Calibration, SecondPerClassPassIsAScalarShift) {
  Rng rng(5, "ncc-second");
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 2 + rng.index(40);
    const auto base = weight_stats(zero_mean_base(d, 1 + rng.index(8), rng));
    const auto N = random_matrix(d, 2 + rng.index(5), rng, rng.uniform(0.05, 3.0));
    const auto once = calibrate_novel(N, base).theta;
    const double shift = weight_stats(once).mu_bar;
    const auto twice = calibrate_novel(once, base).theta;
    for (std::size_t k = 0; k < once.size(); ++k) EXPECT_NEAR(twice[k], once[k] - shift, 1e-9);
  }
}

TEST(Calibration, ScaleThenShiftLandsOnBothTargets) {
  Rng rng(6, "ncc-alt");
  CalibrationOptions opts;
  opts.order = CalibrationOrder::scale_then_shift;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 2 + rng.index(20);
    const auto base = weight_stats(random_matrix(d, 3, rng, 0.5));
    auto N = random_matrix(d, 1 + rng.index(5), rng, 2);
    const auto after = weight_stats(calibrate_novel(N, base, opts).theta);
    EXPECT_NEAR(after.mu_bar, base.mu_bar, 1e-9);
    for (double s : after.sigma) EXPECT_NEAR(s, base.sigma_bar, 1e-9);
  }
}

TEST(Calibration, LeavesTheBaseHeadUntouched) {
  Rng rng(7);
  const auto B = random_matrix(6, 4, rng);
  const auto copy = B;
  calibrate_novel(random_matrix(6, 2, rng), weight_stats(B));
  EXPECT_EQ(B, copy);
}

TEST(Calibration, DegenerateColumnIsLeftAloneWithAWarning) {
  auto N = Tensor<double>::matrix({{1, 4}, {3, 4}, {2, 4}});
  WeightStats base;
  base.sigma_bar = 1;
  CalibrationResult<double> r;
  EXPECT_EQ(count_warnings([&] { r = calibrate_novel(N, base); }), 1u);
  EXPECT_EQ(r.degenerate_columns, (std::vector<std::size_t>{1}));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(r.theta(j, 1), 4.0);
  EXPECT_NEAR(weight_stats(r.theta).sigma[0], 1.0, 1e-12);
}

TEST(CalibrateBoth, PooledTargetsForTwoSingleColumns) {
  const auto B = Tensor<double>::matrix({{1}, {3}}), N = Tensor<double>::matrix({{5}, {7}});
  const auto [rb, rn] = calibrate_both_variant(B, N);
  // pooled mean (2 + 6) / 2 = 4 and pooled std 1, so both land on (3, 5)
  const auto sb = weight_stats(rb.theta), sn = weight_stats(rn.theta);
  EXPECT_NEAR(sb.sigma[0], 1.0, 1e-12);
  EXPECT_NEAR(sn.sigma[0], 1.0, 1e-12);
  EXPECT_NEAR(sb.mu[0], 4.0, 1e-12);
  EXPECT_NEAR(sn.mu[0], 4.0, 1e-12);
}

TEST(CalibrateBoth, IdentityWhenDistributionsAgree) {
  const auto Z = Tensor<double>::matrix({{-1, 1}, {1, -1}});
  const auto [rb, rn] = calibrate_both_variant(Z, Z);
  EXPECT_LE(max_abs_diff(rb.theta, Z), 1e-12);
  EXPECT_LE(max_abs_diff(rn.theta, Z), 1e-12);
}

TEST(CalibrateBoth, SymmetricMeansMeetAtZero) {
  Rng rng(8, "nbcc");
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 2 + rng.index(10);
    auto B = random_matrix(d, 1, rng);
    const double m = weight_stats(B).mu_bar;
    auto N = B;
    for (std::size_t j = 0; j < d; ++j) {
      B(j, 0) += 1.0 - m;
      N(j, 0) += -1.0 - m;
    }
    const auto [rb, rn] = calibrate_both_variant(B, N);
    EXPECT_NEAR(weight_stats(rb.theta).mu_bar, 0.0, 1e-9);
    EXPECT_NEAR(weight_stats(rn.theta).mu_bar, 0.0, 1e-9);
  }
}

TEST(Score, FusedRowsMatchExplicitSubFeatures) {
  Rng rng(9, "score");
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 3 + rng.index(6), M = 1 + rng.index(3), N = rng.index(3);
    const std::size_t h = 1 + rng.index(4), w = 1 + rng.index(4);
    FeatureMap<double> f{fixtures::random_tensor({h, w, d}, rng), 1};
    const auto Ub = random_matrix(M, d, rng), Un = random_matrix(N, d, rng);
    const auto Tb = random_matrix(d, M, rng), Tn = random_matrix(d, N, rng), Tbg = random_matrix(d, 1, rng);

    Tensor<double> U({M + N, d}), T({d, M + N});
    for (std::size_t i = 0; i < M + N; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        U(i, j) = i < M ? Ub(i, j) : Un(i - M, j);
        T(j, i) = i < M ? Tb(j, i) : Tn(j, i - M);
      }
    const auto dec = decompose(f, U);
    std::vector<FeatureMap<double>> subs{dec.residual};
    subs.insert(subs.end(), dec.sub_features.begin(), dec.sub_features.end());
    const auto explicit_logits = score(subs, Tb, N ? Tn : Tensor<double>(), Tbg);

    const auto rows = score_rows(Var<double>::constant(f.values.reshaped({h * w, d})),
                                 Var<double>::constant(U), Var<double>::constant(T),
                                 Var<double>::constant(Tbg));
    EXPECT_LE(max_abs_diff(rows.value().reshaped({h, w, M + N + 1}), explicit_logits), 1e-9);
  }
}

TEST(Score, ShapeErrors) {
  Rng rng(10);
  FeatureMap<double> f{fixtures::random_tensor({2, 2, 3}, rng), 1};
  EXPECT_THROW(score({f, f}, random_matrix(3, 2, rng), Tensor<double>(), random_matrix(3, 1, rng)),
               ShapeError);
  EXPECT_THROW(score_rows(Var<double>::constant(random_matrix(4, 3, rng)),
                          Var<double>::constant(random_matrix(2, 3, rng)),
                          Var<double>::constant(random_matrix(3, 3, rng)),
                          Var<double>::constant(random_matrix(3, 1, rng))),
               ShapeError);
}

TEST(Probabilities, RowsSumToOneAndKeepTheArgmax) {
  Rng rng(11, "probs");
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t C = 2 + rng.index(8);
    const auto logits = fixtures::random_tensor({1 + rng.index(4), 1 + rng.index(4), C}, rng,
                                               rng.uniform(0.1, 40.0));
    const auto p = combine_probabilities(logits);
    const std::size_t P = logits.size() / C;
    for (std::size_t r = 0; r < P; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < C; ++c) s += p[r * C + c];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    EXPECT_EQ(argmax_rows(p), argmax_rows(logits));
  }
}

TEST(Probabilities, PositiveLogitScaleKeepsPredictions) {
  Rng rng(12, "scale-inv");
  for (int trial = 0; trial < 100; ++trial) {
    auto logits = fixtures::random_tensor({3, 3, 5}, rng);
    const auto before = argmax_rows(logits);
    const double k = rng.uniform(0.01, 100.0);
    for (auto& v : logits.values()) v *= k;
    EXPECT_EQ(argmax_rows(logits), before);
  }
}

TEST(Probabilities, TiesGoToTheLowestChannel) {
  const auto t = Tensor<double>({2, 3}, std::vector<double>{1, 1, 0, 0, 2, 2});
  EXPECT_EQ(argmax_rows(t), (std::vector<int>{0, 1}));
}
