#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "itene/synthetic.hpp"
#include "itene/te.hpp"

namespace itene {
namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

TEST(Embed, ThreeStepWindow) {
  const SeriesPair s{{1, 2, 3}, {4, 5, 6}};
  const EmbeddedDataset e = embed(s, {1, 1});
  ASSERT_EQ(e.rows(), 3U);
  const double x_minus[] = {0, 1, 2};
  const double y0[] = {4, 5, 6};
  const double y_minus[] = {0, 4, 5};
  for (Eigen::Index t = 0; t < 3; ++t) {
    EXPECT_EQ(e.x_minus(0, t), x_minus[t]);
    EXPECT_EQ(e.y0(0, t), y0[t]);
    EXPECT_EQ(e.y_minus(0, t), y_minus[t]);
  }
}

TEST(Embed, LongerMemoriesPadWithZeros) {
  const SeriesPair s{{1, 2, 3, 4}, {5, 6, 7, 8}};
  const EmbeddedDataset e = embed(s, {2, 3});
  ASSERT_EQ(e.rows(), 4U);
  EXPECT_EQ(e.x_minus(0, 0), 0.0);
  EXPECT_EQ(e.x_minus(1, 0), 0.0);
  // Row t = 4: x_minus = (x_2, x_3), y_minus = (y_1, y_2, y_3).
  EXPECT_EQ(e.x_minus(0, 3), 2.0);
  EXPECT_EQ(e.x_minus(1, 3), 3.0);
  EXPECT_EQ(e.y_minus(0, 3), 5.0);
  EXPECT_EQ(e.y_minus(1, 3), 6.0);
  EXPECT_EQ(e.y_minus(2, 3), 7.0);
  // Row t = 2: y_minus = (0, 0, y_1).
  EXPECT_EQ(e.y_minus(0, 1), 0.0);
  EXPECT_EQ(e.y_minus(1, 1), 0.0);
  EXPECT_EQ(e.y_minus(2, 1), 5.0);
}

TEST(Embed, ConstantSeriesIsConstantAfterPadding) {
  const SeriesPair s{std::vector<double>(10, 2.5), std::vector<double>(10, -1.0)};
  const EmbeddedDataset e = embed(s, {2, 2});
  for (Eigen::Index t = 2; t < 10; ++t) {
    EXPECT_TRUE((e.x_minus.col(t).array() == 2.5).all());
    EXPECT_TRUE((e.y_minus.col(t).array() == -1.0).all());
    EXPECT_EQ(e.y0(0, t), -1.0);
  }
}

TEST(Embed, RowCountEqualsLengthForAllMemories) {
  const SeriesPair s = gen_independent(30, 1);
  for (int m = 1; m <= 5; ++m) {
    for (int n = 1; n <= 5; ++n) {
      const EmbeddedDataset e = embed(s, {m, n});
      EXPECT_EQ(e.rows(), 30U);
      EXPECT_EQ(e.x_minus.rows(), m);
      EXPECT_EQ(e.y_minus.rows(), n);
    }
  }
}

TEST(Embed, DropPaddedRemovesLeadingRows) {
  const SeriesPair s{{1, 2, 3, 4}, {5, 6, 7, 8}};
  const EmbeddedDataset e = embed(s, {2, 1, true});
  ASSERT_EQ(e.rows(), 2U);
  EXPECT_EQ(e.x_minus(0, 0), 1.0);
  EXPECT_EQ(e.y0(0, 0), 7.0);
}

TEST(Embed, Errors) {
  const SeriesPair s{{1, 2}, {3, 4}};
  EXPECT_THROW(embed(s, {2, 1}), ConfigError);
  EXPECT_THROW(embed(s, {0, 1}), ConfigError);
  EXPECT_THROW(embed(SeriesPair{{1, 2, 3}, {1, 2}}, {1, 1}), ShapeError);
  EXPECT_THROW(embed(SeriesPair{{1, NAN, 3}, {1, 2, 3}}, {1, 1}), NumericError);
}

TEST(TeSeeds, SubEstimatesUseIndependentStreams) {
  const TeSeeds s = TeSeeds::derive(4);
  EXPECT_NE(s.a.resample, s.b.resample);
  EXPECT_NE(s.a.init, s.b.init);
  EXPECT_NE(s.a.shuffle, s.b.shuffle);
  const TeSeeds w = s.swapped();
  EXPECT_EQ(w.split, s.split);
  EXPECT_EQ(w.a.init, s.b.init);
}

TEST(EstimateTe, SubEstimatesShareTheSplit) {
  const SeriesPair s = gen_independent(400, 2);
  MineConfig cfg;
  cfg.hidden_widths = {4};
  cfg.epochs = 2;
  const TeEstimate te = estimate_te(embed(s, {1, 1}), cfg, TeSeeds::derive(3));
  EXPECT_EQ(te.a.design.train_joint, te.b.design.train_joint);
  EXPECT_EQ(te.a.design.eval_joint, te.b.design.eval_joint);
  EXPECT_NE(te.a.design.eval_product.v, te.b.design.eval_product.v);
  EXPECT_EQ(te.te_nats, te.a.estimate.value_nats - te.b.estimate.value_nats);
  EXPECT_EQ(te.a.trained.params.input_width(), 3);
  EXPECT_EQ(te.b.trained.params.input_width(), 2);
}

TEST(EstimateTe, IndependentWhiteNoiseNearZero) {
  MineConfig cfg;
  cfg.rng_seed = 5;
  const TeEstimate te = estimate_te(gen_independent(10000, 21), {1, 1}, cfg);
  EXPECT_LT(std::abs(te.te_nats), 0.05);
}

TEST(EstimateTe, ThresholdProcessAboveThresholdIsNearZero) {
  MineConfig cfg;
  cfg.rng_seed = 6;
  const SeriesPair s = gen_threshold_process({0.9, 3.0, 20000, 31});
  const TeEstimate te = estimate_te(s, {1, 1}, cfg);
  EXPECT_LT(std::abs(te.te_nats), 0.08);
}

TEST(EstimateTe, ThresholdProcessBelowThresholdMatchesClosedForm) {
  MineConfig cfg;
  cfg.rng_seed = 7;
  const SeriesPair s = gen_threshold_process({0.9, -3.0, 20000, 32});
  const TeEstimate te = estimate_te(s, {1, 1}, cfg);
  EXPECT_NEAR(te.te_nats, closed_form_te(0.9, -3.0), 0.1);
}

TEST(EstimateTe, SwappingSubEstimateSeedsStaysWithinTrialSpread) {
  MineConfig cfg;
  cfg.hidden_widths = {32, 32};
  std::vector<double> base, swapped;
  for (std::uint64_t k = 0; k < 10; ++k) {
    const EmbeddedDataset e = embed(gen_threshold_process({0.9, 0.0, 4000, 100 + k}), {1, 1});
    const TeSeeds seeds = TeSeeds::derive(k);
    base.push_back(estimate_te(e, cfg, seeds).te_nats);
    swapped.push_back(estimate_te(e, cfg, seeds.swapped()).te_nats);
  }
  const double spread = *std::max_element(base.begin(), base.end()) - *std::min_element(base.begin(), base.end());
  EXPECT_LT(std::abs(median(base) - median(swapped)), spread);
}

TEST(FlowEstimates, ResidualIsExact) {
  for (double te : {0.83, -0.01, 0.4152}) {
    for (double ite : {0.0, 0.27, 0.9}) {
      const FlowEstimates f = FlowEstimates::from(te, ite);
      EXPECT_EQ(f.ste_nats, te - ite);
      EXPECT_EQ(f.te_nats, te);
      EXPECT_EQ(f.ite_nats, ite);
    }
  }
}

TEST(FlowEstimates, BitsConversion) { EXPECT_NEAR(nats_to_bits(std::log(2.0)), 1.0, 1e-15); }

}  // namespace
}  // namespace itene
