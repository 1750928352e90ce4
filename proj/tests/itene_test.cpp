#include <cmath>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "itene/itene.hpp"
#include "itene/synthetic.hpp"
#include "phi_oracle.hpp"

namespace itene {
namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

DenseNetParams constant_classifier(int input_width) {
  DenseNetParams p = init_network(classifier_layers(input_width, {3}), OutputKind::logit_scalar, 0);
  p.set_zero();
  return p;
}

TEST(SampleBarY, IdentityChannelReproducesInput) {
  const Matrix y = random_matrix(2, 50, 1);
  const NoiseBatch noise = make_noise(2, 50, 2);
  const Matrix bar = sample_bar_y(make_identity_channel(2, {8}), y, noise);
  EXPECT_LE((bar - y).cwiseAbs().maxCoeff(), std::exp(-6.0) * noise.epsilon.cwiseAbs().maxCoeff() + 1e-15);
}

TEST(SampleBarY, ZeroNoiseGivesTheMean) {
  const ReparamChannel ch = make_channel(2, {5}, 3, -1.0, 1.0);
  const Matrix y = random_matrix(2, 20, 4);
  NoiseBatch zero;
  zero.epsilon = Matrix::Zero(2, 20);
  const Matrix bar = sample_bar_y(ch, y, zero);
  for (Eigen::Index t = 0; t < 20; ++t) {
    const Vector out = forward(ch.net, std::vector<double>{y(0, t), y(1, t)});
    EXPECT_NEAR(bar(0, t), y(0, t) + out[0], 1e-14);
    EXPECT_NEAR(bar(1, t), y(1, t) + out[1], 1e-14);
  }
}

TEST(SampleBarY, FixedSeedIsReproducible) {
  const ReparamChannel ch = make_channel(1, {5}, 3);
  const Matrix y = random_matrix(1, 30, 4);
  EXPECT_EQ(sample_bar_y(ch, y, make_noise(1, 30, 9)), sample_bar_y(ch, y, make_noise(1, 30, 9)));
  EXPECT_NE(sample_bar_y(ch, y, make_noise(1, 30, 9)), sample_bar_y(ch, y, make_noise(1, 30, 10)));
}

TEST(SampleBarY, LogStdIsClamped) {
  const ReparamChannel ch = make_constant_channel(1, {4}, false, 0.0, 50.0);
  const Matrix y = random_matrix(1, 10, 1);
  NoiseBatch ones;
  ones.epsilon = Matrix::Ones(1, 10);
  EXPECT_NEAR(sample_bar_y(ch, y, ones)(0, 0), std::exp(2.0), 1e-12);
}

TEST(SampleBarY, ShapeMismatchIsError) {
  const ReparamChannel ch = make_channel(2, {4}, 3);
  EXPECT_THROW(sample_bar_y(ch, random_matrix(1, 10, 1), make_noise(2, 10, 1)), ShapeError);
  EXPECT_THROW(sample_bar_y(ch, random_matrix(2, 10, 1), make_noise(2, 9, 1)), ShapeError);
}

TEST(MakeChannel, StartsNearIdentityWithSmallSigma) {
  const ReparamChannel ch = make_channel(1, {200}, 5);
  const Matrix y = random_matrix(1, 200, 6);
  NoiseBatch zero;
  zero.epsilon = Matrix::Zero(1, 200);
  EXPECT_LT((sample_bar_y(ch, y, zero) - y).cwiseAbs().maxCoeff(), 0.1);
  EXPECT_NEAR(detail::mean_log_std(ch, y), -3.0, 0.1);
}

TEST(PhiEstimates, MatchRowByRowReference) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto inst = testing::make_phi_instance(seed);
    const double a = estimate_mi_a_phi(inst.channel, inst.data, inst.noise, inst.theta, inst.rows_a, inst.tau);
    const double b = estimate_mi_b_phi(inst.channel, inst.data, inst.noise, inst.theta_prime, inst.rows_b, inst.tau);
    EXPECT_NEAR(a, testing::reference_term(PhiTerm::a, inst.channel, inst.data, inst.noise, inst.theta, inst.rows_a,
                                           inst.tau),
                1e-12);
    EXPECT_NEAR(b, testing::reference_term(PhiTerm::b, inst.channel, inst.data, inst.noise, inst.theta_prime,
                                           inst.rows_b, inst.tau),
                1e-12);
  }
}

TEST(PathwiseGrad, MatchesFiniteDifferencesOnTinyInstances) {
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 120; ++seed) {
    const auto inst = testing::make_phi_instance(seed);
    EXPECT_LE(testing::phi_gradient_error(inst), 1e-3) << "seed " << seed;
    const auto g = pathwise_grad_phi(inst.channel, inst.data, inst.noise, inst.theta, inst.rows_a,
                                     inst.theta_prime, inst.rows_b, inst.tau, ProductGradient::exact);
    EXPECT_GT(g.gradient.squared_norm(), 1e-12) << "seed " << seed;
    ++checked;
  }
  EXPECT_GE(checked, 100);
}

TEST(PathwiseGrad, ObjectiveMatchesReference) {
  const auto inst = testing::make_phi_instance(7);
  const PhiGradient g = pathwise_grad_phi(inst.channel, inst.data, inst.noise, inst.theta, inst.rows_a,
                                          inst.theta_prime, inst.rows_b, inst.tau);
  EXPECT_NEAR(g.objective, inst.reference_objective(inst.channel), 1e-12);
  EXPECT_EQ(g.objective, g.mi_a - g.mi_b);
}

TEST(PathwiseGrad, UnclippedDenominatorAgreesWhenNothingIsClipped) {
  // With tau large no ratio leaves the band, so both normalizations coincide.
  for (std::uint64_t seed = 1; seed < 40; seed += 2) {
    const auto inst = testing::make_phi_instance(seed);
    const auto exact = pathwise_grad_phi(inst.channel, inst.data, inst.noise, inst.theta, inst.rows_a,
                                         inst.theta_prime, inst.rows_b, inst.tau, ProductGradient::exact);
    const auto loose = pathwise_grad_phi(inst.channel, inst.data, inst.noise, inst.theta, inst.rows_a,
                                         inst.theta_prime, inst.rows_b, inst.tau,
                                         ProductGradient::unclipped_denominator);
    EXPECT_LE(testing::relative_error(exact.gradient.flatten(), loose.gradient.flatten()), 1e-12);
  }
}

TEST(PathwiseGrad, ConstantClassifiersGiveZeroGradient) {
  auto inst = testing::make_phi_instance(3);
  inst.theta = constant_classifier(inst.theta.input_width());
  inst.theta_prime = constant_classifier(inst.theta_prime.input_width());
  const PhiGradient g = pathwise_grad_phi(inst.channel, inst.data, inst.noise, inst.theta, inst.rows_a,
                                          inst.theta_prime, inst.rows_b, inst.tau);
  EXPECT_EQ(g.gradient.squared_norm(), 0.0);
  EXPECT_EQ(g.objective, 0.0);
}

TEST(PathwiseGrad, LogStdOnlyTouchesSigmaOutputs) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto inst = testing::make_phi_instance(seed);
    const int n = inst.channel.width();
    const auto full = pathwise_grad_phi(inst.channel, inst.data, inst.noise, inst.theta, inst.rows_a,
                                        inst.theta_prime, inst.rows_b, inst.tau);
    const auto sigma = pathwise_grad_phi(inst.channel, inst.data, inst.noise, inst.theta, inst.rows_a,
                                         inst.theta_prime, inst.rows_b, inst.tau,
                                         ProductGradient::unclipped_denominator, ChannelTrainable::log_std_only);
    const Gradient& g = sigma.gradient;
    for (std::size_t l = 0; l + 1 < g.num_layers(); ++l) {
      EXPECT_EQ(g.weights[l].squaredNorm(), 0.0);
      EXPECT_EQ(g.biases[l].squaredNorm(), 0.0);
    }
    EXPECT_EQ(g.weights.back().topRows(n).squaredNorm(), 0.0);
    EXPECT_EQ(g.biases.back().head(n).squaredNorm(), 0.0);
    EXPECT_EQ(g.weights.back().bottomRows(n), full.gradient.weights.back().bottomRows(n));
    EXPECT_EQ(g.biases.back().tail(n), full.gradient.biases.back().tail(n));
    EXPECT_GT(g.biases.back().tail(n).squaredNorm(), 0.0) << "seed " << seed;
  }
}

TEST(PathwiseGrad, IsDeterministic) {
  const auto inst = testing::make_phi_instance(11);
  const auto a = pathwise_grad_phi(inst.channel, inst.data, inst.noise, inst.theta, inst.rows_a, inst.theta_prime,
                                   inst.rows_b, inst.tau);
  const auto b = pathwise_grad_phi(inst.channel, inst.data, inst.noise, inst.theta, inst.rows_a, inst.theta_prime,
                                   inst.rows_b, inst.tau);
  EXPECT_EQ(a.gradient.flatten(), b.gradient.flatten());
}

class PhiOnThresholdData : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new EmbeddedDataset(embed(gen_threshold_process({0.9, 0.0, 8000, 41}), {1, 1}));
    cfg_ = new MineConfig();
    cfg_->hidden_widths = {32, 32};
    seeds_ = new TeSeeds(TeSeeds::derive(2));
    te_ = new TeEstimate(estimate_te(*data_, *cfg_, *seeds_));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete cfg_;
    delete seeds_;
    delete te_;
  }
  static EmbeddedDataset* data_;
  static MineConfig* cfg_;
  static TeSeeds* seeds_;
  static TeEstimate* te_;
};

EmbeddedDataset* PhiOnThresholdData::data_ = nullptr;
MineConfig* PhiOnThresholdData::cfg_ = nullptr;
TeSeeds* PhiOnThresholdData::seeds_ = nullptr;
TeEstimate* PhiOnThresholdData::te_ = nullptr;

TEST_F(PhiOnThresholdData, DegenerateChannelReducesToTeSubEstimates) {
  const ReparamChannel id = make_identity_channel(1, {16});
  const NoiseBatch noise = make_noise(1, data_->rows(), 5);
  const double a = estimate_mi_a_phi(id, *data_, noise, te_->a.trained.params, EvalRows::from(te_->a.design),
                                     cfg_->clip_tau);
  const double b = estimate_mi_b_phi(id, *data_, noise, te_->b.trained.params, EvalRows::from(te_->b.design),
                                     cfg_->clip_tau);
  EXPECT_NEAR(a, te_->a.estimate.value_nats, 0.02);
  EXPECT_NEAR(b, te_->b.estimate.value_nats, 0.02);
}

TEST_F(PhiOnThresholdData, DestroyedPastLeavesOnlyPresentTarget) {
  // mu = 0, sigma = 1, no skip: ybar is pure noise.
  const ReparamChannel ch = make_constant_channel(1, {16}, false, 0.0, 0.0);
  const NoiseBatch noise = make_noise(1, data_->rows(), 6);
  const Matrix bar = sample_bar_y(ch, data_->y_minus, noise);
  const IndexSplit split = split_indices(data_->rows(), cfg_->train_fraction, seeds_->split);
  const MineRun ra = run_mine(data_->x_minus, stack_target(data_->y0, bar), *cfg_, split, seeds_->a);
  const MineRun rb = run_mine(data_->x_minus, bar, *cfg_, split, seeds_->b);
  const double a = estimate_mi_a_phi(ch, *data_, noise, ra.trained.params, EvalRows::from(ra.design), cfg_->clip_tau);
  const double b = estimate_mi_b_phi(ch, *data_, noise, rb.trained.params, EvalRows::from(rb.design), cfg_->clip_tau);
  EXPECT_EQ(a, ra.estimate.value_nats);
  // Reference: the estimator run directly on (x-, y0).
  const MineRun direct = run_mine(data_->x_minus, data_->y0, *cfg_, split, seeds_->a);
  EXPECT_NEAR(a, direct.estimate.value_nats, 0.05);
  EXPECT_LT(std::abs(b), 0.05);
}

TEST(MinSmoothed, TrailingWindowMinimum) {
  EXPECT_DOUBLE_EQ(min_smoothed({1, 2, 3}, 5), 2.0);
  EXPECT_DOUBLE_EQ(min_smoothed({5, 1, 1, 1, 1, 1, 9}, 5), 1.0);
  EXPECT_DOUBLE_EQ(min_smoothed({4, 0, 4, 0}, 2), 2.0);
  EXPECT_DOUBLE_EQ(min_smoothed({3, 2, 1}, 1), 1.0);
  EXPECT_THROW(min_smoothed({}, 5), ConfigError);
}

TEST(IteneConfig, RejectsInvalidFields) {
  IteneConfig cfg;
  cfg.outer_iterations = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = IteneConfig{};
  cfg.tolerance = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = IteneConfig{};
  cfg.log_std_floor = 3.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

IteneConfig small_itene_config() {
  IteneConfig cfg;
  cfg.mine.hidden_widths = {16, 16};
  cfg.mine.epochs = 30;
  cfg.channel_hidden = {16};
  cfg.outer_iterations = 4;
  cfg.phi_steps_per_iter = 5;
  cfg.refit_epochs = 5;
  cfg.phi_batch_size = 256;
  cfg.rng_seed = 9;
  return cfg;
}

TEST(FitItene, FrozenIdentityChannelReproducesTe) {
  const SeriesPair s = gen_threshold_process({0.9, -1.0, 4000, 12});
  IteneConfig cfg = small_itene_config();
  cfg.identity_channel = true;
  cfg.freeze_channel = true;
  cfg.outer_iterations = 1;
  const IteneResult r = fit_itene(s, {1, 1}, cfg);
  ASSERT_EQ(r.trace.size(), 1U);
  EXPECT_NEAR(r.trace[0].objective, r.flow.te_nats, 0.02);
  EXPECT_NEAR(r.trace[0].mi_a, r.te_mi_a, 0.02);
  EXPECT_NEAR(r.trace[0].mi_b, r.te_mi_b, 0.02);
}

TEST(FitItene, DeterministicWithResidualIdentity) {
  const SeriesPair s = gen_threshold_process({0.9, 0.0, 2000, 13});
  const IteneConfig cfg = small_itene_config();
  const IteneResult a = fit_itene(s, {1, 1}, cfg);
  const IteneResult b = fit_itene(s, {1, 1}, cfg);
  EXPECT_EQ(a.flow.te_nats, b.flow.te_nats);
  EXPECT_EQ(a.flow.ite_nats, b.flow.ite_nats);
  EXPECT_EQ(a.flow.ste_nats, a.flow.te_nats - a.flow.ite_nats);
  EXPECT_EQ(a.trace.size(), 4U);
  std::vector<double> objectives;
  for (const auto& row : a.trace) objectives.push_back(row.objective);
  EXPECT_EQ(a.flow.ite_nats, min_smoothed(objectives, cfg.smoothing_window));
}

TEST(FitItene, ChannelMovesUnderGradientSteps) {
  const SeriesPair s = gen_xor_process(0.05, 2000, 14);
  IteneConfig cfg = small_itene_config();
  cfg.phi_learning_rate = 1e-2;
  const IteneResult r = fit_itene(s, {1, 1}, cfg);
  EXPECT_NE(r.trace.front().mean_log_std, r.trace.back().mean_log_std);
}

TEST(WriteTrace, TabSeparatedWithHeader) {
  std::ostringstream os;
  write_trace(os, {{0, 0.5, 0.25, 0.25, 0.25, -3.0}});
  EXPECT_EQ(os.str(), "iteration\tmi_a\tmi_b\tobjective\tsmoothed\tmean_log_std\n0\t0.5\t0.25\t0.25\t0.25\t-3\n");
}

}  // namespace
}  // namespace itene
