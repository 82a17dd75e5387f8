#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fddcsi/eval.hpp"

using namespace fddcsi;

namespace {

ComplexChannel random_channel(int M, Rng& rng) {
  ComplexChannel h(M);
  for (int m = 0; m < M; ++m) h(m) = {standard_normal(rng), standard_normal(rng)};
  return h;
}

ExperimentConfig tiny() {
  ExperimentConfig cfg = ExperimentConfig::smoke();
  cfg.train.max_steps = 40;
  cfg.train.meta_max_steps = 10;
  cfg.train.K_T = 3;
  return cfg;
}

}  // namespace

TEST(Nmse, HandCases) {
  ComplexChannel h(2), g(2);
  h << std::complex<double>(1, 0), std::complex<double>(0, 1);
  EXPECT_EQ(nmse(h, h), 0.0);
  g.setZero();
  EXPECT_EQ(nmse(h, g), 1.0);
  g << std::complex<double>(1, 1), std::complex<double>(0, 1);
  EXPECT_DOUBLE_EQ(nmse(h, g), 0.5);
  EXPECT_DOUBLE_EQ(nmse(h, -h), 4.0);
}

TEST(Nmse, ScaleInvariantAndElementwiseOracle) {
  Rng rng(1);
  const ComplexChannel h = random_channel(8, rng), g = random_channel(8, rng);
  double num = 0.0, den = 0.0;
  for (int m = 0; m < 8; ++m) {
    num += std::norm(h(m) - g(m));
    den += std::norm(h(m));
  }
  EXPECT_NEAR(nmse(h, g), num / den, 1e-14);
  const std::complex<double> s(3.0, -2.0);
  EXPECT_NEAR(nmse(s * h, s * g), nmse(h, g), 1e-12);
}

TEST(Nmse, RejectsZeroTruthAndLengthMismatch) {
  Rng rng(2);
  EXPECT_THROW(nmse(ComplexChannel::Zero(4), random_channel(4, rng)), std::invalid_argument);
  EXPECT_THROW(nmse(random_channel(4, rng), random_channel(3, rng)), std::invalid_argument);
}

TEST(TestModel, ZeroNetworkScoresOne) {
  const ExperimentConfig cfg = tiny();
  const Environment env = sample_environment(5, cfg.generator, 3);
  const TaskDataset ds = generate_task_dataset(env, Role::Test, 10, cfg.array, cfg.data);
  TrainedModel m;
  m.spec = network_spec(cfg.array.M, cfg.train);
  m.params = zero_params(m.spec);
  EXPECT_DOUBLE_EQ(test_model(m, ds), 1.0);
}

TEST(TestModel, MeanOfPerSampleNmse) {
  const ExperimentConfig cfg = tiny();
  const Environment env = sample_environment(6, cfg.generator, 3);
  const TaskDataset ds = generate_task_dataset(env, Role::Test, 7, cfg.array, cfg.data);
  TrainedModel m;
  m.spec = network_spec(cfg.array.M, cfg.train);
  Rng rng(3);
  m.params = init_params(m.spec, rng);
  const Network net(m.spec);
  double sum = 0.0;
  for (const auto& p : ds.pairs) {
    const RealVector pred = net.predict(m.params, p.x);
    sum += nmse(real_to_complex(p.y_clean), real_to_complex(pred));
  }
  EXPECT_NEAR(test_model(m, ds), sum / 7.0, 1e-13);
}

TEST(NmseResult, MeanAndDecibels) {
  const auto r = NmseResult::from_targets("x", {0.1, 0.3});
  EXPECT_DOUBLE_EQ(r.mean_linear, 0.2);
  EXPECT_NEAR(r.mean_db, 10.0 * std::log10(0.2), 1e-12);
}

TEST(Sweep, GadGridGivesNineRowsAndZeroStepsMatchesPreAdaption) {
  const ExperimentConfig cfg = tiny();
  const TrainedPair models = train_models(cfg);
  const auto report = run_three_way(cfg, {SweepVariable::G_Ad, {0, 5, 10}}, &models);
  ASSERT_EQ(report.points.size(), 3u);
  std::istringstream csv(report.to_csv());
  std::string line;
  int rows = -1;
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  EXPECT_EQ(rows, 9);

  // G_Ad = 0: direct transfer is the pooled model itself.
  const auto& zero = report.points[0];
  EXPECT_EQ(zero.direct.per_target, zero.no_transfer.per_target);
  ASSERT_EQ(zero.meta.per_target.size(), 3u);
  const auto targets = target_environments(cfg);
  for (std::size_t k = 0; k < targets.size(); ++k) {
    EnvironmentSampler s(targets[k], cfg.array, cfg.data);
    const TaskDataset test = s.draw(Role::Test, cfg.train.N_Te);
    EXPECT_EQ(zero.meta.per_target[k], test_model(models.meta, test));
  }
}

TEST(Sweep, NoTransferIgnoresAdaptionSide) {
  const ExperimentConfig cfg = tiny();
  const TrainedPair models = train_models(cfg);
  const auto a = run_three_way(cfg, {SweepVariable::N_Ad, {2, 10}}, &models);
  ExperimentConfig noisy = cfg;
  noisy.adaption_noise = {-10.0, 8, NoiseMode::Awgn};
  const auto b = run_three_way(noisy, {SweepVariable::G_Ad, {3}}, &models);
  EXPECT_EQ(a.points[0].no_transfer.per_target, a.points[1].no_transfer.per_target);
  EXPECT_EQ(a.points[0].no_transfer.per_target, b.points[0].no_transfer.per_target);
}

TEST(Sweep, RejectsBadGrids) {
  const ExperimentConfig cfg = tiny();
  EXPECT_THROW(run_three_way(cfg, {SweepVariable::G_Ad, {}}), std::invalid_argument);
  EXPECT_THROW(run_three_way(cfg, {SweepVariable::N_Ad, {0}}), std::invalid_argument);
  EXPECT_THROW(run_three_way(cfg, {SweepVariable::G_Ad, {1.5}}), std::invalid_argument);
  EXPECT_THROW(sweep_variable_from_string("bogus"), std::invalid_argument);
}

TEST(Probe, SingleRowAndOrdering) {
  ProbeConfig cfg;
  cfg.max_steps = 300;
  const auto one = proposition1_probe({8}, cfg);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].width, 8);
  EXPECT_EQ(one[0].steps, 300);
  EXPECT_GT(one[0].final_loss, 0.0);
  EXPECT_THROW(proposition1_probe({8, 8}, cfg), std::invalid_argument);
  EXPECT_THROW(proposition1_probe({}, cfg), std::invalid_argument);
}

TEST(Experiment, ProfilesValidateAndTargetsAreDisjointFromSources) {
  for (const auto& cfg : {ExperimentConfig::paper_defaults(), ExperimentConfig::desk(), ExperimentConfig::smoke()})
    EXPECT_NO_THROW(cfg.validate());
  const ExperimentConfig cfg = tiny();
  const auto src = source_environments(cfg);
  const auto tgt = target_environments(cfg);
  for (const auto& t : tgt)
    for (const auto& s : src) EXPECT_NE(t.id, s.id);
  ExperimentConfig bad = cfg;
  bad.data.users = cfg.train.U + 1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}
