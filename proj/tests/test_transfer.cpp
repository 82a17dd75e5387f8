#include <gtest/gtest.h>

#include <cmath>

#include "fddcsi/transfer.hpp"
#include "fddcsi/verify.hpp"

using namespace fddcsi;

namespace {

TaskDataset random_task(int M, int n, std::int64_t env, Rng& rng, bool identity = false) {
  TaskDataset ds;
  ds.env_id = env;
  for (int i = 0; i < n; ++i) {
    SamplePair p;
    p.x = RealVector(2 * M);
    p.y = RealVector(2 * M);
    for (int k = 0; k < 2 * M; ++k) p.x(k) = standard_normal(rng);
    for (int k = 0; k < 2 * M; ++k) p.y(k) = identity ? p.x(k) : standard_normal(rng);
    p.y_clean = p.y;
    p.f_up = 1e9 + i;
    p.user = i;
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.hidden = {8};
  cfg.V = 8;
  cfg.K_S = 4;
  cfg.K_B = 2;
  cfg.N_Tr = 6;
  cfg.support_size = 3;
  cfg.G_Tr = 2;
  cfg.G_Ad = 5;
  cfg.beta = 1e-2;
  cfg.max_steps = 50;
  cfg.meta_max_steps = 20;
  return cfg;
}

Batch scalar_batch(double x, double y) {
  Batch b{Eigen::MatrixXd::Constant(1, 1, x), Eigen::MatrixXd::Constant(1, 1, y)};
  return b;
}

// One linear unit, w*x + b.
LayerSpec scalar_spec() {
  LayerSpec s;
  s.sizes = {1, 1};
  s.activations = {Activation::Linear};
  return s;
}

NetParams scalar_params(double w, double b) {
  NetParams p;
  p.layers.push_back({Eigen::MatrixXd::Constant(1, 1, w), Eigen::VectorXd::Constant(1, b)});
  return p;
}

}  // namespace

TEST(ConvergenceMonitor, StopsOnPlateau) {
  ConvergenceMonitor m(10, 0.005);
  int stopped_at = -1;
  for (int i = 1; i <= 100 && stopped_at < 0; ++i)
    if (m.push(1.0)) stopped_at = i;
  EXPECT_EQ(stopped_at, 20);
}

TEST(ConvergenceMonitor, KeepsGoingWhileImproving) {
  ConvergenceMonitor m(10, 0.005);
  double loss = 1.0;
  for (int i = 0; i < 200; ++i) {
    EXPECT_FALSE(m.push(loss)) << i;
    loss *= 0.99;
  }
}

TEST(NoTransfer, ZeroStepsReturnsInit) {
  Rng rng(1);
  const std::vector<TaskDataset> src = {random_task(2, 10, 0, rng)};
  TrainConfig cfg = small_config();
  cfg.max_steps = 0;
  const auto m = train_no_transfer(src, 2, cfg);
  EXPECT_EQ(m.loss_history.size(), 1u);
  EXPECT_EQ(m.steps, 0);
  Rng init = make_rng(cfg.seed, Stream::NetInit);
  EXPECT_EQ(m.params, init_params(m.spec, init, cfg.init_fan));
  EXPECT_EQ(m.provenance, Provenance::NoTransfer);
  EXPECT_EQ(m.derivative_order, 1);
}

TEST(NoTransfer, LearnsIdentityMap) {
  Rng rng(2);
  const std::vector<TaskDataset> src = {random_task(2, 64, 0, rng, true)};
  TrainConfig cfg = small_config();
  cfg.hidden = {16};
  cfg.V = 32;
  cfg.max_steps = 2000;
  cfg.early_stop = false;
  const auto m = train_no_transfer(src, 2, cfg);
  const Network net(m.spec);
  const double final_loss = net.mse_loss(m.params, make_batch(src[0]));
  EXPECT_LT(final_loss, 1e-2 * m.loss_history.front());
}

TEST(NoTransfer, DeterministicAndEmptyPoolRejected) {
  Rng rng(3);
  const std::vector<TaskDataset> src = {random_task(2, 10, 0, rng), random_task(2, 10, 1, rng)};
  const auto a = train_no_transfer(src, 2, small_config());
  const auto b = train_no_transfer(src, 2, small_config());
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.loss_history, b.loss_history);
  EXPECT_THROW(train_no_transfer({TaskDataset{}}, 2, small_config()), std::invalid_argument);
  EXPECT_THROW(train_no_transfer(src, 3, small_config()), std::invalid_argument);
}

TEST(Adapt, ZeroStepsLeavesModelUnchanged) {
  Rng rng(4);
  const std::vector<TaskDataset> src = {random_task(2, 10, 0, rng)};
  const auto base = train_no_transfer(src, 2, small_config());
  TrainConfig cfg = small_config();
  cfg.G_Ad = 0;
  const auto out = direct_adapt(base, random_task(2, 5, 9, rng), cfg);
  EXPECT_EQ(out.params, base.params);
  EXPECT_EQ(out.provenance, Provenance::Adapted);
}

TEST(Adapt, EveryTargetStartsFromTheSameBase) {
  Rng rng(5);
  const std::vector<TaskDataset> src = {random_task(2, 10, 0, rng)};
  const auto base = train_no_transfer(src, 2, small_config());
  std::vector<NetParams> starts;
  auto record = [&](int step, const NetParams& p) {
    if (step == 0) starts.push_back(p);
  };
  for (int t = 0; t < 3; ++t) direct_adapt(base, random_task(2, 5, 10 + t, rng), small_config(), record);
  ASSERT_EQ(starts.size(), 3u);
  for (const auto& s : starts) EXPECT_EQ(s, base.params);
}

TEST(Adapt, SmallRateDecreasesAdaptionLoss) {
  Rng rng(6);
  const std::vector<TaskDataset> src = {random_task(2, 10, 0, rng)};
  const auto base = train_no_transfer(src, 2, small_config());
  TrainConfig cfg = small_config();
  cfg.G_Ad = 30;
  cfg.beta = 1e-4;
  const auto d_ad = random_task(2, 6, 20, rng);
  for (AdaptRule rule : {AdaptRule::Adam, AdaptRule::Gd}) {
    const auto out = adapt(base, d_ad, cfg, rule);
    ASSERT_EQ(out.loss_history.size(), 31u);
    for (std::size_t i = 1; i < out.loss_history.size(); ++i)
      EXPECT_LE(out.loss_history[i], out.loss_history[i - 1]) << to_string(rule) << " step " << i;
  }
}

TEST(Adapt, MetaAdaptIsPlainGradientDescent) {
  Rng rng(7);
  const std::vector<TaskDataset> src = {random_task(2, 10, 0, rng), random_task(2, 10, 1, rng)};
  TrainConfig cfg = small_config();
  cfg.K_S = 2;
  const auto base = meta_train(src.size(), fixed_split_drawer(src, cfg.support_size), 2, cfg);
  const auto d_ad = random_task(2, 5, 30, rng);
  const auto out = meta_adapt(base, d_ad, cfg);

  const Network net(base.spec);
  const Batch b = make_batch(d_ad);
  NetParams p = base.params;
  for (int g = 0; g < cfg.G_Ad; ++g) p = gd_step(p, net.backward(p, b).grad, cfg.beta);
  EXPECT_EQ(out.params, p);

  TrainedModel nt = base;
  nt.provenance = Provenance::NoTransfer;
  EXPECT_THROW(meta_adapt(nt, d_ad, cfg), std::invalid_argument);
}

TEST(InnerAdapt, ZeroStepsAndEmptySupport) {
  const Network net(scalar_spec());
  const NetParams p = scalar_params(0.3, -0.2);
  const auto u = inner_adapt(net, p, scalar_batch(1.0, 2.0), 0, 0.1);
  EXPECT_EQ(u.adapted, p);
  EXPECT_TRUE(u.iterates.empty());
  const Batch empty{Eigen::MatrixXd(1, 0), Eigen::MatrixXd(1, 0)};
  EXPECT_THROW(inner_adapt(net, p, empty, 1, 0.1), std::invalid_argument);
  EXPECT_NO_THROW(inner_adapt(net, p, empty, 0, 0.1));
}

TEST(InnerAdapt, QuadraticClosedForm) {
  // x = 0 makes the loss (b - a)^2 in the bias alone.
  const Network net(scalar_spec());
  const double a = 1.5, b0 = -0.5, beta = 0.1;
  const auto u = inner_adapt(net, scalar_params(0.7, b0), scalar_batch(0.0, a), 3, beta);
  double b = b0;
  for (int g = 0; g < 3; ++g) b -= beta * 2.0 * (b - a);
  EXPECT_NEAR(u.adapted.layers[0].b(0), b, 1e-15);
  EXPECT_EQ(u.adapted.layers[0].W(0, 0), 0.7);
  EXPECT_NEAR(u.adapted.layers[0].b(0) - a, (b0 - a) * std::pow(1.0 - 2.0 * beta, 3), 1e-15);
}

TEST(InnerAdapt, MatchesManualGradientSteps) {
  Rng rng(8);
  const LayerSpec spec = LayerSpec::mlp(4, {8});
  const Network net(spec);
  const NetParams omega = init_params(spec, rng, InitFan::FanIn);
  const Batch sup = make_batch(random_task(2, 5, 0, rng));
  const auto u = inner_adapt(net, omega, sup, 3, 0.05);
  NetParams p = omega;
  for (int g = 0; g < 3; ++g) {
    EXPECT_EQ(u.iterates[static_cast<std::size_t>(g)], p);
    p = gd_step(p, net.backward(p, sup).grad, 0.05);
  }
  EXPECT_EQ(u.adapted, p);
}

TEST(MetaGradient, ZeroInnerStepsModesCoincide) {
  Rng rng(9);
  const LayerSpec spec = LayerSpec::mlp(4, {8});
  const Network net(spec);
  const NetParams omega = init_params(spec, rng, InitFan::FanIn);
  std::vector<MetaTask> tasks;
  for (int k = 0; k < 3; ++k)
    tasks.push_back({make_batch(random_task(2, 3, k, rng)), make_batch(random_task(2, 4, k, rng))});
  const auto e = meta_gradient(net, omega, tasks, 0, 0.1, MetaMode::Exact);
  const auto f = meta_gradient(net, omega, tasks, 0, 0.1, MetaMode::FirstOrder);
  EXPECT_EQ(e.grad, f.grad);
  NetParams sum = omega.zeros_like();
  for (const auto& t : tasks) sum += net.backward(omega, t.query).grad;
  EXPECT_EQ(e.grad, sum);
}

TEST(MetaGradient, ScalarQuadraticFormulas) {
  // Support loss (b - a)^2, query loss (b - c)^2, both at x = 0.
  const Network net(scalar_spec());
  const double a = 1.0, c = -2.0, b0 = 0.4, beta = 0.1;
  const std::vector<MetaTask> tasks = {{scalar_batch(0.0, a), scalar_batch(0.0, c)}};
  const double b1 = b0 - beta * 2.0 * (b0 - a);
  const auto e = meta_gradient(net, scalar_params(0.0, b0), tasks, 1, beta, MetaMode::Exact);
  const auto f = meta_gradient(net, scalar_params(0.0, b0), tasks, 1, beta, MetaMode::FirstOrder);
  EXPECT_NEAR(e.grad.layers[0].b(0), 2.0 * (b1 - c) * (1.0 - 2.0 * beta), 1e-14);
  EXPECT_NEAR(f.grad.layers[0].b(0), 2.0 * (b1 - c), 1e-14);
  EXPECT_NEAR(e.meta_loss, (b1 - c) * (b1 - c), 1e-14);
}

TEST(MetaGradient, FiniteDifferenceAgreement) {
  GradcheckConfig cfg;
  cfg.seeds = 2;
  for (const auto& r : check_meta_gradient(cfg)) EXPECT_TRUE(r.pass) << r.name << " " << r.max_rel_error;
}

TEST(MetaGradient, FirstOrderApproachesExactAtSmallRate) {
  Rng rng(10);
  const LayerSpec spec = LayerSpec::mlp(4, {8});
  const Network net(spec);
  const NetParams omega = init_params(spec, rng, InitFan::FanIn);
  std::vector<MetaTask> tasks;
  for (int k = 0; k < 2; ++k)
    tasks.push_back({make_batch(random_task(2, 5, k, rng)), make_batch(random_task(2, 5, k, rng))});
  auto gap = [&](double beta) {
    const auto e = meta_gradient(net, omega, tasks, 3, beta, MetaMode::Exact);
    const auto f = meta_gradient(net, omega, tasks, 3, beta, MetaMode::FirstOrder);
    NetParams d = e.grad;
    d.axpy(-1.0, f.grad);
    return norm(d) / norm(e.grad);
  };
  EXPECT_LT(gap(1e-8), 0.05);
  EXPECT_GT(gap(1e-1), 1e-6);
}

TEST(MetaGradient, ThreadCountInvariant) {
  Rng rng(11);
  const LayerSpec spec = LayerSpec::mlp(4, {8});
  const Network net(spec);
  const NetParams omega = init_params(spec, rng, InitFan::FanIn);
  std::vector<MetaTask> tasks;
  for (int k = 0; k < 5; ++k)
    tasks.push_back({make_batch(random_task(2, 3, k, rng)), make_batch(random_task(2, 3, k, rng))});
  const auto one = meta_gradient(net, omega, tasks, 2, 0.05, MetaMode::Exact, 1, true);
  const auto three = meta_gradient(net, omega, tasks, 2, 0.05, MetaMode::Exact, 3, true);
  EXPECT_EQ(one.grad, three.grad);
  EXPECT_EQ(one.meta_loss, three.meta_loss);
  EXPECT_EQ(one.mean_cosine, three.mean_cosine);
}

TEST(MetaTrain, SingleTaskWithoutInnerStepsIsAdamOnQuery) {
  Rng rng(12);
  const TaskDataset sup = random_task(2, 3, 0, rng);
  TaskDataset que = random_task(2, 4, 0, rng);
  for (auto& p : que.pairs) p.user += 100;
  TaskDrawer fixed = [&](std::size_t, std::uint64_t) { return std::make_pair(sup, que); };
  TrainConfig cfg = small_config();
  cfg.K_S = 1;
  cfg.K_B = 1;
  cfg.G_Tr = 0;
  cfg.early_stop = false;
  const auto m = meta_train(1, fixed, 2, cfg);

  const Network net(m.spec);
  Rng init = make_rng(cfg.seed, Stream::NetInit);
  NetParams p = init_params(m.spec, init, cfg.init_fan);
  AdamState s = AdamState::for_params(p, cfg.rho1, cfg.rho2, cfg.eps);
  const Batch q = make_batch(que);
  for (int t = 0; t < cfg.meta_max_steps; ++t) adam_step(s, p, net.backward(p, q).grad, cfg.gamma);
  EXPECT_EQ(m.params, p);
  EXPECT_EQ(m.derivative_order, 1);
}

TEST(MetaTrain, DeterministicAndDerivativeOrder) {
  Rng rng(13);
  std::vector<TaskDataset> src;
  for (int k = 0; k < 4; ++k) src.push_back(random_task(2, 6, k, rng));
  const TrainConfig cfg = small_config();
  const auto a = meta_train(src.size(), fixed_split_drawer(src, cfg.support_size), 2, cfg);
  const auto b = meta_train(src.size(), fixed_split_drawer(src, cfg.support_size), 2, cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.loss_history, b.loss_history);
  EXPECT_EQ(a.similarity_history.size(), static_cast<std::size_t>(a.steps));
  EXPECT_EQ(a.derivative_order, cfg.G_Tr + 1);
  TrainConfig fo = cfg;
  fo.meta_mode = MetaMode::FirstOrder;
  EXPECT_EQ(meta_train(src.size(), fixed_split_drawer(src, cfg.support_size), 2, fo).derivative_order, 1);
}

TEST(MetaTrain, OverlappingSplitIsRejected) {
  Rng rng(14);
  const TaskDataset ds = random_task(2, 4, 0, rng);
  TaskDrawer leaky = [&](std::size_t, std::uint64_t) { return std::make_pair(ds, ds); };
  TrainConfig cfg = small_config();
  cfg.K_S = 1;
  cfg.K_B = 1;
  EXPECT_THROW(meta_train(1, leaky, 2, cfg), std::logic_error);
  EXPECT_THROW(require_disjoint(ds, ds), std::logic_error);
}

TEST(FixedSplit, DisjointWithRequestedSizes) {
  Rng rng(15);
  const std::vector<TaskDataset> src = {random_task(2, 7, 3, rng)};
  const auto draw = fixed_split_drawer(src, 3);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto [s, q] = draw(0, seed);
    EXPECT_EQ(s.size(), 3u);
    EXPECT_EQ(q.size(), 4u);
    EXPECT_NO_THROW(require_disjoint(s, q));
  }
  EXPECT_THROW(fixed_split_drawer(src, 7), std::invalid_argument);
}

TEST(Taylor, ZeroRateHasNoResidual) {
  Rng rng(16);
  const LayerSpec spec = LayerSpec::mlp(4, {8});
  const Network net(spec);
  const NetParams omega = init_params(spec, rng, InitFan::FanIn);
  const auto r = taylor_residual(net, omega, make_batch(random_task(2, 4, 0, rng)),
                                 make_batch(random_task(2, 4, 0, rng)), 0.0);
  EXPECT_EQ(r.residual, 0.0);
}

TEST(Taylor, LinearNetResidualIsHalfCurvature) {
  // A linear network has a loss exactly quadratic in its parameters.
  Rng rng(17);
  LayerSpec spec;
  spec.sizes = {4, 4};
  spec.activations = {Activation::Linear};
  const Network net(spec);
  const NetParams omega = init_params(spec, rng, InitFan::FanIn);
  const Batch sup = make_batch(random_task(2, 5, 0, rng));
  const Batch que = make_batch(random_task(2, 5, 0, rng));
  const double beta = 0.05;
  const NetParams g = net.backward(omega, sup).grad;
  const double curvature = dot(g, net.forward_param_jvp(omega, g, que).hvp);
  const auto r = taylor_residual(net, omega, sup, que, beta);
  EXPECT_NEAR(r.exact - r.approx, 0.5 * beta * beta * curvature, 1e-10 * std::abs(curvature));
}

TEST(Taylor, ResidualShrinksQuadratically) {
  Rng rng(18);
  const LayerSpec spec = LayerSpec::mlp(4, {16});
  const Network net(spec);
  const NetParams omega = init_params(spec, rng, InitFan::FanIn);
  const Batch sup = make_batch(random_task(2, 5, 0, rng));
  const Batch que = make_batch(random_task(2, 5, 0, rng));
  const double big = taylor_residual(net, omega, sup, que, 1e-3).residual;
  const double small = taylor_residual(net, omega, sup, que, 5e-4).residual;
  ASSERT_GT(big, 0.0);
  EXPECT_GE(small / big, 0.15);
  EXPECT_LE(small / big, 0.35);
}
