#include "fddcsi/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "fddcsi/parallel.hpp"

namespace fddcsi {

std::string to_string(MetaMode mode) { return mode == MetaMode::Exact ? "exact" : "first-order"; }
std::string to_string(AdaptRule rule) { return rule == AdaptRule::Adam ? "adam" : "gd"; }

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::Init: return "init";
    case Provenance::NoTransfer: return "no-transfer";
    case Provenance::Meta: return "meta";
    case Provenance::Adapted: return "adapted";
  }
  return "?";
}

MetaMode meta_mode_from_string(const std::string& s) {
  if (s == "exact") return MetaMode::Exact;
  if (s == "first-order") return MetaMode::FirstOrder;
  throw std::invalid_argument("unknown meta mode '" + s + "' (expected exact or first-order)");
}

AdaptRule adapt_rule_from_string(const std::string& s) {
  if (s == "adam") return AdaptRule::Adam;
  if (s == "gd") return AdaptRule::Gd;
  throw std::invalid_argument("unknown adaption rule '" + s + "' (expected adam or gd)");
}

Provenance provenance_from_string(const std::string& s) {
  for (auto p : {Provenance::Init, Provenance::NoTransfer, Provenance::Meta, Provenance::Adapted})
    if (to_string(p) == s) return p;
  throw std::invalid_argument("unknown provenance '" + s + "'");
}

void TrainConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("TrainConfig: ") + name + " must be >= 1");
  };
  auto non_negative = [](int v, const char* name) {
    if (v < 0) throw std::invalid_argument(std::string("TrainConfig: ") + name + " must be >= 0");
  };
  positive(V, "V");
  positive(K_S, "K_S");
  positive(K_T, "K_T");
  positive(K_B, "K_B");
  positive(N_Tr, "N_Tr");
  positive(N_Ad, "N_Ad");
  positive(N_Te, "N_Te");
  positive(U, "U");
  positive(conv_window, "conv_window");
  positive(threads, "threads");
  non_negative(G_Tr, "G_Tr");
  non_negative(G_Ad, "G_Ad");
  non_negative(max_steps, "max_steps");
  non_negative(meta_max_steps, "meta_max_steps");
  if (K_B > K_S) throw std::invalid_argument("TrainConfig: K_B must not exceed K_S");
  if (support_size < 1 || support_size >= N_Tr)
    throw std::invalid_argument("TrainConfig: support_size must be in [1, N_Tr)");
  if (!(gamma > 0.0) || !(beta > 0.0)) throw std::invalid_argument("TrainConfig: learning rates must be > 0");
  if (hidden.empty()) throw std::invalid_argument("TrainConfig: need at least one hidden layer");
  for (int h : hidden) positive(h, "hidden width");
}

bool ConvergenceMonitor::push(double loss) {
  losses_.push_back(loss);
  const auto n = losses_.size();
  const auto w = static_cast<std::size_t>(window_);
  if (n < 2 * w || n % w != 0) return false;
  const double cur = std::accumulate(losses_.end() - static_cast<std::ptrdiff_t>(w), losses_.end(), 0.0) / w;
  const double prev = std::accumulate(losses_.end() - static_cast<std::ptrdiff_t>(2 * w),
                                      losses_.end() - static_cast<std::ptrdiff_t>(w), 0.0) /
                      w;
  if (!(prev > 0.0)) return true;
  return (prev - cur) / prev < tol_;
}

Batch make_batch(const std::vector<const SamplePair*>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("make_batch: no samples");
  const auto in = pairs.front()->x.size();
  const auto out = pairs.front()->y.size();
  Batch b{Eigen::MatrixXd(in, static_cast<Eigen::Index>(pairs.size())),
          Eigen::MatrixXd(out, static_cast<Eigen::Index>(pairs.size()))};
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i]->x.size() != in || pairs[i]->y.size() != out)
      throw std::invalid_argument("make_batch: samples of different lengths");
    b.xs.col(static_cast<Eigen::Index>(i)) = pairs[i]->x;
    b.ys.col(static_cast<Eigen::Index>(i)) = pairs[i]->y;
  }
  return b;
}

Batch make_batch(const TaskDataset& ds) {
  std::vector<const SamplePair*> ptrs;
  ptrs.reserve(ds.size());
  for (const auto& p : ds.pairs) ptrs.push_back(&p);
  return make_batch(ptrs);
}

LayerSpec network_spec(int M, const TrainConfig& cfg) {
  if (M < 1) throw std::invalid_argument("network_spec: M must be >= 1");
  return LayerSpec::mlp(2 * M, cfg.hidden);
}

namespace {

void descend(NetParams& params, const NetParams& grads, double beta) {
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    params.layers[i].W.array() -= beta * grads.layers[i].W.array();
    params.layers[i].b.array() -= beta * grads.layers[i].b.array();
  }
}

NetParams initial_params(const LayerSpec& spec, const TrainConfig& cfg) {
  Rng rng = make_rng(cfg.seed, Stream::NetInit);
  return init_params(spec, rng, cfg.init_fan);
}

void check_width(const TaskDataset& ds, int M, const char* what) {
  for (const auto& p : ds.pairs)
    if (p.x.size() != 2 * M || p.y.size() != 2 * M)
      throw std::invalid_argument(std::string(what) + ": dataset vectors have length " + std::to_string(p.x.size()) +
                                  ", network expects 2M = " + std::to_string(2 * M));
}

}  // namespace

TrainedModel train_no_transfer(const std::vector<TaskDataset>& sources, int M, const TrainConfig& cfg) {
  cfg.validate();
  std::vector<const SamplePair*> pool;
  for (const auto& ds : sources) {
    check_width(ds, M, "train_no_transfer");
    for (const auto& p : ds.pairs) pool.push_back(&p);
  }
  if (pool.empty()) throw std::invalid_argument("train_no_transfer: empty training pool");

  TrainedModel model;
  model.spec = network_spec(M, cfg);
  model.config = cfg;
  model.provenance = Provenance::NoTransfer;
  model.derivative_order = 1;
  const Network net(model.spec);
  model.params = initial_params(model.spec, cfg);
  model.loss_history.push_back(net.mse_loss(model.params, make_batch(pool)));

  Rng rng = make_rng(cfg.seed, Stream::Batch, {0});
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  AdamState adam = AdamState::for_params(model.params, cfg.rho1, cfg.rho2, cfg.eps);
  ConvergenceMonitor monitor(cfg.conv_window, cfg.conv_tol);
  std::vector<const SamplePair*> chosen(static_cast<std::size_t>(cfg.V));
  for (int step = 1; step <= cfg.max_steps; ++step) {
    for (auto& c : chosen) c = pool[pick(rng)];
    const auto g = net.backward(model.params, make_batch(chosen));
    adam_step(adam, model.params, g.grad, cfg.gamma);
    model.loss_history.push_back(g.loss);
    model.steps = step;
    if (monitor.push(g.loss) && cfg.early_stop) {
      model.converged = true;
      break;
    }
  }
  return model;
}

TrainedModel adapt(const TrainedModel& base, const TaskDataset& d_ad, const TrainConfig& cfg, AdaptRule rule,
                   const AdaptObserver& observe) {
  if (d_ad.empty()) throw std::invalid_argument("adapt: empty adaption set");
  if (!(cfg.beta > 0.0)) throw std::invalid_argument("adapt: learning rate must be > 0");
  if (cfg.G_Ad < 0) throw std::invalid_argument("adapt: G_Ad must be >= 0");
  const Network net(base.spec);
  net.check_params(base.params);
  check_width(d_ad, base.spec.input_width() / 2, "adapt");

  TrainedModel out;
  out.spec = base.spec;
  out.params = base.params;
  out.provenance = Provenance::Adapted;
  out.config = cfg;
  out.derivative_order = 1;

  const Batch batch = make_batch(d_ad);
  AdamState adam = AdamState::for_params(out.params, cfg.rho1, cfg.rho2, cfg.eps);
  if (observe) observe(0, out.params);
  for (int g = 1; g <= cfg.G_Ad; ++g) {
    const auto grad = net.backward(out.params, batch);
    out.loss_history.push_back(grad.loss);
    if (rule == AdaptRule::Adam)
      adam_step(adam, out.params, grad.grad, cfg.beta);
    else
      descend(out.params, grad.grad, cfg.beta);
    out.steps = g;
    if (observe) observe(g, out.params);
  }
  out.loss_history.push_back(net.mse_loss(out.params, batch));
  return out;
}

TrainedModel direct_adapt(const TrainedModel& base, const TaskDataset& d_ad, const TrainConfig& cfg,
                          const AdaptObserver& observe) {
  if (base.provenance != Provenance::NoTransfer && base.provenance != Provenance::Meta)
    throw std::invalid_argument("direct_adapt: base model must be a no-transfer or meta-trained model, got " +
                                to_string(base.provenance));
  return adapt(base, d_ad, cfg, cfg.direct_rule, observe);
}

TrainedModel meta_adapt(const TrainedModel& base, const TaskDataset& d_ad, const TrainConfig& cfg,
                        const AdaptObserver& observe) {
  if (base.provenance != Provenance::Meta)
    throw std::invalid_argument("meta_adapt: base model must be meta-trained, got " + to_string(base.provenance));
  return adapt(base, d_ad, cfg, cfg.meta_rule, observe);
}

InnerUnroll inner_adapt(const Network& net, const NetParams& omega, const Batch& support, int G_Tr, double beta) {
  if (G_Tr < 0) throw std::invalid_argument("inner_adapt: G_Tr must be >= 0");
  if (G_Tr > 0 && support.count() == 0) throw std::invalid_argument("inner_adapt: empty support set");
  InnerUnroll out;
  out.adapted = omega;
  out.iterates.reserve(static_cast<std::size_t>(G_Tr));
  for (int g = 0; g < G_Tr; ++g) {
    auto grad = net.backward(out.adapted, support);
    out.iterates.push_back(out.adapted);
    out.losses.push_back(grad.loss);
    descend(out.adapted, grad.grad, beta);
    out.grads.push_back(std::move(grad.grad));
  }
  return out;
}

namespace {

double cosine(const NetParams& a, const NetParams& b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

}  // namespace

MetaGradient meta_gradient(const Network& net, const NetParams& omega, const std::vector<MetaTask>& tasks, int G_Tr,
                           double beta, MetaMode mode, int threads, bool track_similarity) {
  if (tasks.empty()) throw std::invalid_argument("meta_gradient: no tasks");
  net.check_params(omega);

  struct PerTask {
    NetParams grad;
    double loss = 0.0;
    double cosine = 0.0;
  };
  std::vector<PerTask> results(tasks.size());
  parallel_for(tasks.size(), threads, [&](std::size_t k) {
    const auto& task = tasks[k];
    const InnerUnroll unroll = inner_adapt(net, omega, task.support, G_Tr, beta);
    auto q = net.backward(unroll.adapted, task.query);
    NetParams v = std::move(q.grad);
    if (track_similarity) {
      if (G_Tr == 0)
        results[k].cosine = cosine(net.backward(omega, task.support).grad, v);
      else
        results[k].cosine = cosine(unroll.grads.front(), net.backward(omega, task.query).grad);
    }
    if (mode == MetaMode::Exact) {
      // v <- (I - beta H_sup(Omega_g)) v, from the last inner step back to the first.
      for (int g = G_Tr - 1; g >= 0; --g) {
        const auto hv = net.forward_param_jvp(unroll.iterates[static_cast<std::size_t>(g)], v, task.support);
        v.axpy(-beta, hv.hvp);
      }
    }
    results[k].grad = std::move(v);
    results[k].loss = q.loss;
  });

  MetaGradient out;
  out.grad = omega.zeros_like();
  for (const auto& r : results) {
    out.grad += r.grad;
    out.meta_loss += r.loss;
    out.mean_cosine += r.cosine;
  }
  out.mean_cosine /= static_cast<double>(tasks.size());
  return out;
}

double meta_loss(const Network& net, const NetParams& omega, const std::vector<MetaTask>& tasks, int G_Tr,
                 double beta) {
  double total = 0.0;
  for (const auto& task : tasks) {
    const InnerUnroll unroll = inner_adapt(net, omega, task.support, G_Tr, beta);
    total += net.mse_loss(unroll.adapted, task.query);
  }
  return total;
}

void require_disjoint(const TaskDataset& support, const TaskDataset& query) {
  std::set<std::pair<std::int64_t, double>> keys;
  for (const auto& p : support.pairs) keys.emplace(p.user, p.f_up);
  for (const auto& p : query.pairs)
    if (keys.count({p.user, p.f_up}))
      throw std::logic_error("support and query sets of environment " + std::to_string(support.env_id) +
                             " share a sample");
}

TaskDrawer fixed_split_drawer(const std::vector<TaskDataset>& sources, int support_size) {
  for (const auto& ds : sources)
    if (static_cast<int>(ds.size()) <= support_size)
      throw std::invalid_argument("fixed_split_drawer: task of environment " + std::to_string(ds.env_id) + " has " +
                                  std::to_string(ds.size()) + " samples, need more than support size " +
                                  std::to_string(support_size));
  return [&sources, support_size](std::size_t task, std::uint64_t visit_seed) {
    const TaskDataset& ds = sources.at(task);
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(visit_seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::pair<TaskDataset, TaskDataset> out;
    out.first.env_id = out.second.env_id = ds.env_id;
    out.first.role = Role::TrainSupport;
    out.second.role = Role::TrainQuery;
    for (std::size_t i = 0; i < order.size(); ++i)
      (static_cast<int>(i) < support_size ? out.first : out.second).pairs.push_back(ds.pairs[order[i]]);
    return out;
  };
}

TaskDrawer regenerating_drawer(const std::vector<Environment>& envs, const ArrayConfig& array,
                               const DatasetSpec& spec, int support_size, int query_size) {
  return [&envs, array, spec, support_size, query_size](std::size_t task, std::uint64_t visit_seed) {
    EnvironmentSampler sampler(envs.at(task), array, spec, visit_seed);
    std::pair<TaskDataset, TaskDataset> out;
    out.first = sampler.draw(Role::TrainSupport, support_size);
    out.second = sampler.draw(Role::TrainQuery, query_size);
    return out;
  };
}

namespace {

std::vector<MetaTask> draw_meta_batch(std::size_t task_count, const TaskDrawer& draw, int K_B, std::uint64_t seed,
                                      std::uint64_t step, Rng& rng) {
  std::vector<std::size_t> ids(task_count);
  std::iota(ids.begin(), ids.end(), 0);
  // Partial Fisher-Yates: K_B distinct tasks.
  for (std::size_t i = 0; i < static_cast<std::size_t>(K_B); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, task_count - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  std::vector<MetaTask> tasks;
  tasks.reserve(static_cast<std::size_t>(K_B));
  for (std::size_t slot = 0; slot < static_cast<std::size_t>(K_B); ++slot) {
    auto [sup, que] = draw(ids[slot], derive_seed(seed, Stream::TaskSplit, {step, slot}));
    if (sup.empty() || que.empty()) throw std::invalid_argument("meta_train: task with empty support or query set");
    require_disjoint(sup, que);
    tasks.push_back({make_batch(sup), make_batch(que)});
  }
  return tasks;
}

}  // namespace

TrainedModel meta_train(std::size_t task_count, const TaskDrawer& draw, int M, const TrainConfig& cfg) {
  cfg.validate();
  if (task_count < static_cast<std::size_t>(cfg.K_B))
    throw std::invalid_argument("meta_train: K_B = " + std::to_string(cfg.K_B) + " exceeds the " +
                                std::to_string(task_count) + " available source tasks");

  TrainedModel model;
  model.spec = network_spec(M, cfg);
  model.config = cfg;
  model.provenance = Provenance::Meta;
  model.derivative_order = cfg.meta_mode == MetaMode::Exact ? cfg.G_Tr + 1 : 1;
  const Network net(model.spec);
  model.params = initial_params(model.spec, cfg);

  Rng rng = make_rng(cfg.seed, Stream::Batch, {1});
  {
    const auto tasks = draw_meta_batch(task_count, draw, cfg.K_B, cfg.seed, 0, rng);
    model.loss_history.push_back(meta_loss(net, model.params, tasks, cfg.G_Tr, cfg.beta) / cfg.K_B);
  }

  AdamState adam = AdamState::for_params(model.params, cfg.rho1, cfg.rho2, cfg.eps);
  ConvergenceMonitor monitor(cfg.conv_window, cfg.conv_tol);
  for (int step = 1; step <= cfg.meta_max_steps; ++step) {
    const auto tasks = draw_meta_batch(task_count, draw, cfg.K_B, cfg.seed, static_cast<std::uint64_t>(step), rng);
    const MetaGradient mg =
        meta_gradient(net, model.params, tasks, cfg.G_Tr, cfg.beta, cfg.meta_mode, cfg.threads, cfg.track_similarity);
    adam_step(adam, model.params, mg.grad, cfg.gamma);
    const double loss = mg.meta_loss / cfg.K_B;
    model.loss_history.push_back(loss);
    if (cfg.track_similarity) model.similarity_history.push_back(mg.mean_cosine);
    model.steps = step;
    if (monitor.push(loss) && cfg.early_stop) {
      model.converged = true;
      break;
    }
  }
  return model;
}

TaylorResidual taylor_residual(const Network& net, const NetParams& omega, const Batch& support, const Batch& query,
                               double beta) {
  if (beta < 0.0) throw std::invalid_argument("taylor_residual: beta must be >= 0");
  const NetParams g_sup = net.backward(omega, support).grad;
  const NetParams g_que = net.backward(omega, query).grad;
  const double base = net.mse_loss(omega, query);
  NetParams stepped = omega;
  descend(stepped, g_sup, beta);

  TaylorResidual out;
  out.exact = net.mse_loss(stepped, query);
  out.approx = base - beta * dot(g_sup, g_que);
  out.residual = std::abs(out.exact - out.approx);
  return out;
}

}  // namespace fddcsi
