#include "fddcsi/verify.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fddcsi {

double relative_error(double a, double b, double floor) {
  const double scale = std::max({std::abs(a), std::abs(b), floor});
  return scale > 0.0 ? std::abs(a - b) / scale : 0.0;
}

namespace {

Batch random_batch(int in, int out, int count, Rng& rng) {
  Batch b{Eigen::MatrixXd(in, count), Eigen::MatrixXd(out, count)};
  for (Eigen::Index j = 0; j < count; ++j) {
    for (Eigen::Index i = 0; i < in; ++i) b.xs(i, j) = standard_normal(rng);
    for (Eigen::Index i = 0; i < out; ++i) b.ys(i, j) = standard_normal(rng);
  }
  return b;
}

/// Sign pattern of every ReLU pre-activation.
std::vector<bool> relu_pattern(const Network& net, const NetParams& p, const Batch& batch) {
  const GradTape tape = net.forward(p, batch.xs);
  std::vector<bool> out;
  for (std::size_t l = 0; l < tape.z.size(); ++l) {
    if (net.spec().activations[l] != Activation::Relu) continue;
    const auto& z = tape.z[l];
    for (Eigen::Index k = 0; k < z.size(); ++k) out.push_back(z.data()[k] > 0.0);
  }
  return out;
}

std::vector<bool> meta_pattern(const Network& net, const NetParams& omega, const std::vector<MetaTask>& tasks,
                               int G_Tr, double beta) {
  std::vector<bool> out;
  for (const auto& task : tasks) {
    const InnerUnroll u = inner_adapt(net, omega, task.support, G_Tr, beta);
    for (const auto& it : u.iterates) {
      auto p = relu_pattern(net, it, task.support);
      out.insert(out.end(), p.begin(), p.end());
    }
    auto q = relu_pattern(net, u.adapted, task.query);
    out.insert(out.end(), q.begin(), q.end());
  }
  return out;
}

void require_probes(const GradcheckConfig& cfg) {
  if (cfg.probe_count < 1) throw std::invalid_argument("gradcheck: probe count must be >= 1");
  if (cfg.seeds < 1) throw std::invalid_argument("gradcheck: seed count must be >= 1");
  if (!(cfg.step > 0.0)) throw std::invalid_argument("gradcheck: step must be > 0");
}

double max_abs(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

/// Central-difference check of `analytic` against `f` on random coordinates.
/// `pattern` detects stencils that cross a ReLU kink; such coordinates are redrawn.
template <typename F, typename P>
void probe_coordinates(SuiteResult& res, const NetParams& at, const Eigen::VectorXd& analytic, int count, double step,
                       double floor_frac, Rng& rng, F&& f, P&& pattern) {
  const std::size_t n = at.size();
  const double floor = floor_frac * max_abs(analytic);
  const auto base = pattern(at);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  int done = 0;
  int attempts = 0;
  while (done < count) {
    if (++attempts > 20 * count + 100) throw std::runtime_error("gradcheck: too many kink-crossing probes");
    const std::size_t i = pick(rng);
    NetParams plus = at;
    NetParams minus = at;
    plus.at(i) += step;
    minus.at(i) -= step;
    if (pattern(plus) != base || pattern(minus) != base) {
      ++res.skipped;
      continue;
    }
    const double fd = (f(plus) - f(minus)) / (2.0 * step);
    res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic[static_cast<Eigen::Index>(i)], fd, floor));
    ++done;
  }
  res.probes += done;
}

}  // namespace

SuiteResult check_backward(const GradcheckConfig& cfg) {
  require_probes(cfg);
  SuiteResult res{"backward-vs-fd", 0.0, cfg.gradient_tol, 0, 0, false};
  const LayerSpec spec = LayerSpec::mlp(2 * cfg.M, cfg.hidden);
  const Network net(spec);
  for (int s = 0; s < cfg.seeds; ++s) {
    Rng rng = make_rng(cfg.seed, Stream::Probe, {1, static_cast<std::uint64_t>(s)});
    const NetParams w = init_params(spec, rng);
    const Batch batch = random_batch(spec.input_width(), spec.output_width(), cfg.batch, rng);
    const Eigen::VectorXd g = net.backward(w, batch).grad.flatten();
    probe_coordinates(
        res, w, g, cfg.probe_count, cfg.step, cfg.floor, rng, [&](const NetParams& p) { return net.mse_loss(p, batch); },
        [&](const NetParams& p) { return relu_pattern(net, p, batch); });
  }
  res.pass = res.max_rel_error < res.tolerance;
  return res;
}

SuiteResult check_hvp(const GradcheckConfig& cfg) {
  require_probes(cfg);
  SuiteResult res{"hvp-symmetry-and-fd", 0.0, cfg.hvp_tol, 0, 0, false};
  const LayerSpec spec = LayerSpec::mlp(2 * cfg.M, cfg.hidden);
  const Network net(spec);
  auto random_direction = [&](Rng& rng) {
    NetParams d = zero_params(spec);
    for (std::size_t i = 0; i < d.size(); ++i) d.at(i) = standard_normal(rng);
    return d;
  };
  for (int s = 0; s < cfg.seeds; ++s) {
    Rng rng = make_rng(cfg.seed, Stream::Probe, {2, static_cast<std::uint64_t>(s)});
    const NetParams w = init_params(spec, rng);
    const Batch batch = random_batch(spec.input_width(), spec.output_width(), cfg.batch, rng);
    const NetParams u = random_direction(rng);
    const NetParams v = random_direction(rng);
    const NetParams hu = net.forward_param_jvp(w, u, batch).hvp;
    const NetParams hv = net.forward_param_jvp(w, v, batch).hvp;
    const double uhv = dot(u, hv);
    const double vhu = dot(v, hu);
    res.max_rel_error = std::max(res.max_rel_error, relative_error(uhv, vhu, 0.0));
    ++res.probes;

    // Hv against differences of the gradient along v, one coordinate at a time.
    const double vn = norm(v);
    const Eigen::VectorXd hv_flat = hv.flatten() / vn;
    const double floor = cfg.floor * max_abs(hv_flat);
    const auto base = relu_pattern(net, w, batch);
    // Fourth-order stencil: the gradient is a polynomial of degree > 2 along v.
    std::vector<Eigen::VectorXd> g;
    bool kink = false;
    for (double k : {-2.0, -1.0, 1.0, 2.0}) {
      NetParams p = w;
      p.axpy(k * cfg.step / vn, v);
      if (relu_pattern(net, p, batch) != base) kink = true;
      g.push_back(net.backward(p, batch).grad.flatten());
    }
    if (kink) {
      ++res.skipped;
      continue;
    }
    const Eigen::VectorXd fd = (g[0] - 8.0 * g[1] + 8.0 * g[2] - g[3]) / (12.0 * cfg.step);
    std::uniform_int_distribution<Eigen::Index> pick(0, fd.size() - 1);
    for (int k = 0; k < cfg.probe_count; ++k) {
      const Eigen::Index i = pick(rng);
      res.max_rel_error = std::max(res.max_rel_error, relative_error(hv_flat[i], fd[i], floor));
      ++res.probes;
    }
  }
  res.pass = res.max_rel_error < res.tolerance;
  return res;
}

std::vector<SuiteResult> check_meta_gradient(const GradcheckConfig& cfg) {
  require_probes(cfg);
  const LayerSpec spec = LayerSpec::mlp(2 * cfg.meta_M, cfg.meta_hidden);
  const Network net(spec);
  std::vector<SuiteResult> out;
  for (int G : cfg.meta_G_Tr) {
    SuiteResult res{"meta-gradient-vs-fd G_Tr=" + std::to_string(G), 0.0, cfg.meta_tol, 0, 0, false};
    for (int s = 0; s < cfg.seeds; ++s) {
      Rng rng = make_rng(cfg.seed, Stream::Probe, {3, static_cast<std::uint64_t>(G), static_cast<std::uint64_t>(s)});
      const NetParams w = init_params(spec, rng);
      std::vector<MetaTask> tasks;
      for (int k = 0; k < cfg.meta_tasks; ++k)
        tasks.push_back({random_batch(spec.input_width(), spec.output_width(), cfg.meta_set, rng),
                         random_batch(spec.input_width(), spec.output_width(), cfg.meta_set, rng)});
      const Eigen::VectorXd g =
          meta_gradient(net, w, tasks, G, cfg.meta_beta, MetaMode::Exact).grad.flatten();
      const int count = std::min<int>(cfg.probe_count, static_cast<int>(w.size()));
      probe_coordinates(
          res, w, g, count, cfg.step, cfg.floor, rng,
          [&](const NetParams& p) { return meta_loss(net, p, tasks, G, cfg.meta_beta); },
          [&](const NetParams& p) { return meta_pattern(net, p, tasks, G, cfg.meta_beta); });
    }
    res.pass = res.max_rel_error < res.tolerance;
    out.push_back(res);
  }
  return out;
}

std::vector<SuiteResult> run_gradcheck(const GradcheckConfig& cfg) {
  std::vector<SuiteResult> out{check_backward(cfg), check_hvp(cfg)};
  for (auto& r : check_meta_gradient(cfg)) out.push_back(r);
  return out;
}

}  // namespace fddcsi
