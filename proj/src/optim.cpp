#include "fddcsi/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace fddcsi {

NetParams gd_step(const NetParams& params, const NetParams& grads, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("gd_step: learning rate must be > 0");
  require_same_shape(params, grads, "gd_step");
  NetParams out = params;
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    out.layers[i].W.array() -= beta * grads.layers[i].W.array();
    out.layers[i].b.array() -= beta * grads.layers[i].b.array();
  }
  return out;
}

AdamState AdamState::for_params(const NetParams& params, double rho1, double rho2, double eps) {
  AdamState s;
  s.m = params.zeros_like();
  s.v = params.zeros_like();
  s.rho1 = rho1;
  s.rho2 = rho2;
  s.eps = eps;
  return s;
}

namespace {

template <typename P, typename G, typename M, typename V>
void adam_update(P&& p, const G& g, M&& m, V&& v, double rho1, double rho2, double c1, double c2, double eps,
                 double gamma) {
  m = rho1 * m + (1.0 - rho1) * g;
  v = rho2 * v + (1.0 - rho2) * g.square();
  p -= gamma * (m / c1) / ((v / c2).sqrt() + eps);
}

}  // namespace

void adam_step(AdamState& state, NetParams& params, const NetParams& grads, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("adam_step: learning rate must be > 0");
  require_same_shape(params, grads, "adam_step");
  if (state.m.layers.empty() && state.v.layers.empty()) {
    state.m = params.zeros_like();
    state.v = params.zeros_like();
  }
  require_same_shape(params, state.m, "adam_step (first moment)");
  require_same_shape(params, state.v, "adam_step (second moment)");

  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(state.rho1, t);
  const double c2 = 1.0 - std::pow(state.rho2, t);
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    adam_update(params.layers[i].W.array(), grads.layers[i].W.array(), state.m.layers[i].W.array(),
                state.v.layers[i].W.array(), state.rho1, state.rho2, c1, c2, state.eps, gamma);
    adam_update(params.layers[i].b.array(), grads.layers[i].b.array(), state.m.layers[i].b.array(),
                state.v.layers[i].b.array(), state.rho1, state.rho2, c1, c2, state.eps, gamma);
  }
}

}  // namespace fddcsi
