#pragma once

#include <cstdint>

#include "fddcsi/net.hpp"

namespace fddcsi {

/// params - beta * grads.
NetParams gd_step(const NetParams& params, const NetParams& grads, double beta);

struct AdamState {
  NetParams m;
  NetParams v;
  std::uint64_t t = 0;
  double rho1 = 0.9;
  double rho2 = 0.999;
  double eps = 1e-8;

  /// Zero moments shaped like `params`.
  static AdamState for_params(const NetParams& params, double rho1 = 0.9, double rho2 = 0.999, double eps = 1e-8);
};

/// One bias-corrected ADAM update; eps is added outside the square root.
void adam_step(AdamState& state, NetParams& params, const NetParams& grads, double gamma);

}  // namespace fddcsi
