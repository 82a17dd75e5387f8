#pragma once

// Finite-difference checks of the hand-written derivatives.

#include <cstdint>
#include <string>
#include <vector>

#include "fddcsi/net.hpp"
#include "fddcsi/transfer.hpp"

namespace fddcsi {

/// |a - b| / max(|a|, |b|, floor).
double relative_error(double a, double b, double floor);

struct SuiteResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  int probes = 0;
  int skipped = 0;  // probes redrawn because a ReLU changed sign inside the stencil
  bool pass = false;
};

struct GradcheckConfig {
  int probe_count = 100;  // coordinates per seed
  int seeds = 5;
  std::uint64_t seed = 1;
  int M = 16;
  std::vector<int> hidden = {128, 128};
  int batch = 16;
  double step = 1e-4;
  double floor = 1e-4;  // relative-error floor, as a fraction of max |gradient|
  double gradient_tol = 1e-6;
  double hvp_tol = 1e-6;
  double meta_tol = 1e-5;
  /// Small net for the meta-gradient suite.
  int meta_M = 2;
  std::vector<int> meta_hidden = {8};
  std::vector<int> meta_G_Tr = {1, 2, 3};
  double meta_beta = 0.05;
  int meta_tasks = 2;
  int meta_set = 5;
};

/// Backward pass against central differences of the loss.
SuiteResult check_backward(const GradcheckConfig& cfg);
/// u.(Hv) == v.(Hu), and Hv against central differences of the gradient.
SuiteResult check_hvp(const GradcheckConfig& cfg);
/// Exact meta-gradient against central differences of the composed meta-loss,
/// one suite per G_Tr.
std::vector<SuiteResult> check_meta_gradient(const GradcheckConfig& cfg);

std::vector<SuiteResult> run_gradcheck(const GradcheckConfig& cfg);

}  // namespace fddcsi
