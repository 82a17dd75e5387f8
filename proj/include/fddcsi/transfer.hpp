#pragma once

// Training regimes for uplink-to-downlink prediction:
//   * no-transfer: ADAM on minibatches pooled over all source tasks;
//   * direct-transfer: the pooled model fine-tuned on each target's adaption set;
//   * meta-learning: an initialization trained through G_Tr unrolled inner
//     gradient steps per task, then fine-tuned on each target.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fddcsi/channel.hpp"
#include "fddcsi/net.hpp"
#include "fddcsi/optim.hpp"

namespace fddcsi {

enum class MetaMode { Exact, FirstOrder };
enum class AdaptRule { Adam, Gd };
enum class Provenance : std::uint8_t { Init = 0, NoTransfer = 1, Meta = 2, Adapted = 3 };

std::string to_string(MetaMode mode);
std::string to_string(AdaptRule rule);
std::string to_string(Provenance p);
MetaMode meta_mode_from_string(const std::string& s);
AdaptRule adapt_rule_from_string(const std::string& s);
Provenance provenance_from_string(const std::string& s);

struct TrainConfig {
  double gamma = 1e-3;  // across-task / pooled ADAM rate
  double beta = 1e-6;   // inner-task and adaption rate
  double rho1 = 0.9;
  double rho2 = 0.999;
  double eps = 1e-8;
  int V = 128;  // batch size
  int K_S = 1500;
  int K_T = 800;
  int K_B = 80;
  int N_Tr = 20;
  int N_Ad = 20;
  int N_Te = 20;
  int U = 25;
  int G_Tr = 3;
  int G_Ad = 1000;
  int support_size = 10;  // of N_Tr; the rest is the query set
  int max_steps = 20000;
  int meta_max_steps = 20000;
  int conv_window = 200;
  double conv_tol = 0.005;
  bool early_stop = true;
  MetaMode meta_mode = MetaMode::Exact;
  AdaptRule direct_rule = AdaptRule::Adam;
  AdaptRule meta_rule = AdaptRule::Gd;
  bool regenerate_tasks = false;
  bool track_similarity = true;
  std::vector<int> hidden = {128, 128};
  InitFan init_fan = InitFan::FanIn;
  int threads = 1;
  std::uint64_t seed = 1;

  void validate() const;
};

struct TrainedModel {
  LayerSpec spec;
  NetParams params;
  Provenance provenance = Provenance::Init;
  TrainConfig config;
  std::vector<double> loss_history;
  /// Batch-mean cosine between support and query gradients at Omega, per meta step.
  std::vector<double> similarity_history;
  int steps = 0;
  bool converged = false;
  /// Highest derivative order the producing stage requires.
  int derivative_order = 0;
};

/// Window-averaged stopping rule: stop when the mean of the latest window
/// improves on the previous window's mean by less than `tol` (relative).
class ConvergenceMonitor {
 public:
  ConvergenceMonitor(int window, double tol) : window_(window), tol_(tol) {}
  /// Record one loss; returns true when training should stop.
  bool push(double loss);

 private:
  int window_;
  double tol_;
  std::vector<double> losses_;
};

Batch make_batch(const TaskDataset& ds);
Batch make_batch(const std::vector<const SamplePair*>& pairs);

LayerSpec network_spec(int M, const TrainConfig& cfg);

// ---- no-transfer ------------------------------------------------------------

TrainedModel train_no_transfer(const std::vector<TaskDataset>& sources, int M, const TrainConfig& cfg);

// ---- adaption ---------------------------------------------------------------

/// Called after step g (g = 0 before any update) with the current parameters.
using AdaptObserver = std::function<void(int step, const NetParams& params)>;

/// Fine-tune `base` on `d_ad` for cfg.G_Ad full-batch steps with `rule`
/// (ADAM or plain gradient descent, both at rate cfg.beta). Always starts
/// from base.params.
TrainedModel adapt(const TrainedModel& base, const TaskDataset& d_ad, const TrainConfig& cfg, AdaptRule rule,
                   const AdaptObserver& observe = {});

TrainedModel direct_adapt(const TrainedModel& base, const TaskDataset& d_ad, const TrainConfig& cfg,
                          const AdaptObserver& observe = {});
TrainedModel meta_adapt(const TrainedModel& base, const TaskDataset& d_ad, const TrainConfig& cfg,
                        const AdaptObserver& observe = {});

// ---- meta-learning ----------------------------------------------------------

struct InnerUnroll {
  NetParams adapted;               // Omega_S after G_Tr steps
  std::vector<NetParams> iterates; // Omega_S before each step (G_Tr entries)
  std::vector<NetParams> grads;    // support gradient at each iterate
  std::vector<double> losses;      // support loss at each iterate
};

InnerUnroll inner_adapt(const Network& net, const NetParams& omega, const Batch& support, int G_Tr, double beta);

struct MetaTask {
  Batch support;
  Batch query;
};

struct MetaGradient {
  NetParams grad;          // gradient of sum_k Loss_que(Omega_S,k) w.r.t. Omega
  double meta_loss = 0.0;  // sum_k Loss_que(Omega_S,k)
  double mean_cosine = 0.0;
};

MetaGradient meta_gradient(const Network& net, const NetParams& omega, const std::vector<MetaTask>& tasks, int G_Tr,
                           double beta, MetaMode mode, int threads = 1, bool track_similarity = false);

/// Meta-loss sum_k Loss_que(inner_adapt(omega, sup_k)) without derivatives.
double meta_loss(const Network& net, const NetParams& omega, const std::vector<MetaTask>& tasks, int G_Tr,
                 double beta);

/// Produces the (support, query) split of source task `task` for one visit.
/// Implementations must return key-disjoint sets.
using TaskDrawer = std::function<std::pair<TaskDataset, TaskDataset>(std::size_t task, std::uint64_t visit_seed)>;

/// Random support/query re-split of fixed per-task training sets.
TaskDrawer fixed_split_drawer(const std::vector<TaskDataset>& sources, int support_size);

/// Fresh support/query sets drawn from the task's environment on every visit.
TaskDrawer regenerating_drawer(const std::vector<Environment>& envs, const ArrayConfig& array,
                               const DatasetSpec& spec, int support_size, int query_size);

/// Throws std::logic_error if support and query share a (user, f_up) key.
void require_disjoint(const TaskDataset& support, const TaskDataset& query);

TrainedModel meta_train(std::size_t task_count, const TaskDrawer& draw, int M, const TrainConfig& cfg);

// ---- diagnostics ------------------------------------------------------------

struct TaylorResidual {
  double exact = 0.0;
  double approx = 0.0;
  double residual = 0.0;
};

/// One-step meta-loss versus its first-order Taylor expansion in beta.
TaylorResidual taylor_residual(const Network& net, const NetParams& omega, const Batch& support, const Batch& query,
                               double beta);

}  // namespace fddcsi
