#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fddcsi/channel.hpp"
#include "fddcsi/transfer.hpp"

namespace fddcsi {

/// ||h_true - h_hat||^2 / ||h_true||^2. Throws on a zero true channel.
double nmse(const ComplexChannel& h_true, const ComplexChannel& h_hat);

/// Mean per-sample NMSE of the model's predictions against the clean
/// downlink channels stored with `d_te`.
double test_model(const Network& net, const NetParams& params, const TaskDataset& d_te);
double test_model(const TrainedModel& model, const TaskDataset& d_te);
/// Same, against explicitly supplied true channels (one per test pair).
double test_model(const TrainedModel& model, const TaskDataset& d_te, const std::vector<ComplexChannel>& clean_labels);

struct NmseResult {
  std::string algorithm;
  std::vector<double> per_target;
  double mean_linear = 0.0;
  double mean_db = 0.0;

  static NmseResult from_targets(std::string algorithm, std::vector<double> per_target);
};

inline constexpr const char* kNoTransfer = "no-transfer";
inline constexpr const char* kDirectTransfer = "direct-transfer";
inline constexpr const char* kMetaLearning = "meta-learning";

/// Everything needed to reproduce one three-way comparison.
struct ExperimentConfig {
  ArrayConfig array;
  GeneratorConfig generator;
  DatasetSpec data;             // source and target collection (U, band, delta_f, noise)
  NoiseSpec adaption_noise;     // noise of target adaption sets
  TrainConfig train;
  std::int64_t target_id_offset = 1000000;

  /// Paper-scale defaults (M = 64, 1500 source and 800 target tasks).
  static ExperimentConfig paper_defaults();
  /// Desk-scale profile: runs the full comparison in minutes on one core.
  static ExperimentConfig desk();
  /// Tiny smoke profile for CLI and Python checks.
  static ExperimentConfig smoke();

  void validate() const;
};

std::vector<Environment> source_environments(const ExperimentConfig& cfg);
std::vector<Environment> target_environments(const ExperimentConfig& cfg);
std::vector<TaskDataset> source_datasets(const ExperimentConfig& cfg, const std::vector<Environment>& envs);

struct TrainedPair {
  TrainedModel no_transfer;
  TrainedModel meta;
  double no_transfer_seconds = 0.0;
  double meta_seconds = 0.0;
};

TrainedPair train_models(const ExperimentConfig& cfg);

enum class SweepVariable { None, G_Ad, N_Ad, DeltaF, M, SnrDb };

std::string to_string(SweepVariable v);
SweepVariable sweep_variable_from_string(const std::string& s);

struct SweepPoint {
  double value = 0.0;
  NmseResult no_transfer;
  NmseResult direct;
  NmseResult meta;
  double train_seconds = 0.0;
  double adapt_seconds = 0.0;
};

struct SweepReport {
  SweepVariable variable = SweepVariable::None;
  std::vector<double> grid;
  std::vector<SweepPoint> points;
  std::uint64_t seed = 0;
  std::string config_json;

  /// Header: sweep_value,algorithm,nmse_linear,nmse_db,k_targets,seed
  std::string to_csv() const;
};

struct Sweep {
  SweepVariable variable = SweepVariable::None;
  std::vector<double> grid;
};

/// Train (or reuse) models and evaluate all three algorithms over K_T targets
/// at each grid point. Variables that change the source data (delta_f, M)
/// retrain per point; adaption-side variables reuse one pair of models.
SweepReport run_three_way(const ExperimentConfig& cfg, const Sweep& sweep = {},
                          const TrainedPair* pretrained = nullptr);

/// Evaluate trained models on the targets of `cfg` at the given adaption-side
/// grid. Exposed for callers that hold checkpoints.
std::vector<SweepPoint> evaluate_targets(const ExperimentConfig& cfg, const TrainedPair& models, const Sweep& sweep);

struct ProbeRow {
  int width = 0;
  double final_loss = 0.0;
  int steps = 0;
};

struct ProbeConfig {
  int M = 4;
  int samples = 200;
  int users = 25;
  int max_steps = 6000;
  double gamma = 1e-3;
  GeneratorConfig generator;
  std::uint64_t seed = 7;
};

/// Train one-hidden-layer networks of each width to convergence on the
/// clean data of a single environment and report the final training loss.
std::vector<ProbeRow> proposition1_probe(const std::vector<int>& widths, const ProbeConfig& cfg);

}  // namespace fddcsi
