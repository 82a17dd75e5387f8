#pragma once

// Synthetic multipath ULA channels and per-environment task datasets.
//
// A user is a finite set of propagation rays (DOA, amplitude, phase, delay).
// Its channel at carrier f is
//
//   h(f) = sum_p |a_p| exp(-j 2 pi f tau_p + j phi_p) a(theta_p, f),
//   a(theta, f)_m = exp(-j (2 pi d f / c) m sin theta),   m = 0..M-1.
//
// Uplink and downlink samples of one user are the same rays evaluated at
// f_up and f_up + delta_f.

#include <complex>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fddcsi/rng.hpp"

namespace fddcsi {

using ComplexChannel = Eigen::VectorXcd;
using RealVector = Eigen::VectorXd;
using ComplexMatrix = Eigen::MatrixXcd;

inline constexpr double kSpeedOfLight = 299792458.0;

struct ArrayConfig {
  int M = 16;
  double d = kSpeedOfLight / (2.0 * 2.0e9);  // half wavelength at 2 GHz
  double c = kSpeedOfLight;

  void validate() const;
};

/// Ray statistics for environments and their users.
struct GeneratorConfig {
  double width_min = 0.05;  // AS width range, radians
  double width_max = 0.2;
  int ray_count = 25;
  double amplitude_scale = 10.0;  // RMS ray amplitude
  double delay_max = 1.0e-9;     // seconds

  void validate() const;
};

struct Environment {
  std::int64_t id = 0;
  double as_lower = 0.0;
  double as_upper = 0.0;
  int ray_count = 1;
  double amplitude_scale = 1.0;
  double delay_max = 1.0e-9;
  std::uint64_t seed = 0;

  bool operator==(const Environment&) const = default;
};

struct UserRays {
  std::int64_t env_id = 0;
  std::vector<double> doas;
  std::vector<double> amplitudes;
  std::vector<double> phases;
  std::vector<double> delays;

  std::size_t size() const { return doas.size(); }
};

enum class NoiseMode { Clean, Awgn, Lmmse };

struct NoiseSpec {
  double snr_db = 20.0;
  int pilot_len = 64;
  NoiseMode mode = NoiseMode::Clean;
};

std::string to_string(NoiseMode mode);
NoiseMode noise_mode_from_string(const std::string& name);

struct SamplePair {
  RealVector x;  // stacked uplink channel (possibly estimated)
  RealVector y;  // stacked downlink channel (possibly estimated)
  RealVector y_clean;  // stacked true downlink channel
  double f_up = 0.0;
  double f_down = 0.0;
  std::int64_t user = 0;
};

enum class Role : std::uint8_t { TrainSupport = 0, TrainQuery = 1, Adaption = 2, Test = 3, Train = 4 };

std::string to_string(Role role);
Role role_from_string(const std::string& name);

struct TaskDataset {
  std::int64_t env_id = 0;
  Role role = Role::Train;
  std::vector<SamplePair> pairs;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

// ---- array and channel ------------------------------------------------------

ComplexChannel array_manifold(double theta, double f, const ArrayConfig& cfg);

Environment sample_environment(std::int64_t id, const GeneratorConfig& gcfg, std::uint64_t master_seed);

UserRays sample_user(const Environment& env, Rng& rng);

ComplexChannel channel_response(const UserRays& user, double f, const ArrayConfig& cfg);

/// xi: [Re(z); Im(z)].
RealVector complex_to_real(const ComplexChannel& z);
/// xi^{-1}; throws std::invalid_argument on odd length.
ComplexChannel real_to_complex(const RealVector& v);

// ---- noisy estimation -------------------------------------------------------

/// Per-entry noise variance for a channel observed through pilot_len pilots.
double awgn_variance(const ComplexChannel& h, double snr_db, int pilot_len);

ComplexChannel add_awgn(const ComplexChannel& h, double snr_db, int pilot_len, Rng& rng);

/// R (R + sigma2 I)^{-1} y. R must be Hermitian PSD.
ComplexChannel lmmse_estimate(const ComplexChannel& y, const ComplexMatrix& R, double sigma2);

/// Regularized sample covariance: S + 1e-6 * trace(S)/M * I.
ComplexMatrix sample_covariance(const std::vector<ComplexChannel>& channels);

// ---- datasets ---------------------------------------------------------------

struct LinkCovariance {
  ComplexMatrix up;
  ComplexMatrix down;
};

/// Covariances of clean uplink/downlink channels for one environment, from
/// `draws` random (user, f_up) combinations of that environment.
LinkCovariance estimate_link_covariance(const std::vector<UserRays>& users, double f_min, double f_max,
                                        double delta_f, const ArrayConfig& cfg, int draws, Rng& rng);

SamplePair make_sample_pair(const UserRays& user, double f_up, double delta_f, const ArrayConfig& cfg,
                            const NoiseSpec& noise, Rng& rng, const LinkCovariance* cov = nullptr);

struct DatasetSpec {
  int users = 25;                // U
  double f_min = 1.0e9;
  double f_max = 3.0e9;
  double delta_f = 120.0e6;
  NoiseSpec noise{};
  int covariance_draws = 200;
};

/// Data source for one environment. Users are drawn once; every call to
/// `draw` produces pairs whose (user, f_up) keys are disjoint from those
/// handed out to any other role of this environment.
class EnvironmentSampler {
 public:
  /// `stream_tag` selects an independent pair/noise stream over the same users.
  EnvironmentSampler(Environment env, const ArrayConfig& array, const DatasetSpec& spec,
                     std::uint64_t stream_tag = 0);

  TaskDataset draw(Role role, int n_pairs);
  /// Same as draw but with a per-call noise override (e.g. adaption SNR sweeps).
  TaskDataset draw(Role role, int n_pairs, const NoiseSpec& noise);

  const Environment& environment() const { return env_; }
  const std::vector<UserRays>& users() const { return users_; }

 private:
  const LinkCovariance& covariance();

  Environment env_;
  ArrayConfig array_;
  DatasetSpec spec_;
  std::vector<UserRays> users_;
  Rng pair_rng_;
  Rng noise_rng_;
  Rng cov_rng_;
  std::optional<LinkCovariance> cov_;
  std::map<std::pair<std::int64_t, double>, Role> used_;
};

/// One-shot dataset for a single role of an environment.
TaskDataset generate_task_dataset(const Environment& env, Role role, int n_pairs, const ArrayConfig& array,
                                  const DatasetSpec& spec);

}  // namespace fddcsi
