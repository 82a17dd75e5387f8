#include "fddcsi/channel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fddcsi {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kHalfPi = std::numbers::pi / 2.0;
constexpr int kMaxKeyAttempts = 1000;

}  // namespace

void ArrayConfig::validate() const {
  if (M < 1) throw std::invalid_argument("ArrayConfig: M must be >= 1, got " + std::to_string(M));
  if (!(d > 0.0) || !std::isfinite(d)) throw std::invalid_argument("ArrayConfig: antenna spacing must be > 0");
  if (!(c > 0.0)) throw std::invalid_argument("ArrayConfig: speed of light must be > 0");
}

void GeneratorConfig::validate() const {
  if (!(width_min > 0.0) || width_max < width_min)
    throw std::invalid_argument("GeneratorConfig: empty or invalid AS width range");
  if (width_max > kPi) throw std::invalid_argument("GeneratorConfig: AS width exceeds pi");
  if (ray_count < 1) throw std::invalid_argument("GeneratorConfig: ray_count must be >= 1");
  if (amplitude_scale < 0.0) throw std::invalid_argument("GeneratorConfig: amplitude_scale must be >= 0");
  if (delay_max < 0.0) throw std::invalid_argument("GeneratorConfig: delay_max must be >= 0");
}

std::string to_string(NoiseMode mode) {
  switch (mode) {
    case NoiseMode::Clean: return "clean";
    case NoiseMode::Awgn: return "awgn";
    case NoiseMode::Lmmse: return "lmmse";
  }
  return "?";
}

NoiseMode noise_mode_from_string(const std::string& name) {
  if (name == "clean") return NoiseMode::Clean;
  if (name == "awgn") return NoiseMode::Awgn;
  if (name == "lmmse") return NoiseMode::Lmmse;
  throw std::invalid_argument("unknown noise mode '" + name + "'");
}

std::string to_string(Role role) {
  switch (role) {
    case Role::TrainSupport: return "train-support";
    case Role::TrainQuery: return "train-query";
    case Role::Adaption: return "adaption";
    case Role::Test: return "test";
    case Role::Train: return "train";
  }
  return "?";
}

Role role_from_string(const std::string& name) {
  if (name == "train-support") return Role::TrainSupport;
  if (name == "train-query") return Role::TrainQuery;
  if (name == "adaption") return Role::Adaption;
  if (name == "test") return Role::Test;
  if (name == "train") return Role::Train;
  throw std::invalid_argument("unknown dataset role '" + name + "'");
}

ComplexChannel array_manifold(double theta, double f, const ArrayConfig& cfg) {
  cfg.validate();
  if (!std::isfinite(theta)) throw std::invalid_argument("array_manifold: non-finite theta");
  if (!(f > 0.0) || !std::isfinite(f)) throw std::invalid_argument("array_manifold: frequency must be > 0");
  if (std::abs(theta) > kHalfPi + 1e-12) throw std::invalid_argument("array_manifold: |theta| > pi/2");

  const double spatial = 2.0 * kPi * cfg.d * f / cfg.c * std::sin(theta);
  ComplexChannel a(cfg.M);
  for (int m = 0; m < cfg.M; ++m) a[m] = std::polar(1.0, -spatial * m);
  return a;
}

Environment sample_environment(std::int64_t id, const GeneratorConfig& gcfg, std::uint64_t master_seed) {
  gcfg.validate();
  Rng rng = make_rng(master_seed, Stream::Environment, {static_cast<std::uint64_t>(id)});
  Environment env;
  env.id = id;
  const double width = uniform(rng, gcfg.width_min, gcfg.width_max);
  const double center = uniform(rng, -kHalfPi + width / 2.0, kHalfPi - width / 2.0);
  env.as_lower = std::max(-kHalfPi, center - width / 2.0);
  env.as_upper = std::min(kHalfPi, center + width / 2.0);
  env.ray_count = gcfg.ray_count;
  env.amplitude_scale = gcfg.amplitude_scale;
  env.delay_max = gcfg.delay_max;
  env.seed = derive_seed(master_seed, Stream::Environment, {static_cast<std::uint64_t>(id), 1});
  return env;
}

UserRays sample_user(const Environment& env, Rng& rng) {
  if (env.ray_count < 1) throw std::invalid_argument("sample_user: ray_count must be >= 1");
  if (!(env.as_lower <= env.as_upper)) throw std::invalid_argument("sample_user: invalid angle spread");

  UserRays user;
  user.env_id = env.id;
  const auto P = static_cast<std::size_t>(env.ray_count);
  user.doas.resize(P);
  user.amplitudes.resize(P);
  user.phases.resize(P);
  user.delays.resize(P);
  for (std::size_t p = 0; p < P; ++p) {
    user.doas[p] = uniform(rng, env.as_lower, env.as_upper);
    // Rayleigh with E|a|^2 = amplitude_scale^2.
    const double u = uniform(rng, 0.0, 1.0);
    user.amplitudes[p] = env.amplitude_scale * std::sqrt(-std::log1p(-u));
    user.phases[p] = uniform(rng, 0.0, 2.0 * kPi);
    user.delays[p] = uniform(rng, 0.0, env.delay_max);
  }
  return user;
}

ComplexChannel channel_response(const UserRays& user, double f, const ArrayConfig& cfg) {
  cfg.validate();
  if (!(f > 0.0) || !std::isfinite(f)) throw std::invalid_argument("channel_response: frequency must be > 0");
  const std::size_t P = user.size();
  if (user.amplitudes.size() != P || user.phases.size() != P || user.delays.size() != P)
    throw std::invalid_argument("channel_response: ray arrays of unequal length");

  const double k = 2.0 * kPi * cfg.d * f / cfg.c;
  ComplexChannel h = ComplexChannel::Zero(cfg.M);
  for (std::size_t p = 0; p < P; ++p) {
    const std::complex<double> gain =
        std::polar(user.amplitudes[p], -2.0 * kPi * f * user.delays[p] + user.phases[p]);
    const double spatial = k * std::sin(user.doas[p]);
    for (int m = 0; m < cfg.M; ++m) h[m] += gain * std::polar(1.0, -spatial * m);
  }
  return h;
}

RealVector complex_to_real(const ComplexChannel& z) {
  const auto n = z.size();
  RealVector v(2 * n);
  v.head(n) = z.real();
  v.tail(n) = z.imag();
  return v;
}

ComplexChannel real_to_complex(const RealVector& v) {
  if (v.size() % 2 != 0)
    throw std::invalid_argument("real_to_complex: odd input length " + std::to_string(v.size()));
  const auto n = v.size() / 2;
  ComplexChannel z(n);
  for (Eigen::Index i = 0; i < n; ++i) z[i] = {v[i], v[n + i]};
  return z;
}

double awgn_variance(const ComplexChannel& h, double snr_db, int pilot_len) {
  if (pilot_len < 1) throw std::invalid_argument("awgn: pilot_len must be >= 1");
  if (h.size() == 0) return 0.0;
  const double snr = std::pow(10.0, snr_db / 10.0);
  return h.squaredNorm() / (static_cast<double>(h.size()) * snr * pilot_len);
}

ComplexChannel add_awgn(const ComplexChannel& h, double snr_db, int pilot_len, Rng& rng) {
  const double sigma = std::sqrt(awgn_variance(h, snr_db, pilot_len) / 2.0);
  ComplexChannel out = h;
  for (Eigen::Index m = 0; m < out.size(); ++m) {
    const double re = standard_normal(rng);
    const double im = standard_normal(rng);
    out[m] += std::complex<double>(sigma * re, sigma * im);
  }
  return out;
}

ComplexChannel lmmse_estimate(const ComplexChannel& y, const ComplexMatrix& R, double sigma2) {
  const auto M = y.size();
  if (R.rows() != M || R.cols() != M)
    throw std::invalid_argument("lmmse_estimate: covariance is " + std::to_string(R.rows()) + "x" +
                                std::to_string(R.cols()) + ", channel length " + std::to_string(M));
  if (sigma2 < 0.0 || !std::isfinite(sigma2)) throw std::invalid_argument("lmmse_estimate: sigma2 must be >= 0");
  const double scale = std::max(1.0, R.cwiseAbs().maxCoeff());
  if ((R - R.adjoint()).cwiseAbs().maxCoeff() > 1e-9 * scale)
    throw std::invalid_argument("lmmse_estimate: covariance is not Hermitian");
  if (sigma2 == 0.0) return y;

  ComplexMatrix A = R;
  A.diagonal().array() += sigma2;
  Eigen::LDLT<ComplexMatrix> solver(A);
  const ComplexChannel z = solver.solve(y);
  return R * z;
}

ComplexMatrix sample_covariance(const std::vector<ComplexChannel>& channels) {
  if (channels.empty()) throw std::invalid_argument("sample_covariance: no channels");
  const auto M = channels.front().size();
  ComplexMatrix S = ComplexMatrix::Zero(M, M);
  for (const auto& h : channels) {
    if (h.size() != M) throw std::invalid_argument("sample_covariance: channel length mismatch");
    S.noalias() += h * h.adjoint();
  }
  S /= static_cast<double>(channels.size());
  S = 0.5 * (S + S.adjoint()).eval();
  const double ridge = 1e-6 * S.trace().real() / static_cast<double>(M);
  S.diagonal().array() += ridge;
  return S;
}

LinkCovariance estimate_link_covariance(const std::vector<UserRays>& users, double f_min, double f_max,
                                        double delta_f, const ArrayConfig& cfg, int draws, Rng& rng) {
  if (users.empty()) throw std::invalid_argument("estimate_link_covariance: no users");
  if (draws < 1) throw std::invalid_argument("estimate_link_covariance: draws must be >= 1");
  std::vector<ComplexChannel> up, down;
  up.reserve(static_cast<std::size_t>(draws));
  down.reserve(static_cast<std::size_t>(draws));
  std::uniform_int_distribution<std::size_t> pick(0, users.size() - 1);
  for (int i = 0; i < draws; ++i) {
    const auto& user = users[pick(rng)];
    const double f = uniform(rng, f_min, f_max);
    up.push_back(channel_response(user, f, cfg));
    down.push_back(channel_response(user, f + delta_f, cfg));
  }
  return {sample_covariance(up), sample_covariance(down)};
}

namespace {

ComplexChannel estimate(const ComplexChannel& h, const NoiseSpec& noise, const ComplexMatrix* R, Rng& rng) {
  switch (noise.mode) {
    case NoiseMode::Clean: return h;
    case NoiseMode::Awgn: return add_awgn(h, noise.snr_db, noise.pilot_len, rng);
    case NoiseMode::Lmmse: {
      if (R == nullptr) throw std::invalid_argument("lmmse noise mode requires a channel covariance");
      const double sigma2 = awgn_variance(h, noise.snr_db, noise.pilot_len);
      return lmmse_estimate(add_awgn(h, noise.snr_db, noise.pilot_len, rng), *R, sigma2);
    }
  }
  return h;
}

}  // namespace

SamplePair make_sample_pair(const UserRays& user, double f_up, double delta_f, const ArrayConfig& cfg,
                            const NoiseSpec& noise, Rng& rng, const LinkCovariance* cov) {
  if (!(f_up > 0.0)) throw std::invalid_argument("make_sample_pair: f_up must be > 0");
  if (!(f_up + delta_f > 0.0)) throw std::invalid_argument("make_sample_pair: f_up + delta_f must be > 0");
  if (noise.pilot_len < 1) throw std::invalid_argument("make_sample_pair: pilot_len must be >= 1");

  const ComplexChannel h_up = channel_response(user, f_up, cfg);
  const ComplexChannel h_down = channel_response(user, f_up + delta_f, cfg);

  SamplePair pair;
  pair.f_up = f_up;
  pair.f_down = f_up + delta_f;
  pair.x = complex_to_real(estimate(h_up, noise, cov ? &cov->up : nullptr, rng));
  pair.y = complex_to_real(estimate(h_down, noise, cov ? &cov->down : nullptr, rng));
  pair.y_clean = complex_to_real(h_down);
  return pair;
}

EnvironmentSampler::EnvironmentSampler(Environment env, const ArrayConfig& array, const DatasetSpec& spec,
                                       std::uint64_t stream_tag)
    : env_(std::move(env)),
      array_(array),
      spec_(spec),
      pair_rng_(derive_seed(env_.seed, Stream::Pairs, {stream_tag})),
      noise_rng_(derive_seed(env_.seed, Stream::Noise, {stream_tag})),
      cov_rng_(derive_seed(env_.seed, Stream::Covariance)) {
  array_.validate();
  if (spec_.users < 1) throw std::invalid_argument("dataset: users (U) must be >= 1");
  if (!(spec_.f_min > 0.0) || spec_.f_max < spec_.f_min) throw std::invalid_argument("dataset: invalid frequency range");
  Rng user_rng(derive_seed(env_.seed, Stream::Users));
  users_.reserve(static_cast<std::size_t>(spec_.users));
  for (int u = 0; u < spec_.users; ++u) users_.push_back(sample_user(env_, user_rng));
}

const LinkCovariance& EnvironmentSampler::covariance() {
  if (!cov_) {
    cov_ = estimate_link_covariance(users_, spec_.f_min, spec_.f_max, spec_.delta_f, array_,
                                    spec_.covariance_draws, cov_rng_);
  }
  return *cov_;
}

TaskDataset EnvironmentSampler::draw(Role role, int n_pairs) { return draw(role, n_pairs, spec_.noise); }

TaskDataset EnvironmentSampler::draw(Role role, int n_pairs, const NoiseSpec& noise) {
  if (n_pairs < 1) throw std::invalid_argument("dataset: n_pairs must be >= 1");
  const LinkCovariance* cov = noise.mode == NoiseMode::Lmmse ? &covariance() : nullptr;

  TaskDataset ds;
  ds.env_id = env_.id;
  ds.role = role;
  ds.pairs.reserve(static_cast<std::size_t>(n_pairs));
  std::uniform_int_distribution<std::int64_t> pick(0, static_cast<std::int64_t>(users_.size()) - 1);
  for (int i = 0; i < n_pairs; ++i) {
    std::int64_t user = 0;
    double f_up = 0.0;
    int attempt = 0;
    for (;; ++attempt) {
      if (attempt == kMaxKeyAttempts)
        throw std::invalid_argument("dataset: cannot draw " + std::to_string(n_pairs) + " " + to_string(role) +
                                    " pairs disjoint from other roles of environment " + std::to_string(env_.id));
      user = pick(pair_rng_);
      f_up = uniform(pair_rng_, spec_.f_min, spec_.f_max);
      auto [it, inserted] = used_.try_emplace({user, f_up}, role);
      if (inserted || it->second == role) break;
    }
    SamplePair pair = make_sample_pair(users_[static_cast<std::size_t>(user)], f_up, spec_.delta_f, array_, noise,
                                       noise_rng_, cov);
    pair.user = user;
    ds.pairs.push_back(std::move(pair));
  }
  return ds;
}

TaskDataset generate_task_dataset(const Environment& env, Role role, int n_pairs, const ArrayConfig& array,
                                  const DatasetSpec& spec) {
  EnvironmentSampler sampler(env, array, spec);
  return sampler.draw(role, n_pairs);
}

}  // namespace fddcsi
