#include "fddcsi/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

#include "fddcsi/config_io.hpp"
#include "fddcsi/parallel.hpp"

namespace fddcsi {

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

double nmse(const ComplexChannel& h_true, const ComplexChannel& h_hat) {
  if (h_true.size() != h_hat.size())
    throw std::invalid_argument("nmse: length mismatch " + std::to_string(h_true.size()) + " vs " +
                                std::to_string(h_hat.size()));
  const double denom = h_true.squaredNorm();
  if (!(denom > 0.0)) throw std::invalid_argument("nmse: true channel is zero");
  return (h_true - h_hat).squaredNorm() / denom;
}

double test_model(const Network& net, const NetParams& params, const TaskDataset& d_te) {
  std::vector<ComplexChannel> clean;
  clean.reserve(d_te.size());
  for (const auto& p : d_te.pairs) clean.push_back(real_to_complex(p.y_clean.size() ? p.y_clean : p.y));
  if (d_te.empty()) throw std::invalid_argument("test_model: empty test set");
  const Eigen::MatrixXd predictions = net.predict(params, make_batch(d_te).xs);
  double total = 0.0;
  for (std::size_t i = 0; i < d_te.size(); ++i)
    total += nmse(clean[i], real_to_complex(predictions.col(static_cast<Eigen::Index>(i))));
  return total / static_cast<double>(d_te.size());
}

double test_model(const TrainedModel& model, const TaskDataset& d_te) {
  return test_model(Network(model.spec), model.params, d_te);
}

double test_model(const TrainedModel& model, const TaskDataset& d_te, const std::vector<ComplexChannel>& clean_labels) {
  if (d_te.empty()) throw std::invalid_argument("test_model: empty test set");
  if (clean_labels.size() != d_te.size())
    throw std::invalid_argument("test_model: " + std::to_string(clean_labels.size()) + " labels for " +
                                std::to_string(d_te.size()) + " test pairs");
  const Network net(model.spec);
  const Eigen::MatrixXd predictions = net.predict(model.params, make_batch(d_te).xs);
  double total = 0.0;
  for (std::size_t i = 0; i < d_te.size(); ++i)
    total += nmse(clean_labels[i], real_to_complex(predictions.col(static_cast<Eigen::Index>(i))));
  return total / static_cast<double>(d_te.size());
}

NmseResult NmseResult::from_targets(std::string algorithm, std::vector<double> per_target) {
  NmseResult r;
  r.algorithm = std::move(algorithm);
  r.per_target = std::move(per_target);
  if (!r.per_target.empty()) {
    double sum = 0.0;
    for (double v : r.per_target) sum += v;
    r.mean_linear = sum / static_cast<double>(r.per_target.size());
  }
  r.mean_db = 10.0 * std::log10(r.mean_linear);
  return r;
}

ExperimentConfig ExperimentConfig::paper_defaults() {
  ExperimentConfig cfg;
  cfg.array.M = 64;
  cfg.data.users = 25;
  cfg.data.noise = {20.0, 64, NoiseMode::Lmmse};
  cfg.adaption_noise = cfg.data.noise;
  return cfg;
}

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig cfg;
  cfg.array.M = 16;
  cfg.data.users = 10;
  cfg.data.noise = {20.0, 64, NoiseMode::Clean};
  cfg.adaption_noise = cfg.data.noise;
  cfg.generator.ray_count = 25;
  cfg.train.K_S = 200;
  cfg.train.K_T = 50;
  cfg.train.U = 10;
  cfg.train.K_B = 16;
  cfg.train.max_steps = 20000;
  cfg.train.meta_max_steps = 5000;
  return cfg;
}

ExperimentConfig ExperimentConfig::smoke() {
  ExperimentConfig cfg = desk();
  cfg.array.M = 4;
  cfg.train.hidden = {16, 16};
  cfg.train.K_S = 12;
  cfg.train.K_T = 4;
  cfg.train.K_B = 4;
  cfg.train.U = 5;
  cfg.data.users = 5;
  cfg.train.V = 32;
  cfg.train.max_steps = 200;
  cfg.train.meta_max_steps = 50;
  cfg.train.G_Ad = 20;
  return cfg;
}

void ExperimentConfig::validate() const {
  array.validate();
  generator.validate();
  train.validate();
  if (data.users != train.U)
    throw std::invalid_argument("ExperimentConfig: data.users (" + std::to_string(data.users) + ") != U (" +
                                std::to_string(train.U) + ")");
  if (!(data.f_min > 0.0) || data.f_max < data.f_min) throw std::invalid_argument("ExperimentConfig: invalid band");
  if (data.noise.pilot_len < 1 || adaption_noise.pilot_len < 1)
    throw std::invalid_argument("ExperimentConfig: pilot length must be >= 1");
}

std::vector<Environment> source_environments(const ExperimentConfig& cfg) {
  std::vector<Environment> envs;
  envs.reserve(static_cast<std::size_t>(cfg.train.K_S));
  for (int k = 0; k < cfg.train.K_S; ++k) envs.push_back(sample_environment(k, cfg.generator, cfg.train.seed));
  return envs;
}

std::vector<Environment> target_environments(const ExperimentConfig& cfg) {
  std::vector<Environment> envs;
  envs.reserve(static_cast<std::size_t>(cfg.train.K_T));
  for (int k = 0; k < cfg.train.K_T; ++k)
    envs.push_back(sample_environment(cfg.target_id_offset + k, cfg.generator, cfg.train.seed));
  return envs;
}

std::vector<TaskDataset> source_datasets(const ExperimentConfig& cfg, const std::vector<Environment>& envs) {
  std::vector<TaskDataset> out(envs.size());
  parallel_for(envs.size(), cfg.train.threads, [&](std::size_t k) {
    EnvironmentSampler sampler(envs[k], cfg.array, cfg.data);
    out[k] = sampler.draw(Role::Train, cfg.train.N_Tr);
  });
  return out;
}

TrainedPair train_models(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto envs = source_environments(cfg);
  const auto sources = source_datasets(cfg, envs);
  TrainedPair out;
  auto start = std::chrono::steady_clock::now();
  out.no_transfer = train_no_transfer(sources, cfg.array.M, cfg.train);
  out.no_transfer_seconds = seconds_since(start);

  start = std::chrono::steady_clock::now();
  const TaskDrawer drawer =
      cfg.train.regenerate_tasks
          ? regenerating_drawer(envs, cfg.array, cfg.data, cfg.train.support_size, cfg.train.N_Tr - cfg.train.support_size)
          : fixed_split_drawer(sources, cfg.train.support_size);
  out.meta = meta_train(envs.size(), drawer, cfg.array.M, cfg.train);
  out.meta_seconds = seconds_since(start);
  return out;
}

std::string to_string(SweepVariable v) {
  switch (v) {
    case SweepVariable::None: return "none";
    case SweepVariable::G_Ad: return "G_Ad";
    case SweepVariable::N_Ad: return "N_Ad";
    case SweepVariable::DeltaF: return "delta_f";
    case SweepVariable::M: return "M";
    case SweepVariable::SnrDb: return "snr_db";
  }
  return "?";
}

SweepVariable sweep_variable_from_string(const std::string& s) {
  for (auto v : {SweepVariable::None, SweepVariable::G_Ad, SweepVariable::N_Ad, SweepVariable::DeltaF, SweepVariable::M,
                 SweepVariable::SnrDb})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown sweep variable '" + s + "' (expected none, G_Ad, N_Ad, delta_f, M or snr_db)");
}

namespace {

bool is_integer_variable(SweepVariable v) {
  return v == SweepVariable::G_Ad || v == SweepVariable::N_Ad || v == SweepVariable::M;
}

void validate_sweep(const Sweep& sweep) {
  if (sweep.variable == SweepVariable::None) return;
  if (sweep.grid.empty()) throw std::invalid_argument("sweep over " + to_string(sweep.variable) + " has an empty grid");
  for (double v : sweep.grid) {
    if (!std::isfinite(v)) throw std::invalid_argument("sweep grid contains a non-finite value");
    if (is_integer_variable(sweep.variable) && (v != std::floor(v) || v < 0))
      throw std::invalid_argument("sweep over " + to_string(sweep.variable) + " needs non-negative integers");
  }
  if ((sweep.variable == SweepVariable::N_Ad || sweep.variable == SweepVariable::M) &&
      *std::min_element(sweep.grid.begin(), sweep.grid.end()) < 1)
    throw std::invalid_argument("sweep over " + to_string(sweep.variable) + " needs values >= 1");
}

ExperimentConfig apply_training_point(ExperimentConfig cfg, SweepVariable v, double value) {
  if (v == SweepVariable::DeltaF) cfg.data.delta_f = value;
  if (v == SweepVariable::M) cfg.array.M = static_cast<int>(value);
  return cfg;
}

}  // namespace

std::vector<SweepPoint> evaluate_targets(const ExperimentConfig& cfg, const TrainedPair& models, const Sweep& sweep) {
  validate_sweep(sweep);
  const auto targets = target_environments(cfg);
  const std::size_t K = targets.size();
  std::vector<double> grid = sweep.grid;
  if (sweep.variable == SweepVariable::None || sweep.variable == SweepVariable::DeltaF ||
      sweep.variable == SweepVariable::M)
    grid = {0.0};
  const std::size_t P = grid.size();

  std::vector<double> nt(K);
  std::vector<std::vector<double>> dt(P, std::vector<double>(K)), mt(P, std::vector<double>(K));
  const Network nt_net(models.no_transfer.spec);
  const Network mt_net(models.meta.spec);
  const auto start = std::chrono::steady_clock::now();

  parallel_for(K, cfg.train.threads, [&](std::size_t k) {
    EnvironmentSampler sampler(targets[k], cfg.array, cfg.data);
    // Test set first so that it does not depend on adaption-side settings.
    const TaskDataset test = sampler.draw(Role::Test, cfg.train.N_Te);
    nt[k] = test_model(nt_net, models.no_transfer.params, test);

    auto adapt_point = [&](const TaskDataset& ad, TrainConfig tc, std::size_t slot) {
      dt[slot][k] = test_model(direct_adapt(models.no_transfer, ad, tc), test);
      mt[slot][k] = test_model(meta_adapt(models.meta, ad, tc), test);
    };

    switch (sweep.variable) {
      case SweepVariable::G_Ad: {
        const TaskDataset ad = sampler.draw(Role::Adaption, cfg.train.N_Ad, cfg.adaption_noise);
        TrainConfig tc = cfg.train;
        tc.G_Ad = static_cast<int>(*std::max_element(grid.begin(), grid.end()));
        std::map<int, std::vector<std::size_t>> slots;
        for (std::size_t i = 0; i < P; ++i) slots[static_cast<int>(grid[i])].push_back(i);
        auto record = [&](std::vector<std::vector<double>>& out, const Network& net) -> AdaptObserver {
          return [&slots, &test, &out, &net, k](int step, const NetParams& params) {
            auto it = slots.find(step);
            if (it == slots.end()) return;
            const double v = test_model(net, params, test);
            for (auto slot : it->second) out[slot][k] = v;
          };
        };
        direct_adapt(models.no_transfer, ad, tc, record(dt, nt_net));
        meta_adapt(models.meta, ad, tc, record(mt, mt_net));
        break;
      }
      case SweepVariable::N_Ad: {
        // Nested adaption sets: each larger set extends the smaller ones.
        const int n_max = static_cast<int>(*std::max_element(grid.begin(), grid.end()));
        const TaskDataset full = sampler.draw(Role::Adaption, n_max, cfg.adaption_noise);
        for (std::size_t i = 0; i < P; ++i) {
          TaskDataset ad = full;
          ad.pairs.resize(static_cast<std::size_t>(grid[i]));
          TrainConfig tc = cfg.train;
          tc.N_Ad = static_cast<int>(grid[i]);
          adapt_point(ad, tc, i);
        }
        break;
      }
      case SweepVariable::SnrDb: {
        // One channel draw per target; only the estimation noise changes across the grid.
        for (std::size_t i = 0; i < P; ++i) {
          EnvironmentSampler noisy(targets[k], cfg.array, cfg.data);
          noisy.draw(Role::Test, cfg.train.N_Te);
          NoiseSpec noise = cfg.adaption_noise;
          noise.snr_db = grid[i];
          if (noise.mode == NoiseMode::Clean) noise.mode = NoiseMode::Lmmse;
          adapt_point(noisy.draw(Role::Adaption, cfg.train.N_Ad, noise), cfg.train, i);
        }
        break;
      }
      default: adapt_point(sampler.draw(Role::Adaption, cfg.train.N_Ad, cfg.adaption_noise), cfg.train, 0);
    }
  });

  const double adapt_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::vector<SweepPoint> points(P);
  for (std::size_t i = 0; i < P; ++i) {
    points[i].value = grid[i];
    points[i].no_transfer = NmseResult::from_targets(kNoTransfer, nt);
    points[i].direct = NmseResult::from_targets(kDirectTransfer, dt[i]);
    points[i].meta = NmseResult::from_targets(kMetaLearning, mt[i]);
    points[i].adapt_seconds = adapt_seconds;
  }
  return points;
}

SweepReport run_three_way(const ExperimentConfig& cfg, const Sweep& sweep, const TrainedPair* pretrained) {
  cfg.validate();
  validate_sweep(sweep);
  SweepReport report;
  report.variable = sweep.variable;
  report.grid = sweep.variable == SweepVariable::None ? std::vector<double>{0.0} : sweep.grid;
  report.seed = cfg.train.seed;
  report.config_json = to_json(cfg).dump();

  if (sweep.variable == SweepVariable::DeltaF || sweep.variable == SweepVariable::M) {
    for (double value : sweep.grid) {
      const ExperimentConfig point_cfg = apply_training_point(cfg, sweep.variable, value);
      point_cfg.validate();
      const TrainedPair models = train_models(point_cfg);
      auto pts = evaluate_targets(point_cfg, models, {});
      pts.front().value = value;
      pts.front().train_seconds = models.no_transfer_seconds + models.meta_seconds;
      report.points.push_back(std::move(pts.front()));
    }
    return report;
  }

  TrainedPair local;
  if (pretrained == nullptr) {
    local = train_models(cfg);
    pretrained = &local;
  }
  report.points = evaluate_targets(cfg, *pretrained, sweep);
  for (auto& p : report.points) p.train_seconds = pretrained->no_transfer_seconds + pretrained->meta_seconds;
  return report;
}

std::string SweepReport::to_csv() const {
  std::ostringstream os;
  os << "sweep_value,algorithm,nmse_linear,nmse_db,k_targets,seed\n";
  os << std::setprecision(17);
  for (const auto& p : points) {
    for (const NmseResult* r : {&p.no_transfer, &p.direct, &p.meta}) {
      os << p.value << ',' << r->algorithm << ',' << r->mean_linear << ',' << r->mean_db << ','
         << r->per_target.size() << ',' << seed << '\n';
    }
  }
  return os.str();
}

std::vector<ProbeRow> proposition1_probe(const std::vector<int>& widths, const ProbeConfig& cfg) {
  if (widths.empty()) throw std::invalid_argument("proposition1_probe: no widths");
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] < 1) throw std::invalid_argument("proposition1_probe: widths must be positive");
    if (i > 0 && widths[i] <= widths[i - 1])
      throw std::invalid_argument("proposition1_probe: widths must be strictly increasing");
  }
  ArrayConfig array;
  array.M = cfg.M;
  DatasetSpec spec;
  spec.users = cfg.users;
  spec.noise.mode = NoiseMode::Clean;
  const Environment env = sample_environment(0, cfg.generator, cfg.seed);
  const TaskDataset data = generate_task_dataset(env, Role::Train, cfg.samples, array, spec);
  const Batch batch = make_batch(data);

  std::vector<ProbeRow> rows;
  for (int width : widths) {
    const LayerSpec layer_spec = LayerSpec::mlp(2 * cfg.M, {width});
    const Network net(layer_spec);
    Rng rng = make_rng(cfg.seed, Stream::NetInit, {static_cast<std::uint64_t>(width)});
    NetParams params = init_params(layer_spec, rng);
    AdamState adam = AdamState::for_params(params);
    int steps = 0;
    for (; steps < cfg.max_steps; ++steps) {
      const auto g = net.backward(params, batch);
      adam_step(adam, params, g.grad, cfg.gamma);
    }
    rows.push_back({width, net.mse_loss(params, batch), steps});
  }
  return rows;
}

}  // namespace fddcsi
