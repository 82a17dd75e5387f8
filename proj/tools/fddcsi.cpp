// fddcsi: generate data, train, adapt, evaluate and verify from the shell.
//
// Every flag can also be set through an environment variable named
// FDDCSI_<FLAG>, e.g. --g-ad -> FDDCSI_G_AD. Command-line values win.
// Exit codes: 0 success, 1 runtime or verification failure, 2 usage error.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fddcsi/config_io.hpp"
#include "fddcsi/eval.hpp"
#include "fddcsi/parallel.hpp"
#include "fddcsi/store.hpp"
#include "fddcsi/verify.hpp"

#ifndef FDDCSI_BUILD_ID
#define FDDCSI_BUILD_ID "unknown"
#endif

extern char** environ;

namespace fs = std::filesystem;
using namespace fddcsi;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string env_name(const std::string& flag) {
  std::string out = "FDDCSI_";
  for (char c : flag) out += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

std::map<std::string, std::string> fddcsi_environment() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv = *e;
    const auto eq = kv.find('=');
    if (eq != std::string::npos && kv.rfind("FDDCSI_", 0) == 0) out[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  return out;
}

// ---- run manifest -----------------------------------------------------------

struct Manifest {
  std::string subcommand;
  std::vector<std::string> argv;
  json config = json::object();
  std::uint64_t seed = 0;
  std::vector<std::string> outputs;
  std::string started;

  void write(const fs::path& path) const {
    json env = json::object();
    for (const auto& [k, v] : fddcsi_environment()) env[k] = v;
    json j = {{"subcommand", subcommand},
              {"argv", argv},
              {"env", env},
              {"config", config},
              {"seed", seed},
              {"build", FDDCSI_BUILD_ID},
              {"started_at", started},
              {"finished_at", utc_now()},
              {"outputs", outputs}};
    write_text_atomic(path, j.dump(2) + "\n");
  }
};

fs::path manifest_path(const std::string& flag, const fs::path& primary) {
  if (!flag.empty()) return flag;
  fs::path p = primary;
  p += ".manifest.json";
  return p;
}

// ---- shared experiment flags ------------------------------------------------

struct ConfigFlags {
  std::string profile;
  std::string config_path;
  std::optional<int> M, users, pilot_len, V, K_S, K_T, K_B, N_Tr, N_Ad, N_Te, G_Tr, G_Ad, support_size, max_steps,
      meta_max_steps, conv_window, threads, rays;
  std::optional<double> delta_f, f_min, f_max, snr_db, adaption_snr_db, amplitude_scale, delay_max, gamma, beta,
      conv_tol;
  std::optional<std::string> noise_mode, adaption_noise_mode, meta_mode, direct_rule, meta_rule;
  std::optional<std::uint64_t> seed;
  std::vector<int> hidden;
  bool no_early_stop = false;
  bool regenerate = false;

  explicit ConfigFlags(std::string default_profile) : profile(std::move(default_profile)) {}

  void add_data(CLI::App* app) {
    app->add_option("--profile", profile, "Base configuration: desk, paper or smoke")
        ->check(CLI::IsMember({"desk", "paper", "smoke"}))
        ->capture_default_str();
    app->add_option("--config", config_path, "JSON file overriding the profile")->check(CLI::ExistingFile);
    app->add_option("--antennas", M, "Number of BS antennas M")->check(CLI::PositiveNumber);
    app->add_option("--users", users, "Users per environment U")->check(CLI::PositiveNumber);
    app->add_option("--delta-f-hz", delta_f, "Uplink/downlink frequency difference");
    app->add_option("--f-min-hz", f_min, "Lowest uplink frequency");
    app->add_option("--f-max-hz", f_max, "Highest uplink frequency");
    app->add_option("--snr-db", snr_db, "Estimation SNR of source and test data");
    app->add_option("--pilot-len", pilot_len, "Pilot length")->check(CLI::PositiveNumber);
    app->add_option("--noise-mode", noise_mode, "clean, awgn or lmmse")
        ->check(CLI::IsMember({"clean", "awgn", "lmmse"}));
    app->add_option("--rays", rays, "Rays per user")->check(CLI::PositiveNumber);
    app->add_option("--amplitude-scale", amplitude_scale, "RMS ray amplitude");
    app->add_option("--delay-max", delay_max, "Largest ray delay in seconds");
    app->add_option("--seed", seed, "Master seed");
    app->add_option("--threads", threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
  }

  void add_training(CLI::App* app) {
    app->add_option("--gamma", gamma, "Pooled / across-task ADAM rate");
    app->add_option("--beta", beta, "Inner-task and adaption rate");
    app->add_option("--v", V, "Batch size V")->check(CLI::PositiveNumber);
    app->add_option("--k-s", K_S, "Source tasks K_S")->check(CLI::PositiveNumber);
    app->add_option("--k-b", K_B, "Tasks per meta step K_B")->check(CLI::PositiveNumber);
    app->add_option("--n-tr", N_Tr, "Samples per source task N_Tr")->check(CLI::PositiveNumber);
    app->add_option("--g-tr", G_Tr, "Inner gradient steps G_Tr")->check(CLI::NonNegativeNumber);
    app->add_option("--support-size", support_size, "Support part of N_Tr")->check(CLI::PositiveNumber);
    app->add_option("--max-steps", max_steps, "Pooled training step cap")->check(CLI::NonNegativeNumber);
    app->add_option("--meta-max-steps", meta_max_steps, "Meta-training step cap")->check(CLI::NonNegativeNumber);
    app->add_option("--conv-window", conv_window, "Convergence window")->check(CLI::PositiveNumber);
    app->add_option("--conv-tol", conv_tol, "Relative window improvement below which training stops");
    app->add_flag("--no-early-stop", no_early_stop, "Always run to the step cap");
    app->add_option("--meta-mode", meta_mode, "exact or first-order")->check(CLI::IsMember({"exact", "first-order"}));
    app->add_flag("--regenerate-tasks", regenerate, "Draw fresh support/query sets on every task visit");
    app->add_option("--hidden", hidden, "Hidden widths, e.g. 128,128")->delimiter(',');
  }

  void add_targets(CLI::App* app) {
    app->add_option("--k-t", K_T, "Target tasks K_T")->check(CLI::PositiveNumber);
    app->add_option("--n-ad", N_Ad, "Adaption samples N_Ad")->check(CLI::PositiveNumber);
    app->add_option("--n-te", N_Te, "Test samples N_Te")->check(CLI::PositiveNumber);
    app->add_option("--g-ad", G_Ad, "Adaption gradient steps G_Ad")->check(CLI::NonNegativeNumber);
    app->add_option("--adaption-snr-db", adaption_snr_db, "Estimation SNR of adaption data");
    app->add_option("--adaption-noise-mode", adaption_noise_mode, "clean, awgn or lmmse")
        ->check(CLI::IsMember({"clean", "awgn", "lmmse"}));
    app->add_option("--direct-rule", direct_rule, "adam or gd")->check(CLI::IsMember({"adam", "gd"}));
    app->add_option("--meta-rule", meta_rule, "adam or gd")->check(CLI::IsMember({"adam", "gd"}));
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg = profile == "paper"   ? ExperimentConfig::paper_defaults()
                           : profile == "smoke" ? ExperimentConfig::smoke()
                                                : ExperimentConfig::desk();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      const json j = json::parse(in, nullptr, false);
      if (j.is_discarded()) throw UsageError("--config: " + config_path + " is not valid JSON");
      update_from_json(cfg, j);
    }
    auto& t = cfg.train;
    if (M) cfg.array.M = *M;
    if (users) cfg.data.users = t.U = *users;
    if (delta_f) cfg.data.delta_f = *delta_f;
    if (f_min) cfg.data.f_min = *f_min;
    if (f_max) cfg.data.f_max = *f_max;
    if (snr_db) cfg.data.noise.snr_db = *snr_db;
    if (pilot_len) cfg.data.noise.pilot_len = cfg.adaption_noise.pilot_len = *pilot_len;
    if (noise_mode) cfg.data.noise.mode = noise_mode_from_string(*noise_mode);
    if (noise_mode && !adaption_noise_mode) cfg.adaption_noise.mode = cfg.data.noise.mode;
    if (snr_db && !adaption_snr_db) cfg.adaption_noise.snr_db = *snr_db;
    if (adaption_snr_db) cfg.adaption_noise.snr_db = *adaption_snr_db;
    if (adaption_noise_mode) cfg.adaption_noise.mode = noise_mode_from_string(*adaption_noise_mode);
    if (rays) cfg.generator.ray_count = *rays;
    if (amplitude_scale) cfg.generator.amplitude_scale = *amplitude_scale;
    if (delay_max) cfg.generator.delay_max = *delay_max;
    if (seed) t.seed = *seed;
    if (threads) t.threads = *threads;
    if (gamma) t.gamma = *gamma;
    if (beta) t.beta = *beta;
    if (V) t.V = *V;
    if (K_S) t.K_S = *K_S;
    if (K_T) t.K_T = *K_T;
    if (K_B) t.K_B = *K_B;
    if (N_Tr) t.N_Tr = *N_Tr;
    if (N_Ad) t.N_Ad = *N_Ad;
    if (N_Te) t.N_Te = *N_Te;
    if (G_Tr) t.G_Tr = *G_Tr;
    if (G_Ad) t.G_Ad = *G_Ad;
    if (support_size) t.support_size = *support_size;
    if (max_steps) t.max_steps = *max_steps;
    if (meta_max_steps) t.meta_max_steps = *meta_max_steps;
    if (conv_window) t.conv_window = *conv_window;
    if (conv_tol) t.conv_tol = *conv_tol;
    if (no_early_stop) t.early_stop = false;
    if (meta_mode) t.meta_mode = meta_mode_from_string(*meta_mode);
    if (direct_rule) t.direct_rule = adapt_rule_from_string(*direct_rule);
    if (meta_rule) t.meta_rule = adapt_rule_from_string(*meta_rule);
    if (regenerate) t.regenerate_tasks = true;
    if (!hidden.empty()) t.hidden = hidden;
    try {
      cfg.array.validate();
      cfg.generator.validate();
      cfg.validate();
      t.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    return cfg;
  }
};

std::string loss_csv(const TrainedModel& m) {
  std::ostringstream os;
  os << std::setprecision(17) << "step,loss,cosine\n";
  for (std::size_t i = 0; i < m.loss_history.size(); ++i) {
    os << i << ',' << m.loss_history[i] << ',';
    if (i > 0 && i - 1 < m.similarity_history.size()) os << m.similarity_history[i - 1];
    os << '\n';
  }
  return os.str();
}

fs::path with_suffix(const fs::path& p, const char* suffix) {
  fs::path out = p;
  out += suffix;
  return out;
}

DatasetFile read_role(const std::string& path, Role expected, const char* flag) {
  DatasetFile f = read_dataset(path);
  if (f.role != expected)
    throw UsageError(std::string(flag) + ": " + path + " holds " + to_string(f.role) + " data, expected " +
                     to_string(expected));
  return f;
}

void require_width(const TrainedModel& m, int M, const std::string& what) {
  if (m.spec.input_width() != 2 * M || m.spec.output_width() != 2 * M)
    throw std::runtime_error("shape error: checkpoint expects M=" + std::to_string(m.spec.input_width() / 2) + ", " +
                             what + " has M=" + std::to_string(M));
}

const TaskDataset* find_task(const DatasetFile& f, std::int64_t env_id) {
  for (const auto& t : f.tasks)
    if (t.env_id == env_id) return &t;
  return nullptr;
}

std::string label_for(const TrainedModel& m, bool adapted) {
  if (m.provenance == Provenance::Meta) return kMetaLearning;
  if (m.provenance == Provenance::NoTransfer) return adapted ? kDirectTransfer : kNoTransfer;
  return to_string(m.provenance);
}

AdaptRule rule_for(const TrainedModel& m, const TrainConfig& cfg, const std::string& flag) {
  if (flag == "adam") return AdaptRule::Adam;
  if (flag == "gd") return AdaptRule::Gd;
  return m.provenance == Provenance::Meta ? cfg.meta_rule : cfg.direct_rule;
}

// ---- subcommands ------------------------------------------------------------

struct Cli {
  CLI::App app{"Uplink-to-downlink CSI prediction with transfer and meta-learning"};
  std::vector<std::string> argv;
  Manifest manifest;
  int status = 0;

  // gen
  ConfigFlags gen_flags{"paper"};
  int gen_envs = 1;
  std::int64_t gen_offset = 0;
  std::vector<std::string> gen_roles{"train"};
  std::vector<int> gen_pairs;
  std::string gen_out, gen_manifest;

  // train / meta-train
  ConfigFlags train_flags{"desk"}, meta_flags{"desk"};
  std::string train_data, train_out, train_manifest;
  std::string meta_data, meta_out, meta_manifest;

  // adapt
  std::string adapt_model, adapt_data, adapt_out, adapt_manifest, adapt_rule = "auto";
  std::optional<std::int64_t> adapt_env;
  std::optional<int> adapt_g_ad, adapt_n_ad;
  std::optional<double> adapt_beta;

  // eval
  std::string eval_model, eval_test, eval_adaption, eval_out, eval_manifest, eval_label, eval_rule = "auto";
  std::optional<int> eval_g_ad, eval_n_ad;
  std::optional<double> eval_beta;
  double eval_value = 0.0;

  // sweep
  ConfigFlags sweep_flags{"desk"};
  std::string sweep_var = "none", sweep_out, sweep_manifest, sweep_nt, sweep_meta, sweep_save;
  std::vector<double> sweep_grid;

  // gradcheck
  GradcheckConfig gc;
  std::string gc_out;

  // replay
  std::string replay_manifest;

  CLI::App *gen_cmd, *train_cmd, *meta_cmd, *adapt_cmd, *eval_cmd, *sweep_cmd, *gradcheck_cmd, *replay_cmd;

  Cli() {
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string("fddcsi ") + FDDCSI_BUILD_ID);

    gen_cmd = app.add_subcommand("gen", "Generate task datasets");
    gen_flags.add_data(gen_cmd);
    gen_cmd->add_option("--envs", gen_envs, "Number of environments")->check(CLI::PositiveNumber)->capture_default_str();
    gen_cmd->add_option("--env-offset", gen_offset, "Id of the first environment")->capture_default_str();
    gen_cmd->add_option("--role", gen_roles, "Roles drawn per environment, in order (key-disjoint)")
        ->delimiter(',')
        ->check(CLI::IsMember({"train", "adaption", "test", "train-support", "train-query"}));
    gen_cmd->add_option("--pairs", gen_pairs, "Pairs per environment, one value or one per role")->delimiter(',');
    gen_cmd->add_option("--out", gen_out, "Output directory")->required();
    gen_cmd->add_option("--manifest", gen_manifest, "Manifest path (default <out>/manifest.json)");

    train_cmd = app.add_subcommand("train", "Pooled no-transfer training");
    train_flags.add_data(train_cmd);
    train_flags.add_training(train_cmd);
    train_cmd->add_option("--data", train_data, "Source dataset (train role); generated from the profile if omitted")
        ->check(CLI::ExistingFile);
    train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
    train_cmd->add_option("--manifest", train_manifest, "Manifest path");

    meta_cmd = app.add_subcommand("meta-train", "Meta-training of the initialization");
    meta_flags.add_data(meta_cmd);
    meta_flags.add_training(meta_cmd);
    meta_cmd->add_option("--data", meta_data, "Source dataset (train role); generated from the profile if omitted")
        ->check(CLI::ExistingFile);
    meta_cmd->add_option("--out", meta_out, "Checkpoint path")->required();
    meta_cmd->add_option("--manifest", meta_manifest, "Manifest path");

    adapt_cmd = app.add_subcommand("adapt", "Fine-tune a checkpoint on one target's adaption set");
    adapt_cmd->add_option("--model", adapt_model, "Base checkpoint")->required()->check(CLI::ExistingFile);
    adapt_cmd->add_option("--data", adapt_data, "Adaption dataset")->required()->check(CLI::ExistingFile);
    adapt_cmd->add_option("--env-id", adapt_env, "Environment to adapt to (needed if the file holds several)");
    adapt_cmd->add_option("--g-ad", adapt_g_ad, "Adaption gradient steps G_Ad")->check(CLI::NonNegativeNumber);
    adapt_cmd->add_option("--n-ad", adapt_n_ad, "Use only the first N_Ad pairs")->check(CLI::PositiveNumber);
    adapt_cmd->add_option("--beta", adapt_beta, "Adaption rate");
    adapt_cmd->add_option("--rule", adapt_rule, "auto, adam or gd")->check(CLI::IsMember({"auto", "adam", "gd"}));
    adapt_cmd->add_option("--out", adapt_out, "Adapted checkpoint path")->required();
    adapt_cmd->add_option("--manifest", adapt_manifest, "Manifest path");

    eval_cmd = app.add_subcommand("eval", "NMSE of a checkpoint on test data");
    eval_cmd->add_option("--model", eval_model, "Checkpoint")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--test", eval_test, "Test dataset")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--adaption", eval_adaption, "Adapt per target on this dataset first")->check(CLI::ExistingFile);
    eval_cmd->add_option("--g-ad", eval_g_ad, "Adaption gradient steps G_Ad")->check(CLI::NonNegativeNumber);
    eval_cmd->add_option("--n-ad", eval_n_ad, "Use only the first N_Ad adaption pairs")->check(CLI::PositiveNumber);
    eval_cmd->add_option("--beta", eval_beta, "Adaption rate");
    eval_cmd->add_option("--rule", eval_rule, "auto, adam or gd")->check(CLI::IsMember({"auto", "adam", "gd"}));
    eval_cmd->add_option("--label", eval_label, "Algorithm column (default from provenance)");
    eval_cmd->add_option("--sweep-value", eval_value, "sweep_value column")->capture_default_str();
    eval_cmd->add_option("--out", eval_out, "CSV path (stdout if omitted)");
    eval_cmd->add_option("--manifest", eval_manifest, "Manifest path");

    sweep_cmd = app.add_subcommand("sweep", "Three-way comparison over a parameter grid");
    sweep_flags.add_data(sweep_cmd);
    sweep_flags.add_training(sweep_cmd);
    sweep_flags.add_targets(sweep_cmd);
    sweep_cmd->add_option("--var", sweep_var, "none, G_Ad, N_Ad, delta_f, M or snr_db")
        ->check(CLI::IsMember({"none", "G_Ad", "N_Ad", "delta_f", "M", "snr_db"}))
        ->capture_default_str();
    sweep_cmd->add_option("--grid", sweep_grid, "Grid values, comma separated")->delimiter(',');
    sweep_cmd->add_option("--nt-model", sweep_nt, "Reuse this no-transfer checkpoint")->check(CLI::ExistingFile);
    sweep_cmd->add_option("--meta-model", sweep_meta, "Reuse this meta checkpoint")->check(CLI::ExistingFile);
    sweep_cmd->add_option("--save-models", sweep_save, "Directory for the trained checkpoints");
    sweep_cmd->add_option("--out", sweep_out, "CSV path")->required();
    sweep_cmd->add_option("--manifest", sweep_manifest, "Manifest path");

    gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference checks of all derivatives");
    gradcheck_cmd->add_option("--probe-count", gc.probe_count, "Coordinates per seed")->capture_default_str();
    gradcheck_cmd->add_option("--seeds", gc.seeds, "Independent draws per suite")->capture_default_str();
    gradcheck_cmd->add_option("--seed", gc.seed, "Master seed")->capture_default_str();
    gradcheck_cmd->add_option("--out", gc_out, "JSON report path");

    replay_cmd = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
    replay_cmd->add_option("manifest", replay_manifest, "Manifest JSON")->required()->check(CLI::ExistingFile);

    for (CLI::App* sub : app.get_subcommands({}))
      for (CLI::Option* opt : sub->get_options()) {
        const auto& names = opt->get_lnames();
        if (names.empty() || names.front() == "help") continue;
        opt->envname(env_name(names.front()));
      }
  }

  void begin(const char* name, const ExperimentConfig* cfg) {
    manifest.subcommand = name;
    manifest.argv = argv;
    manifest.started = utc_now();
    if (cfg) {
      manifest.config = to_json(*cfg);
      manifest.seed = cfg->train.seed;
    }
  }

  void run_gen() {
    const ExperimentConfig cfg = gen_flags.resolve();
    std::vector<Role> roles;
    for (const auto& r : gen_roles) roles.push_back(role_from_string(r));
    for (std::size_t i = 0; i < roles.size(); ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (roles[i] == roles[j]) throw UsageError("--role " + gen_roles[i] + " given twice");
    std::vector<int> pairs = gen_pairs;
    if (pairs.empty())
      for (Role r : roles)
        pairs.push_back(r == Role::Adaption ? cfg.train.N_Ad : r == Role::Test ? cfg.train.N_Te : cfg.train.N_Tr);
    if (pairs.size() == 1) pairs.resize(roles.size(), pairs.front());
    if (pairs.size() != roles.size()) throw UsageError("--pairs needs one value or one per --role");
    for (int n : pairs)
      if (n < 1) throw UsageError("--pairs must be >= 1");
    begin("gen", &cfg);

    const std::size_t E = static_cast<std::size_t>(gen_envs);
    std::vector<std::vector<TaskDataset>> drawn(E);
    parallel_for(E, cfg.train.threads, [&](std::size_t e) {
      const Environment env = sample_environment(gen_offset + static_cast<std::int64_t>(e), cfg.generator, cfg.train.seed);
      EnvironmentSampler sampler(env, cfg.array, cfg.data);
      for (std::size_t r = 0; r < roles.size(); ++r) {
        const NoiseSpec& noise = roles[r] == Role::Adaption ? cfg.adaption_noise : cfg.data.noise;
        drawn[e].push_back(sampler.draw(roles[r], pairs[r], noise));
      }
    });
    fs::create_directories(gen_out);
    for (std::size_t r = 0; r < roles.size(); ++r) {
      DatasetFile file;
      file.M = cfg.array.M;
      file.role = roles[r];
      file.delta_f = cfg.data.delta_f;
      file.noise = roles[r] == Role::Adaption ? cfg.adaption_noise : cfg.data.noise;
      for (std::size_t e = 0; e < E; ++e) file.tasks.push_back(std::move(drawn[e][r]));
      const fs::path path = fs::path(gen_out) / (to_string(roles[r]) + ".fmcd");
      write_dataset(path, file);
      manifest.outputs.push_back(path.string());
      std::cout << path.string() << ": " << file.tasks.size() << " environments, " << file.pair_count()
                << " pairs\n";
    }
    manifest.write(gen_manifest.empty() ? fs::path(gen_out) / "manifest.json" : fs::path(gen_manifest));
  }

  std::vector<TaskDataset> sources_for(ExperimentConfig& cfg, const std::string& data) {
    if (data.empty()) return source_datasets(cfg, source_environments(cfg));
    DatasetFile f = read_role(data, Role::Train, "--data");
    cfg.array.M = f.M;
    return std::move(f.tasks);
  }

  void save_model(const TrainedModel& m, const std::string& out, const std::string& man) {
    write_checkpoint(out, m);
    write_text_atomic(with_suffix(out, ".loss.csv"), loss_csv(m));
    manifest.outputs = {out, with_suffix(out, ".loss.csv").string()};
    manifest.write(manifest_path(man, out));
    std::cout << out << ": " << to_string(m.provenance) << ", " << m.steps << " steps"
              << (m.converged ? " (converged)" : "") << ", final loss " << m.loss_history.back() << "\n";
  }

  void run_train() {
    ExperimentConfig cfg = train_flags.resolve();
    const auto sources = sources_for(cfg, train_data);
    begin("train", &cfg);
    save_model(train_no_transfer(sources, cfg.array.M, cfg.train), train_out, train_manifest);
  }

  void run_meta() {
    ExperimentConfig cfg = meta_flags.resolve();
    if (cfg.train.regenerate_tasks && !meta_data.empty())
      throw UsageError("--regenerate-tasks needs generated sources, not --data");
    TaskDrawer drawer;
    std::size_t count = 0;
    std::vector<TaskDataset> sources;
    if (cfg.train.regenerate_tasks) {
      const auto envs = source_environments(cfg);
      count = envs.size();
      drawer = regenerating_drawer(envs, cfg.array, cfg.data, cfg.train.support_size,
                                   cfg.train.N_Tr - cfg.train.support_size);
    } else {
      sources = sources_for(cfg, meta_data);
      count = sources.size();
      drawer = fixed_split_drawer(sources, cfg.train.support_size);
    }
    begin("meta-train", &cfg);
    save_model(meta_train(count, drawer, cfg.array.M, cfg.train), meta_out, meta_manifest);
  }

  TrainConfig adaption_config(const TrainedModel& m, std::optional<int> g_ad, std::optional<double> beta) {
    TrainConfig tc = m.config;
    if (g_ad) tc.G_Ad = *g_ad;
    if (beta) tc.beta = *beta;
    if (!(tc.beta > 0.0)) throw UsageError("--beta must be > 0");
    return tc;
  }

  static TaskDataset truncated(const TaskDataset& t, std::optional<int> n) {
    TaskDataset out = t;
    if (n) {
      if (static_cast<std::size_t>(*n) > t.size())
        throw UsageError("--n-ad " + std::to_string(*n) + " exceeds the " + std::to_string(t.size()) +
                         " pairs of environment " + std::to_string(t.env_id));
      out.pairs.resize(static_cast<std::size_t>(*n));
    }
    return out;
  }

  void run_adapt() {
    const TrainedModel base = read_checkpoint(adapt_model);
    const DatasetFile data = read_role(adapt_data, Role::Adaption, "--data");
    require_width(base, data.M, "adaption data");
    const TaskDataset* task = nullptr;
    if (adapt_env) {
      task = find_task(data, *adapt_env);
      if (!task) throw UsageError("--env-id " + std::to_string(*adapt_env) + " not in " + adapt_data);
    } else if (data.tasks.size() == 1) {
      task = &data.tasks.front();
    } else {
      throw UsageError(adapt_data + " holds " + std::to_string(data.tasks.size()) + " environments; pass --env-id");
    }
    const TrainConfig tc = adaption_config(base, adapt_g_ad, adapt_beta);
    begin("adapt", nullptr);
    manifest.config = {{"train", to_json(tc)}, {"rule", to_string(rule_for(base, tc, adapt_rule))},
                       {"env_id", task->env_id}};
    manifest.seed = tc.seed;
    const TrainedModel out = adapt(base, truncated(*task, adapt_n_ad), tc, rule_for(base, tc, adapt_rule));
    save_model(out, adapt_out, adapt_manifest);
  }

  void run_eval() {
    const TrainedModel base = read_checkpoint(eval_model);
    const DatasetFile test = read_role(eval_test, Role::Test, "--test");
    require_width(base, test.M, "test data");
    std::optional<DatasetFile> ad;
    if (!eval_adaption.empty()) {
      ad = read_role(eval_adaption, Role::Adaption, "--adaption");
      require_width(base, ad->M, "adaption data");
    }
    const TrainConfig tc = adaption_config(base, eval_g_ad, eval_beta);
    const AdaptRule rule = rule_for(base, tc, eval_rule);
    begin("eval", nullptr);
    manifest.config = {{"train", to_json(tc)}, {"rule", to_string(rule)}, {"adapted", ad.has_value()}};
    manifest.seed = tc.seed;

    std::vector<double> per(test.tasks.size());
    parallel_for(test.tasks.size(), tc.threads, [&](std::size_t k) {
      const TaskDataset& t = test.tasks[k];
      if (!ad) {
        per[k] = test_model(base, t);
        return;
      }
      const TaskDataset* a = find_task(*ad, t.env_id);
      if (!a) throw std::runtime_error("no adaption data for environment " + std::to_string(t.env_id));
      per[k] = test_model(adapt(base, truncated(*a, eval_n_ad), tc, rule), t);
    });

    SweepReport report;
    report.seed = tc.seed;
    SweepPoint point;
    point.value = eval_value;
    point.direct = NmseResult::from_targets(eval_label.empty() ? label_for(base, ad.has_value()) : eval_label, per);
    report.points.push_back(point);
    std::string csv = report.to_csv();
    // Keep only the header and the row of this model.
    std::istringstream lines(csv);
    std::string line, out;
    while (std::getline(lines, line))
      if (out.empty() || line.find("," + point.direct.algorithm + ",") != std::string::npos) out += line + "\n";
    if (eval_out.empty()) {
      std::cout << out;
      return;
    }
    write_text_atomic(eval_out, out);
    manifest.outputs = {eval_out};
    manifest.write(manifest_path(eval_manifest, eval_out));
  }

  void run_sweep() {
    const ExperimentConfig cfg = sweep_flags.resolve();
    Sweep s{sweep_variable_from_string(sweep_var), sweep_grid};
    if (s.variable != SweepVariable::None && s.grid.empty()) throw UsageError("--grid is required with --var");
    const bool retrains = s.variable == SweepVariable::DeltaF || s.variable == SweepVariable::M;
    if (sweep_nt.empty() != sweep_meta.empty()) throw UsageError("--nt-model and --meta-model go together");
    if (retrains && (!sweep_nt.empty() || !sweep_save.empty()))
      throw UsageError("sweeps over " + sweep_var + " retrain per point; checkpoints cannot be reused or saved");
    begin("sweep", &cfg);

    std::optional<TrainedPair> models;
    if (!sweep_nt.empty()) {
      models.emplace();
      models->no_transfer = read_checkpoint(sweep_nt);
      models->meta = read_checkpoint(sweep_meta);
      require_width(models->no_transfer, cfg.array.M, "the sweep configuration");
      require_width(models->meta, cfg.array.M, "the sweep configuration");
    } else if (!retrains) {
      models = train_models(cfg);
      if (!sweep_save.empty()) {
        fs::create_directories(sweep_save);
        for (const auto* m : {&models->no_transfer, &models->meta}) {
          const fs::path p = fs::path(sweep_save) / (to_string(m->provenance) + ".fmck");
          write_checkpoint(p, *m);
          write_text_atomic(with_suffix(p, ".loss.csv"), loss_csv(*m));
          manifest.outputs.push_back(p.string());
        }
      }
    }
    const SweepReport report = run_three_way(cfg, s, models ? &*models : nullptr);
    write_text_atomic(sweep_out, report.to_csv());
    manifest.outputs.push_back(sweep_out);
    manifest.write(manifest_path(sweep_manifest, sweep_out));
    std::cout << report.to_csv();
  }

  void run_gradcheck() {
    if (gc.probe_count < 1) throw UsageError("--probe-count must be >= 1");
    if (gc.seeds < 1) throw UsageError("--seeds must be >= 1");
    const auto results = fddcsi::run_gradcheck(gc);
    json report = json::array();
    bool ok = true;
    for (const auto& r : results) {
      std::cout << std::left << std::setw(28) << r.name << " max_rel_error=" << std::scientific << std::setprecision(3)
                << r.max_rel_error << " tol=" << r.tolerance << " probes=" << r.probes << " skipped=" << r.skipped
                << (r.pass ? "  PASS" : "  FAIL") << "\n";
      report.push_back(json{{"suite", r.name},
                        {"max_rel_error", r.max_rel_error},
                        {"tolerance", r.tolerance},
                        {"probes", r.probes},
                        {"skipped", r.skipped},
                        {"pass", r.pass}});
      ok = ok && r.pass;
    }
    if (!gc_out.empty()) {
      begin("gradcheck", nullptr);
      manifest.seed = gc.seed;
      manifest.config = {{"probe_count", gc.probe_count}, {"seeds", gc.seeds}};
      write_text_atomic(gc_out, report.dump(2) + "\n");
      manifest.outputs = {gc_out};
      manifest.write(with_suffix(gc_out, ".manifest.json"));
    }
    status = ok ? 0 : 1;
  }

  void dispatch() {
    if (*gen_cmd) run_gen();
    else if (*train_cmd) run_train();
    else if (*meta_cmd) run_meta();
    else if (*adapt_cmd) run_adapt();
    else if (*eval_cmd) run_eval();
    else if (*sweep_cmd) run_sweep();
    else if (*gradcheck_cmd) run_gradcheck();
  }
};

int run(std::vector<std::string> args, int depth = 0) {
  Cli cli;
  cli.argv = args;
  try {
    std::reverse(args.begin(), args.end());
    cli.app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = cli.app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    if (*cli.replay_cmd) {
      if (depth > 0) throw UsageError("a replay manifest cannot itself be a replay");
      std::ifstream in(cli.replay_manifest);
      const json m = json::parse(in, nullptr, false);
      if (m.is_discarded() || !m.contains("argv")) throw UsageError(cli.replay_manifest + " is not a run manifest");
      for (const auto& [k, v] : fddcsi_environment()) unsetenv(k.c_str());
      if (m.contains("env"))
        for (const auto& [k, v] : m.at("env").items()) setenv(k.c_str(), v.get<std::string>().c_str(), 1);
      return run(m.at("argv").get<std::vector<std::string>>(), depth + 1);
    }
    cli.dispatch();
    return cli.status;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) { return run(std::vector<std::string>(argv + 1, argv + argc)); }
