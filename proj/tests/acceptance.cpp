// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Optional arguments select criteria by number, e.g. `acceptance 1 3 8`.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fddcsi/config_io.hpp"
#include "fddcsi/eval.hpp"
#include "fddcsi/store.hpp"
#include "fddcsi/verify.hpp"

using namespace fddcsi;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// ---- 1, 2: derivatives --------------------------------------------------------

Outcome gradient_check() {
  const auto t = Clock::now();
  const SuiteResult r = check_backward(GradcheckConfig{});
  const double s = seconds_since(t);
  return {r.pass && s < 30.0, "max rel err " + fmt(r.max_rel_error, 3) + " over " + std::to_string(r.probes) +
                                  " probes (" + std::to_string(r.skipped) + " redrawn), " + fmt(s, 3) + " s"};
}

Outcome meta_gradient_check() {
  const auto t = Clock::now();
  const auto suites = check_meta_gradient(GradcheckConfig{});
  const double s = seconds_since(t);
  bool pass = s < 60.0;
  std::string detail;
  for (const auto& r : suites) {
    pass = pass && r.pass;
    detail += r.name + " " + fmt(r.max_rel_error, 3) + ", ";
  }
  return {pass, detail + fmt(s, 3) + " s"};
}

// ---- 3: Taylor residual -------------------------------------------------------

Outcome taylor_scaling() {
  const ExperimentConfig cfg = ExperimentConfig::desk();
  const LayerSpec spec = network_spec(cfg.array.M, cfg.train);
  const Network net(spec);
  const double beta = cfg.train.beta;
  double sum = 0.0;
  double lo = 1e300, hi = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng = make_rng(seed, Stream::Probe);
    const NetParams omega = init_params(spec, rng, cfg.train.init_fan);
    const Environment env = sample_environment(static_cast<std::int64_t>(seed), cfg.generator, seed);
    EnvironmentSampler sampler(env, cfg.array, cfg.data);
    const Batch sup = make_batch(sampler.draw(Role::TrainSupport, cfg.train.support_size));
    const Batch que = make_batch(sampler.draw(Role::TrainQuery, cfg.train.N_Tr - cfg.train.support_size));
    const double full = taylor_residual(net, omega, sup, que, beta).residual;
    const double half = taylor_residual(net, omega, sup, que, beta / 2).residual;
    const double ratio = full / half;
    sum += ratio;
    lo = std::min(lo, ratio);
    hi = std::max(hi, ratio);
  }
  const double mean = sum / 20.0;
  return {mean >= 3.2 && mean <= 4.8,
          "mean ratio " + fmt(mean) + " (range " + fmt(lo) + ".." + fmt(hi) + ") at beta " + fmt(beta)};
}

// ---- 4-7: desk experiments ----------------------------------------------------

struct Desk {
  ExperimentConfig cfg = ExperimentConfig::desk();
  TrainedPair models;
  bool trained = false;
  SweepReport g_ad;
  bool g_ad_done = false;

  const TrainedPair& pair() {
    if (!trained) {
      models = train_models(cfg);
      trained = true;
      std::cerr << "  desk models: no-transfer " << models.no_transfer.steps << " steps (" << fmt(models.no_transfer_seconds)
                << " s), meta " << models.meta.steps << " steps (" << fmt(models.meta_seconds) << " s)\n";
    }
    return models;
  }

  const SweepReport& g_ad_sweep() {
    if (!g_ad_done) {
      g_ad = run_three_way(cfg, {SweepVariable::G_Ad, {0, 100, 1000}}, &pair());
      g_ad_done = true;
    }
    return g_ad;
  }
};

const SweepPoint& point_at(const SweepReport& r, double value) {
  for (const auto& p : r.points)
    if (p.value == value) return p;
  throw std::logic_error("missing sweep point " + fmt(value));
}

Outcome three_way_ordering(Desk& desk) {
  const SweepPoint& p = point_at(desk.g_ad_sweep(), desk.cfg.train.G_Ad);
  const double total = desk.models.no_transfer_seconds + desk.models.meta_seconds + p.adapt_seconds;
  const double mt = p.meta.mean_linear, dt = p.direct.mean_linear, nt = p.no_transfer.mean_linear;
  const bool pass = mt < dt && dt < nt && mt <= 0.9 * dt && total < 1800.0;
  return {pass, "Mt " + fmt(mt) + " Dt " + fmt(dt) + " Nt " + fmt(nt) + ", Mt/Dt " + fmt(mt / dt) + ", " +
                    fmt(total) + " s"};
}

Outcome adaption_curve(Desk& desk) {
  const auto& r = desk.g_ad_sweep();
  const SweepPoint& zero = point_at(r, 0);
  const SweepPoint& hundred = point_at(r, 100);
  const double mt0 = zero.meta.mean_linear, nt = zero.no_transfer.mean_linear;
  const double near = std::abs(mt0 - nt) / nt;
  const double meta_drop = mt0 - hundred.meta.mean_linear;
  const double direct_drop = zero.direct.mean_linear - hundred.direct.mean_linear;
  return {near <= 0.2 && meta_drop > direct_drop,
          "Mt(0) " + fmt(mt0) + " vs Nt " + fmt(nt) + " (" + fmt(100 * near, 3) + "%), drop to G_Ad=100: meta " +
              fmt(meta_drop) + " direct " + fmt(direct_drop)};
}

Outcome saturation(Desk& desk) {
  const auto r = run_three_way(desk.cfg, {SweepVariable::N_Ad, {5, 20, 60, 100}}, &desk.pair());
  bool pass = true;
  std::string detail;
  for (auto pick : {&SweepPoint::direct, &SweepPoint::meta}) {
    auto v = [&](double n) { return (point_at(r, n).*pick).mean_linear; };
    const double early = v(5) - v(20);
    const double late = v(60) - v(100);
    const bool ok = early > 0.0 && late < 0.25 * early;
    pass = pass && ok;
    detail += (point_at(r, 5).*pick).algorithm + " 5->20 " + fmt(early) + " 60->100 " + fmt(late) + "; ";
  }
  return {pass, detail};
}

Outcome trends(Desk& desk) {
  bool pass = true;
  std::string detail;
  auto monotone = [&](SweepVariable var, std::vector<double> grid) {
    const auto r = run_three_way(desk.cfg, {var, grid});
    for (auto pick : {&SweepPoint::no_transfer, &SweepPoint::direct, &SweepPoint::meta}) {
      std::vector<double> nmse;
      for (const auto& p : r.points) nmse.push_back((p.*pick).mean_linear);
      const double rho = spearman(grid, nmse);
      pass = pass && rho >= 0.0;
      detail += to_string(var) + "/" + (r.points[0].*pick).algorithm + " rho " + fmt(rho, 3) + "; ";
    }
  };
  monotone(SweepVariable::DeltaF, {40e6, 120e6, 360e6});
  monotone(SweepVariable::M, {8, 16, 32});

  // SNR: each transfer algorithm against its own model before adaption.
  const auto snr = run_three_way(desk.cfg, {SweepVariable::SnrDb, {-40, -20, 0, 20}}, &desk.pair());
  const SweepPoint& before = point_at(desk.g_ad_sweep(), 0);
  for (auto pick : {&SweepPoint::direct, &SweepPoint::meta}) {
    const double base = (before.*pick).mean_linear;
    const double low = (point_at(snr, -40).*pick).mean_linear;
    const double high = (point_at(snr, 20).*pick).mean_linear;
    const bool ok = std::abs(low - base) <= 0.1 * base && high < base;
    pass = pass && ok;
    detail += "snr/" + (before.*pick).algorithm + " unadapted " + fmt(base) + " -40dB " + fmt(low) + " 20dB " +
              fmt(high) + (ok ? "" : " [fails]") + "; ";
  }
  return {pass, detail};
}

// ---- 8: ADAM oracle -----------------------------------------------------------

Outcome adam_oracle() {
  NetParams w;
  w.layers.push_back({Eigen::MatrixXd::Constant(1, 1, 1.0), Eigen::VectorXd(0)});
  AdamState s;
  const double gamma = 0.1, eps = 1e-8;
  double ow = 1.0, m = 0.0, v = 0.0, worst = 0.0;
  for (int t = 1; t <= 100; ++t) {
    const double g = 2.0 * ow;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    ow -= gamma * (m / (1.0 - std::pow(0.9, t))) / (std::sqrt(v / (1.0 - std::pow(0.999, t))) + eps);
    NetParams grad = w;
    grad.layers[0].W(0, 0) = 2.0 * w.layers[0].W(0, 0);
    adam_step(s, w, grad, gamma);
    worst = std::max(worst, std::abs(w.layers[0].W(0, 0) - ow));
  }
  double first = 0.0;
  for (double g : {1.0, -3.7, 0.02, 250.0}) {
    NetParams p, gp;
    p.layers.push_back({Eigen::MatrixXd::Constant(1, 1, 0.5), Eigen::VectorXd(0)});
    gp.layers.push_back({Eigen::MatrixXd::Constant(1, 1, g), Eigen::VectorXd(0)});
    AdamState fresh;
    adam_step(fresh, p, gp, 1e-3);
    first = std::max(first, std::abs((p.layers[0].W(0, 0) - 0.5) - (-1e-3 * g / (std::abs(g) + eps))));
  }
  return {worst <= 1e-12 && first <= 1e-12,
          "trajectory max dev " + fmt(worst, 3) + ", first-step max dev " + fmt(first, 3)};
}

// ---- 9: width probe -----------------------------------------------------------

Outcome width_probe() {
  const auto rows = proposition1_probe({8, 32, 128, 512}, ProbeConfig{});
  int inversions = 0;
  bool within = true;
  std::string detail;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail += std::to_string(rows[i].width) + ": " + fmt(rows[i].final_loss) + "  ";
    if (i > 0 && rows[i].final_loss > rows[i - 1].final_loss) {
      ++inversions;
      within = within && rows[i].final_loss <= 1.05 * rows[i - 1].final_loss;
    }
  }
  return {inversions <= 1 && within, detail + "(" + std::to_string(inversions) + " inversions)"};
}

// ---- 10: determinism and formats ----------------------------------------------

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  std::string detail;
  bool pass = true;

  // Thread count.
  ExperimentConfig cfg = ExperimentConfig::smoke();
  cfg.train.threads = 1;
  const TrainedPair one = train_models(cfg);
  const auto r1 = run_three_way(cfg, {SweepVariable::G_Ad, {0, 5}}, &one);
  cfg.train.threads = 3;
  const TrainedPair three = train_models(cfg);
  const auto r3 = run_three_way(cfg, {SweepVariable::G_Ad, {0, 5}}, &three);
  const bool threads_ok = one.no_transfer.params == three.no_transfer.params &&
                          one.meta.params == three.meta.params && r1.to_csv() == r3.to_csv();
  pass = pass && threads_ok;
  detail += std::string("threads ") + (threads_ok ? "ok" : "DIFFER");

  // Formats.
  DatasetFile file;
  file.M = cfg.array.M;
  file.role = Role::Train;
  file.delta_f = cfg.data.delta_f;
  file.noise = {0.0, 8, NoiseMode::Lmmse};
  const auto envs = source_environments(cfg);
  file.tasks = source_datasets(cfg, envs);
  const auto bytes = encode_dataset(file);
  const bool data_ok = decode_dataset(bytes) == file && encode_dataset(decode_dataset(bytes)) == bytes;
  const auto ck = encode_checkpoint(one.meta);
  TrainedModel back = decode_checkpoint(ck);
  back.config = one.meta.config;  // restored from the sidecar in file form
  const bool ckpt_ok = back.params == one.meta.params && back.spec == one.meta.spec && encode_checkpoint(back) == ck;
  pass = pass && data_ok && ckpt_ok;
  detail += std::string(", dataset ") + (data_ok ? "ok" : "DIFFER") + ", checkpoint " + (ckpt_ok ? "ok" : "DIFFER");

#ifdef FDDCSI_CLI_PATH
  const fs::path dir = fs::temp_directory_path() / ("fddcsi_accept_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cli = FDDCSI_CLI_PATH;
  auto sh = [&](const std::string& args) {
    const int st = std::system((cli + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  };
  struct Run {
    std::string args;
    std::string manifest;
    std::vector<std::string> outputs;
  };
  const std::string d = dir.string();
  const std::vector<Run> runs = {
      {"gen --profile smoke --envs 3 --role train,test --out " + d + "/g", d + "/g/manifest.json",
       {d + "/g/train.fmcd", d + "/g/test.fmcd"}},
      {"train --profile smoke --out " + d + "/nt.fmck", d + "/nt.fmck.manifest.json", {d + "/nt.fmck", d + "/nt.fmck.loss.csv"}},
      {"meta-train --profile smoke --out " + d + "/mt.fmck", d + "/mt.fmck.manifest.json", {d + "/mt.fmck"}},
      {"eval --model " + d + "/mt.fmck --test " + d + "/g/test.fmcd --out " + d + "/e.csv", d + "/e.csv.manifest.json",
       {d + "/e.csv"}},
  };
  int replayed = 0;
  bool cli_ok = true;
  for (const auto& run : runs) {
    if (sh(run.args) != 0) {
      cli_ok = false;
      break;
    }
    std::vector<std::string> first;
    for (const auto& o : run.outputs) first.push_back(slurp(o));
    for (const auto& o : run.outputs) fs::remove(o);
    if (sh("replay " + run.manifest) != 0) {
      cli_ok = false;
      break;
    }
    for (std::size_t i = 0; i < run.outputs.size(); ++i) cli_ok = cli_ok && fs::exists(run.outputs[i]) && slurp(run.outputs[i]) == first[i];
    ++replayed;
  }
  fs::remove_all(dir);
  pass = pass && cli_ok;
  detail += ", manifest replay " + std::to_string(replayed) + "/" + std::to_string(runs.size()) +
            (cli_ok ? " byte-identical" : " MISMATCH");
#endif
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  Desk desk;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient check", gradient_check},
      {"meta-gradient check", meta_gradient_check},
      {"taylor residual scaling", taylor_scaling},
      {"three-way ordering", [&] { return three_way_ordering(desk); }},
      {"adaption curve shape", [&] { return adaption_curve(desk); }},
      {"adaption set saturation", [&] { return saturation(desk); }},
      {"delta_f / M / SNR trends", [&] { return trends(desk); }},
      {"ADAM oracle", adam_oracle},
      {"width probe", width_probe},
      {"determinism and formats", determinism},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(n)) continue;
    const auto t = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << n << " (" << criteria[i].first << "): " << o.detail
              << "  [" << fmt(seconds_since(t), 3) << " s]" << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
