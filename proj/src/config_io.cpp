#include "fddcsi/config_io.hpp"

namespace fddcsi {

namespace {

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::string fan_name(InitFan f) { return f == InitFan::FanIn ? "fan-in" : "fan-out"; }

InitFan fan_from(const std::string& s) {
  if (s == "fan-in") return InitFan::FanIn;
  if (s == "fan-out") return InitFan::FanOut;
  throw std::invalid_argument("unknown init fan '" + s + "'");
}

}  // namespace

json to_json(const NoiseSpec& noise) {
  return json{{"mode", to_string(noise.mode)}, {"snr_db", noise.snr_db}, {"pilot_len", noise.pilot_len}};
}

void noise_from_json(NoiseSpec& noise, const json& j) {
  if (j.contains("mode")) noise.mode = noise_mode_from_string(j.at("mode").get<std::string>());
  take(j, "snr_db", noise.snr_db);
  take(j, "pilot_len", noise.pilot_len);
}

json to_json(const TrainConfig& c) {
  return json{{"gamma", c.gamma},
              {"beta", c.beta},
              {"rho1", c.rho1},
              {"rho2", c.rho2},
              {"eps", c.eps},
              {"V", c.V},
              {"K_S", c.K_S},
              {"K_T", c.K_T},
              {"K_B", c.K_B},
              {"N_Tr", c.N_Tr},
              {"N_Ad", c.N_Ad},
              {"N_Te", c.N_Te},
              {"U", c.U},
              {"G_Tr", c.G_Tr},
              {"G_Ad", c.G_Ad},
              {"support_size", c.support_size},
              {"max_steps", c.max_steps},
              {"meta_max_steps", c.meta_max_steps},
              {"conv_window", c.conv_window},
              {"conv_tol", c.conv_tol},
              {"early_stop", c.early_stop},
              {"meta_mode", to_string(c.meta_mode)},
              {"direct_rule", to_string(c.direct_rule)},
              {"meta_rule", to_string(c.meta_rule)},
              {"regenerate_tasks", c.regenerate_tasks},
              {"track_similarity", c.track_similarity},
              {"hidden", c.hidden},
              {"init_fan", fan_name(c.init_fan)},
              {"seed", c.seed}};
}

void update_from_json(TrainConfig& c, const json& j) {
  take(j, "gamma", c.gamma);
  take(j, "beta", c.beta);
  take(j, "rho1", c.rho1);
  take(j, "rho2", c.rho2);
  take(j, "eps", c.eps);
  take(j, "V", c.V);
  take(j, "K_S", c.K_S);
  take(j, "K_T", c.K_T);
  take(j, "K_B", c.K_B);
  take(j, "N_Tr", c.N_Tr);
  take(j, "N_Ad", c.N_Ad);
  take(j, "N_Te", c.N_Te);
  take(j, "U", c.U);
  take(j, "G_Tr", c.G_Tr);
  take(j, "G_Ad", c.G_Ad);
  take(j, "support_size", c.support_size);
  take(j, "max_steps", c.max_steps);
  take(j, "meta_max_steps", c.meta_max_steps);
  take(j, "conv_window", c.conv_window);
  take(j, "conv_tol", c.conv_tol);
  take(j, "early_stop", c.early_stop);
  if (j.contains("meta_mode")) c.meta_mode = meta_mode_from_string(j.at("meta_mode").get<std::string>());
  if (j.contains("direct_rule")) c.direct_rule = adapt_rule_from_string(j.at("direct_rule").get<std::string>());
  if (j.contains("meta_rule")) c.meta_rule = adapt_rule_from_string(j.at("meta_rule").get<std::string>());
  take(j, "regenerate_tasks", c.regenerate_tasks);
  take(j, "track_similarity", c.track_similarity);
  take(j, "hidden", c.hidden);
  if (j.contains("init_fan")) c.init_fan = fan_from(j.at("init_fan").get<std::string>());
  take(j, "seed", c.seed);
}

json to_json(const ExperimentConfig& cfg) {
  json j;
  j["array"] = {{"M", cfg.array.M}, {"d", cfg.array.d}, {"c", cfg.array.c}};
  j["generator"] = {{"width_min", cfg.generator.width_min},
                    {"width_max", cfg.generator.width_max},
                    {"ray_count", cfg.generator.ray_count},
                    {"amplitude_scale", cfg.generator.amplitude_scale},
                    {"delay_max", cfg.generator.delay_max}};
  j["data"] = {{"users", cfg.data.users},
               {"f_min", cfg.data.f_min},
               {"f_max", cfg.data.f_max},
               {"delta_f", cfg.data.delta_f},
               {"noise", to_json(cfg.data.noise)},
               {"covariance_draws", cfg.data.covariance_draws}};
  j["adaption_noise"] = to_json(cfg.adaption_noise);
  j["train"] = to_json(cfg.train);
  j["target_id_offset"] = cfg.target_id_offset;
  return j;
}

void update_from_json(ExperimentConfig& cfg, const json& j) {
  if (j.contains("array")) {
    const auto& a = j.at("array");
    take(a, "M", cfg.array.M);
    take(a, "d", cfg.array.d);
    take(a, "c", cfg.array.c);
  }
  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    take(g, "width_min", cfg.generator.width_min);
    take(g, "width_max", cfg.generator.width_max);
    take(g, "ray_count", cfg.generator.ray_count);
    take(g, "amplitude_scale", cfg.generator.amplitude_scale);
    take(g, "delay_max", cfg.generator.delay_max);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    take(d, "users", cfg.data.users);
    take(d, "f_min", cfg.data.f_min);
    take(d, "f_max", cfg.data.f_max);
    take(d, "delta_f", cfg.data.delta_f);
    take(d, "covariance_draws", cfg.data.covariance_draws);
    if (d.contains("noise")) noise_from_json(cfg.data.noise, d.at("noise"));
  }
  if (j.contains("adaption_noise")) noise_from_json(cfg.adaption_noise, j.at("adaption_noise"));
  if (j.contains("train")) update_from_json(cfg.train, j.at("train"));
  take(j, "target_id_offset", cfg.target_id_offset);
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig cfg = ExperimentConfig::desk();
  update_from_json(cfg, j);
  return cfg;
}

std::uint64_t config_digest(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace fddcsi
