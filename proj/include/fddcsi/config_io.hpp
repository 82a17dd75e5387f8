#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"

#include "fddcsi/eval.hpp"

namespace fddcsi {

using json = nlohmann::ordered_json;

json to_json(const TrainConfig& cfg);
json to_json(const ExperimentConfig& cfg);
json to_json(const NoiseSpec& noise);

/// Fields missing from `j` keep the values already in `cfg`.
void update_from_json(TrainConfig& cfg, const json& j);
void update_from_json(ExperimentConfig& cfg, const json& j);
ExperimentConfig experiment_from_json(const json& j);

/// FNV-1a over the canonical JSON text.
std::uint64_t config_digest(const json& j);

}  // namespace fddcsi
