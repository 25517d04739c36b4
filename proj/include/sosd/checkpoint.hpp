#pragma once

#include <cstdint>
#include <filesystem>

#include "json.hpp"
#include "sosd/model.hpp"
#include "sosd/optimizer.hpp"
#include "sosd/scene.hpp"
#include "sosd/trainer.hpp"

namespace sosd {

inline constexpr int kCheckpointFormatVersion = 1;

// Config <-> JSON with stable key names; shared by checkpoints and
// experiment specs. from_json starts from defaults, so specs may omit keys.
nlohmann::json net_config_to_json(const NetConfig& cfg);
NetConfig net_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json augment_config_to_json(const AugmentConfig& cfg);
AugmentConfig augment_config_from_json(const nlohmann::json& j);
nlohmann::json dataset_config_to_json(const DatasetConfig& cfg);
DatasetConfig dataset_config_from_json(const nlohmann::json& j);

struct CheckpointMeta {
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  EMState em_state;
  NetConfig net;
  TrainConfig train;
};

// Layout: <dir>/manifest.json (configs, step, em state, the name -> group
// map, per-parameter Adam step counts) plus params/<name>.sosd,
// optim/<name>.m.sosd, optim/<name>.v.sosd, bn/<name>.mean.sosd and
// .var.sosd. Save then load restores every tensor bitwise.
void save_checkpoint(const std::filesystem::path& dir, Model& model, const Adam& adam,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  Model model;
  Adam adam;
  CheckpointMeta meta;
};

// Rebuilds the model from the stored config and overwrites every parameter,
// moment, and running statistic from the tensor files. A missing or
// inconsistent file is reported as a structured error naming the path.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

// Newest step-<n> checkpoint under <train_out>/checkpoints, empty path if none.
std::filesystem::path latest_checkpoint(const std::filesystem::path& train_out);

}  // namespace sosd
