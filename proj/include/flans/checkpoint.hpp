// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory: index.json plus one FTS file per parameter tensor.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flans/seg_net.hpp"

namespace flans {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  std::vector<std::string> stages;  // completed training stages, in order
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;
  std::string rng_state;      // textual mt19937_64 state
  std::string train_config;   // JSON, opaque here
};

std::string model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const std::string& text);

// Overwrites `dir`. Throws IoError.
void save_checkpoint(const std::filesystem::path& dir, const FlansModel<float>& model, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  FlansModel<float> model;
  CheckpointMeta meta;
};

// Throws IoError on a missing/corrupt index or a tensor whose shape does not
// match the rebuilt model.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace flans
