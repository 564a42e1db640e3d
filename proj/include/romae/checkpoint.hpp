#pragma once

// Binary checkpoints. The byte layout is described in docs/checkpoint_format.md.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "romae/model.hpp"
#include "romae/optim.hpp"

namespace romae {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json model_config_to_json(const RomaeConfig& cfg);
RomaeConfig model_config_from_json(const nlohmann::json& j);

struct Checkpoint {
  RomaeConfig config;
  std::vector<NamedTensor> parameters;
  std::optional<OptimizerState> optimizer;  // moments ordered like `parameters`
  std::size_t epoch = 0;                    // completed epochs
  std::size_t step = 0;                     // completed optimizer steps
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of a live model (parameters are deep-copied).
Checkpoint make_checkpoint(const Romae& model, const OptimizerState* opt, std::size_t epoch, std::size_t step);

/// Rebuilds a model from a checkpoint. Throws CheckpointError listing every
/// missing or mis-shaped parameter.
Romae restore_model(const Checkpoint& ckpt);

}  // namespace romae
