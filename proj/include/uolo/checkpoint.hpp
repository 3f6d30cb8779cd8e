#pragma once

// Binary checkpoint, little-endian:
//   "UOLOCKPT" | u32 version
//   u64 length + architecture JSON
//   u64 count, then per record: u32 name length + name, u32 rank,
//       u64 extents..., f64 payload          (parameters, then BN buffers)
//   u64 count, then per optimizer record: u32 name length + name, u64 t,
//       u64 length, f64 m..., f64 v...
//   trainer counters: u64 step, u64 det batches, u64 seg batches,
//       f64 L_U-Net, f64 L_YOLO, u8 has best score, f64 best score

#include <filesystem>

#include "uolo/model.hpp"
#include "uolo/trainer.hpp"

namespace uolo {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Written to a temporary file and renamed into place; on failure the partial
/// file is removed and DataError is thrown.
void save_checkpoint(const std::filesystem::path& path, const UoloModel& model,
                     const AdamState& optimizer, const TrainerCounters& counters);

struct CheckpointContents {
  ModelConfig architecture;
  AdamState optimizer;
  TrainerCounters counters;
};

/// Architecture stored in a checkpoint, without loading any weights.
ModelConfig read_checkpoint_architecture(const std::filesystem::path& path);

/// Loads weights into model. A different architecture is a ConfigError.
CheckpointContents load_checkpoint(const std::filesystem::path& path, UoloModel& model);

}  // namespace uolo
