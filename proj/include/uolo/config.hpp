#pragma once

// Run configuration: one JSON document with a default for every field.
//
// Layout: {"seed", "model": {...}, "train": {...}, "data": {...}}. Unknown keys
// and type mismatches are configuration errors. Overrides use dotted paths,
// e.g. "train.max_steps=50"; the value is parsed as JSON when possible and
// taken as a string otherwise.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uolo/data.hpp"
#include "uolo/model.hpp"
#include "uolo/trainer.hpp"

namespace uolo {

struct RunConfig {
  std::uint64_t seed = 0;
  /// grid.priors empty means "fit by k-means on the training boxes".
  ModelConfig model;
  TrainConfig train;
  SceneSpec scene;
  int count = 8;              // samples written by gen-data
  double mask_fraction = 1.0;  // share of generated samples keeping their mask
  bool fov_crop = false;       // Otsu field-of-view crop + resize on load

  /// Copies the shared seed into the per-module seeds and checks ranges.
  void finalize();
};

RunConfig default_run_config();
std::string to_json_text(const RunConfig& config);

/// base: the file contents (may be empty for defaults); overrides applied in order.
RunConfig parse_run_config(const std::string& base_json, const std::vector<std::string>& overrides);
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

}  // namespace uolo
