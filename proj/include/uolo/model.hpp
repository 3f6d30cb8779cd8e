#pragma once

// The joint model: a segmentation network whose feature tensor feeds the
// anchor-grid detection head.

#include <cstdint>
#include <string>
#include <vector>

#include "uolo/dethead.hpp"
#include "uolo/segnet.hpp"

namespace uolo {

struct ModelConfig {
  SegNetConfig segnet;
  AnchorGrid grid;  // grid.S must equal segnet.grid_size()

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Canonical JSON text of the architecture; stored in checkpoints and compared
/// on load.
std::string architecture_json(const ModelConfig& config);
ModelConfig parse_architecture_json(const std::string& text);

struct ModelOutput {
  Tensor soft_mask;  // [B,1,H,W]
  Tensor features;   // [B,N,S,S]
  Tensor raw;        // [B,S,S,A,C+5]
};

class UoloModel {
 public:
  UoloModel(const ModelConfig& config, std::uint64_t seed);

  ModelOutput forward(const Tensor& images, Mode mode);
  SegNetOutput forward_segnet(const Tensor& images, Mode mode) { return segnet_.forward(images, mode); }

  const ModelConfig& config() const { return config_; }
  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> segnet_parameters() const { return segnet_.parameters(); }
  std::vector<NamedTensor> head_parameters() const { return head_.parameters(); }
  std::vector<NamedTensor> buffers() const { return segnet_.buffers(); }

 private:
  ModelConfig config_;
  SegNet segnet_;
  DetHead head_;
};

}  // namespace uolo
