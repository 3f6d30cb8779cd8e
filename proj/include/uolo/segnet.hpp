#pragma once

// Encoder-decoder segmentation network with batch norm after every
// convolution and stride-2 convolutions in place of pooling. Besides the soft
// mask it exposes a multi-scale feature tensor: the bottleneck concatenated
// with every decoder stage output, average-pooled down to the bottleneck
// resolution.

#include <cstdint>
#include <vector>

#include "uolo/layers.hpp"
#include "uolo/tensor.hpp"

namespace uolo {

struct SegNetConfig {
  int input_size = 64;      // power of two
  int in_channels = 1;      // 1 (gray) or 3 (RGB)
  int depth = 3;            // downsampling stages
  int base_channels = 8;
  int channel_growth = 2;
  int kernel_size = 3;      // odd
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;

  void validate() const;
  /// Spatial extent S of the feature tensor: input_size / 2^depth.
  int grid_size() const;
  /// Channels of encoder/decoder stage s; stage == depth is the bottleneck.
  int stage_channels(int stage) const;
  /// Channel count N of the feature tensor: bottleneck plus every decoder stage.
  int feature_channels() const;

  bool operator==(const SegNetConfig&) const = default;
};

struct SegNetOutput {
  Tensor soft_mask;  // [B,1,H,W], sigmoid output
  Tensor features;   // [B,N,S,S]
};

class SegNet {
 public:
  SegNet(const SegNetConfig& config, std::uint64_t seed);

  /// Train mode uses batch statistics and updates the running statistics.
  SegNetOutput forward(const Tensor& images, Mode mode);

  const SegNetConfig& config() const { return config_; }
  std::vector<NamedTensor> parameters() const;
  /// Batch-norm running statistics.
  std::vector<NamedTensor> buffers() const;

 private:
  struct ConvBlock {  // conv -> batch norm -> relu
    Conv2d conv;
    BatchNorm2d bn;
    Tensor forward(const Tensor& x, Mode mode);
  };
  struct UpBlock {  // transposed conv -> batch norm -> relu
    ConvTranspose2d up;
    BatchNorm2d bn;
    Tensor forward(const Tensor& x, Mode mode);
  };
  struct Stage {
    ConvBlock first;
    ConvBlock second;
  };

  SegNetConfig config_;
  std::vector<Stage> encoder_;      // depth stages at full .. 1/2^(depth-1) resolution
  std::vector<ConvBlock> down_;     // stride-2 convs after each encoder stage
  Stage bottleneck_;
  std::vector<UpBlock> up_;         // up_[s] brings stage s+1 to stage s
  std::vector<Stage> decoder_;      // decoder_[s] consumes concat(up, skip s)
  Conv2d output_;                   // 1x1 to one channel
};

/// Soft-IoU loss 1 - sum(t*p) / (sum(t + p) - sum(t*p)), evaluated per image
/// over a [B,...] batch and averaged over images. An image whose truth and
/// prediction are both identically zero scores loss 0 (a warning is logged).
Tensor seg_loss(const Tensor& soft_mask, const Tensor& gt_mask);

/// As above, but only images with has_mask[b] set contribute; the result is the
/// mean over those images, or a constant 0 when none has a mask.
Tensor seg_loss(const Tensor& soft_mask, const Tensor& gt_mask, const std::vector<bool>& has_mask);

}  // namespace uolo
