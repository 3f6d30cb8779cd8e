#include "uolo/segnet.hpp"

#include <iostream>
#include <string>

#include "uolo/errors.hpp"

namespace uolo {

void SegNetConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("segnet config: " + what); };
  if (input_size <= 0 || (input_size & (input_size - 1)) != 0) {
    fail("input_size must be a positive power of two, got " + std::to_string(input_size));
  }
  if (in_channels != 1 && in_channels != 3) fail("in_channels must be 1 or 3");
  if (depth < 1) fail("depth must be at least 1");
  if (base_channels < 1) fail("base_channels must be positive");
  if (channel_growth < 1) fail("channel_growth must be positive");
  if (kernel_size < 1 || kernel_size % 2 == 0) fail("kernel_size must be odd and positive");
  if (!(bn_momentum >= 0 && bn_momentum < 1)) fail("bn_momentum must be in [0, 1)");
  if (!(bn_epsilon > 0)) fail("bn_epsilon must be positive");
  if (depth >= 31 || (input_size >> depth) < 2) {
    fail("input_size / 2^depth must be at least 2 (input_size=" + std::to_string(input_size) +
         ", depth=" + std::to_string(depth) + ")");
  }
}

int SegNetConfig::grid_size() const { return input_size >> depth; }

int SegNetConfig::stage_channels(int stage) const {
  int c = base_channels;
  for (int s = 0; s < stage; ++s) c *= channel_growth;
  return c;
}

int SegNetConfig::feature_channels() const {
  int n = stage_channels(depth);
  for (int s = 0; s < depth; ++s) n += stage_channels(s);
  return n;
}

Tensor SegNet::ConvBlock::forward(const Tensor& x, Mode mode) {
  return relu(bn.forward(conv.forward(x), mode));
}

Tensor SegNet::UpBlock::forward(const Tensor& x, Mode mode) {
  return relu(bn.forward(up.forward(x), mode));
}

SegNet::SegNet(const SegNetConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto k = static_cast<std::size_t>(config_.kernel_size);
  const std::size_t pad = k / 2;
  auto norm = [&](std::size_t channels) {
    return BatchNorm2d::create(channels, config_.bn_momentum, config_.bn_epsilon);
  };
  auto block = [&](std::size_t in, std::size_t out, std::size_t stride) {
    return ConvBlock{Conv2d::create(in, out, k, stride, pad, rng), norm(out)};
  };
  auto stage = [&](std::size_t in, std::size_t out) {
    Stage s;
    s.first = block(in, out, 1);
    s.second = block(out, out, 1);
    return s;
  };

  const int depth = config_.depth;
  std::size_t in = static_cast<std::size_t>(config_.in_channels);
  for (int s = 0; s < depth; ++s) {
    const auto c = static_cast<std::size_t>(config_.stage_channels(s));
    encoder_.push_back(stage(in, c));
    down_.push_back(block(c, static_cast<std::size_t>(config_.stage_channels(s + 1)), 2));
    in = static_cast<std::size_t>(config_.stage_channels(s + 1));
  }
  bottleneck_ = stage(in, in);
  up_.resize(static_cast<std::size_t>(depth));
  decoder_.resize(static_cast<std::size_t>(depth));
  for (int s = depth - 1; s >= 0; --s) {
    const auto c = static_cast<std::size_t>(config_.stage_channels(s));
    const auto below = static_cast<std::size_t>(config_.stage_channels(s + 1));
    up_[static_cast<std::size_t>(s)] =
        UpBlock{ConvTranspose2d::create(below, c, 2, rng), norm(c)};
    decoder_[static_cast<std::size_t>(s)] = stage(2 * c, c);
  }
  output_ = Conv2d::create(static_cast<std::size_t>(config_.stage_channels(0)), 1, 1, 1, 0, rng);
}

SegNetOutput SegNet::forward(const Tensor& images, Mode mode) {
  const auto size = static_cast<std::size_t>(config_.input_size);
  if (images.rank() != 4 || images.dim(1) != static_cast<std::size_t>(config_.in_channels) ||
      images.dim(2) != size || images.dim(3) != size) {
    throw ConfigError("segnet: expected images [B," + std::to_string(config_.in_channels) + "," +
                      std::to_string(size) + "," + std::to_string(size) + "], got " +
                      shape_to_string(images.shape()));
  }
  std::vector<Tensor> skips;
  Tensor x = images;
  for (std::size_t s = 0; s < encoder_.size(); ++s) {
    x = encoder_[s].second.forward(encoder_[s].first.forward(x, mode), mode);
    skips.push_back(x);
    x = down_[s].forward(x, mode);
  }
  x = bottleneck_.second.forward(bottleneck_.first.forward(x, mode), mode);

  const auto grid = static_cast<std::size_t>(config_.grid_size());
  std::vector<Tensor> taps{x};
  for (std::size_t s = decoder_.size(); s-- > 0;) {
    Tensor up = up_[s].forward(x, mode);
    Tensor merged = concat({up, skips[s]}, 1);
    x = decoder_[s].second.forward(decoder_[s].first.forward(merged, mode), mode);
    taps.push_back(x.dim(2) == grid ? x : spatial_downsample(x, grid, grid));
  }
  return {sigmoid(output_.forward(x)), concat(taps, 1)};
}

std::vector<NamedTensor> SegNet::parameters() const {
  std::vector<NamedTensor> out;
  auto add_block = [&](const std::string& name, const ConvBlock& b) {
    b.conv.collect(name + ".conv", out);
    b.bn.collect(name + ".bn", out);
  };
  auto add_stage = [&](const std::string& name, const Stage& s) {
    add_block(name + ".block1", s.first);
    add_block(name + ".block2", s.second);
  };
  for (std::size_t s = 0; s < encoder_.size(); ++s) {
    add_stage("enc" + std::to_string(s), encoder_[s]);
    add_block("down" + std::to_string(s), down_[s]);
  }
  add_stage("bottleneck", bottleneck_);
  for (std::size_t s = decoder_.size(); s-- > 0;) {
    up_[s].up.collect("up" + std::to_string(s) + ".deconv", out);
    up_[s].bn.collect("up" + std::to_string(s) + ".bn", out);
    add_stage("dec" + std::to_string(s), decoder_[s]);
  }
  output_.collect("mask_out", out);
  return out;
}

std::vector<NamedTensor> SegNet::buffers() const {
  std::vector<NamedTensor> out;
  auto add_stage = [&](const std::string& name, const Stage& s) {
    s.first.bn.collect_buffers(name + ".block1.bn", out);
    s.second.bn.collect_buffers(name + ".block2.bn", out);
  };
  for (std::size_t s = 0; s < encoder_.size(); ++s) {
    add_stage("enc" + std::to_string(s), encoder_[s]);
    down_[s].bn.collect_buffers("down" + std::to_string(s) + ".bn", out);
  }
  add_stage("bottleneck", bottleneck_);
  for (std::size_t s = decoder_.size(); s-- > 0;) {
    up_[s].bn.collect_buffers("up" + std::to_string(s) + ".bn", out);
    add_stage("dec" + std::to_string(s), decoder_[s]);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void check_masks(const Tensor& soft_mask, const Tensor& gt_mask) {
  if (soft_mask.shape() != gt_mask.shape()) {
    throw ConfigError("seg_loss: prediction " + shape_to_string(soft_mask.shape()) +
                      " and truth " + shape_to_string(gt_mask.shape()) + " differ");
  }
  if (soft_mask.rank() < 2) throw ConfigError("seg_loss: expected a leading batch axis");
  for (double v : gt_mask.data()) {
    if (v != 0.0 && v != 1.0) throw ConfigError("seg_loss: ground-truth mask is not binary");
  }
}

}  // namespace

Tensor seg_loss(const Tensor& soft_mask, const Tensor& gt_mask, const std::vector<bool>& has_mask) {
  check_masks(soft_mask, gt_mask);
  const std::size_t batch = soft_mask.dim(0);
  if (has_mask.size() != batch) throw ConfigError("seg_loss: has_mask length differs from batch");
  std::size_t annotated = 0;
  for (bool h : has_mask) annotated += h ? 1 : 0;
  if (annotated == 0) return Tensor::scalar(0.0);

  const std::size_t per_image = soft_mask.numel() / batch;
  const Tensor p = reshape(soft_mask, {batch, per_image});
  const Tensor t = reshape(gt_mask, {batch, per_image});
  const Tensor inter = sum(p * t, 1);
  const Tensor uni = sum(p + t, 1) - inter;

  // Both-empty images get ratio (0 + 1) / (0 + 1) = 1.
  std::vector<double> guard(batch, 0.0), weight(batch, 0.0);
  const auto ud = uni.data();
  for (std::size_t b = 0; b < batch; ++b) {
    if (ud[b] == 0.0) {
      guard[b] = 1.0;
      if (has_mask[b]) std::cerr << "warning: seg_loss: empty truth and prediction in image " << b << "\n";
    }
    if (has_mask[b]) weight[b] = 1.0 / static_cast<double>(annotated);
  }
  const Tensor g = Tensor::from_data({batch}, guard);
  const Tensor ratio = (inter + g) / (uni + g);
  const Tensor per_loss = add_scalar(neg(ratio), 1.0);
  return sum(per_loss * Tensor::from_data({batch}, weight));
}

Tensor seg_loss(const Tensor& soft_mask, const Tensor& gt_mask) {
  if (soft_mask.rank() < 2) throw ConfigError("seg_loss: expected a leading batch axis");
  return seg_loss(soft_mask, gt_mask, std::vector<bool>(soft_mask.dim(0), true));
}

}  // namespace uolo
