#pragma once

// Synthetic fundus-like scenes, field-of-view preprocessing, augmentation,
// dataset files and cyclic batch streams.
//
// Coordinates are continuous pixel coordinates: pixel (x, y) covers
// [x, x+1) x [y, y+1), so its centre is (x + 0.5, y + 0.5).

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "uolo/dethead.hpp"
#include "uolo/image.hpp"
#include "uolo/tensor.hpp"

namespace uolo {

enum ObjectClass : int { kOpticDisc = 0, kFovea = 1 };
inline constexpr int kNumObjectClasses = 2;
const char* class_name(int class_id);

/// Square ground-truth box.
struct Box {
  int class_id = 0;
  double cx = 0;
  double cy = 0;
  double side = 0;
  bool operator==(const Box&) const = default;
};

struct Sample {
  std::string id;
  Image image;
  std::optional<Mask> mask;     // optic-disc segmentation, when annotated
  std::vector<Box> boxes;
  std::string provenance;
  std::optional<double> od_radius;  // overrides the mask-derived radius

  const Box* find_box(int class_id) const;
};

struct SceneSpec {
  int image_size = 64;
  int channels = 1;
  double disc_radius_min = 7.5;
  double disc_radius_max = 8.5;
  double disc_intensity = 0.85;
  double spot_radius_min = 3.0;
  double spot_radius_max = 4.0;
  double spot_intensity = 0.18;
  int distractor_count = 3;
  double distractor_radius_min = 1.5;
  double distractor_radius_max = 2.5;
  double distractor_intensity = 0.65;
  double background_level = 0.45;
  double texture_amplitude = 0.08;
  double noise_amplitude = 0.02;
  /// Black frame around the content; when positive the generated image is
  /// (image_size + 2*border) wide, mimicking a camera field of view.
  int border = 0;
  /// Box sides at the reference resolution, scaled by image_size / reference.
  double od_box_side_ref = 64.0;
  double fv_box_side_ref = 32.0;
  int reference_size = 256;
  /// Keep centres at least this fraction of the image side plus half a box
  /// away from the edges so that augmentation shifts keep boxes inside.
  double placement_margin_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  double od_box_side() const { return image_size * od_box_side_ref / reference_size; }
  double fv_box_side() const { return image_size * fv_box_side_ref / reference_size; }
};

/// n samples, each with a bright disc (optic disc, masked), a dark spot
/// (fovea, box only) and distractor blobs. Pixel values are quantized to the
/// 8-bit grid so that a disk round trip is lossless.
std::vector<Sample> generate(const SceneSpec& spec, int n);

/// Drops the masks of every sample after the first `count`.
void retain_masks(std::vector<Sample>& samples, std::size_t count);

/// Threshold t maximizing the between-class variance of the 256-bin
/// histogram; foreground is value >= t, so t is in [1, 255]. Ties resolve to
/// the smallest t.
int otsu_threshold(std::span<const std::uint8_t> gray);

/// Crops to the bounding box of the Otsu foreground and resizes to
/// target_size x target_size (bilinear for the image, nearest for the mask).
/// Box centres follow the same affine map; sides scale by the mean of the two
/// axis scales.
Sample crop_and_resize(const Sample& sample, int target_size);

struct AugmentConfig {
  bool flip = true;
  bool translate = true;
  double max_shift_fraction = 0.1;
};

/// Flip (about the image centre) followed by an integer shift. Pixels shifted
/// in from outside are 0.
struct Transform {
  bool flip_x = false;
  bool flip_y = false;
  int dx = 0;
  int dy = 0;
};

Transform random_transform(const AugmentConfig& config, int image_size, std::mt19937_64& rng);
/// Box centres are clamped to [0.5, size - 0.5] after the transform.
Sample apply_transform(const Sample& sample, const Transform& t);
Sample augment(const Sample& sample, const AugmentConfig& config, std::mt19937_64& rng);

// ---- dataset files ----

/// Writes images/<id>.pgm|ppm, masks/<id>.pgm and manifest.tsv.
void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);
std::vector<Sample> read_dataset(const std::filesystem::path& dir);

// ---- batches ----

struct Batch {
  Tensor images;                           // [B,C,H,W]
  Tensor masks;                            // [B,1,H,W], zeros where absent
  std::vector<bool> has_mask;
  std::vector<std::vector<GtBox>> boxes;
  std::vector<std::size_t> sample_indices;
};

Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices);
/// Batch built from already materialized samples (e.g. augmented copies).
Batch make_batch(const std::vector<Sample>& samples);

struct StreamConfig {
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  bool augment = false;
  AugmentConfig augmentation;
};

/// Endless stream over a fixed member list. Position p (counted in samples)
/// maps to member perm_e[p mod period] with e = p / period and perm_e a
/// permutation seeded by (seed, stream id, e); augmentation draws are seeded
/// by (seed, stream id, p). A batch is therefore a pure function of its index.
class BatchStream {
 public:
  BatchStream(std::shared_ptr<const std::vector<Sample>> dataset, std::vector<std::size_t> members,
              std::uint64_t stream_id, const StreamConfig& config);

  Batch next();
  std::uint64_t consumed() const { return consumed_; }
  void seek(std::uint64_t batches) { consumed_ = batches; }
  std::size_t period() const { return members_.size(); }
  std::size_t member_at(std::uint64_t position);

 private:
  std::shared_ptr<const std::vector<Sample>> dataset_;
  std::vector<std::size_t> members_;
  std::uint64_t stream_id_;
  StreamConfig config_;
  std::uint64_t consumed_ = 0;
  std::uint64_t cached_epoch_ = ~std::uint64_t{0};
  std::vector<std::size_t> permutation_;
};

struct Streams {
  BatchStream detection;
  BatchStream segmentation;
};

/// detection cycles over box-annotated samples, segmentation over masked
/// ones. A stream that is required (want_* set) but would be empty is a
/// configuration error; an unrequired empty stream cycles over nothing and
/// must not be read.
Streams make_streams(std::shared_ptr<const std::vector<Sample>> dataset, const StreamConfig& config,
                     bool want_detection, bool want_segmentation);
/// As above, restricted to the listed dataset indices.
Streams make_streams(std::shared_ptr<const std::vector<Sample>> dataset,
                     std::span<const std::size_t> members, const StreamConfig& config,
                     bool want_detection, bool want_segmentation);

/// Splits indices into (train, validation), stratified by whether the sample
/// has a mask. round(fraction * group size) of each group goes to validation.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_dataset(
    const std::vector<Sample>& samples, double validation_fraction, std::uint64_t seed);

}  // namespace uolo
