#pragma once

// Anchor-grid detection head.
//
// The raw prediction Y has shape [B,S,S,A,C+5]; the last axis holds
// [x, y, w, h, confidence, class logits...] in raw (pre-activation) space.
// Box geometry is expressed in grid-cell units: cell (row i, col j) spans
// [j, j+1) x [i, i+1). Multiply by input_size / S to get pixels.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "uolo/layers.hpp"
#include "uolo/tensor.hpp"

namespace uolo {

struct AnchorPrior {
  double w = 1.0;  // grid units
  double h = 1.0;
  bool operator==(const AnchorPrior&) const = default;
};

struct AnchorGrid {
  int S = 8;
  int A = 2;
  int C = 2;
  std::vector<AnchorPrior> priors;

  void validate() const;
  int channels() const { return A * (C + 5); }
  bool operator==(const AnchorGrid&) const = default;
};

/// Offsets into the last axis of Y.
enum RawField : std::size_t { kX = 0, kY = 1, kW = 2, kH = 3, kConf = 4, kLogits = 5 };

struct DecodedBox {
  int row = 0;     // source cell
  int col = 0;
  int anchor = 0;
  double bx = 0, by = 0, bw = 0, bh = 0;  // grid units
  double confidence = 0;
  std::vector<double> class_probs;
  int class_id = -1;   // set by select_best
  double score = 0;    // confidence * class_prob, set by select_best
};

struct RawBox {
  double x = 0, y = 0, w = 0, h = 0;
};

/// Decodes a single anchor slot.
DecodedBox decode_one(const RawBox& raw, double conf_logit, std::span<const double> logits, int row,
                      int col, const AnchorPrior& prior);
/// Inverse of the geometric part of decode_one: raw values reproducing a box.
RawBox encode_box(double bx, double by, double bw, double bh, int row, int col,
                  const AnchorPrior& prior);

/// Decodes every anchor slot of every image: result[b] has S*S*A boxes in
/// (row, col, anchor) order.
std::vector<std::vector<DecodedBox>> decode(const Tensor& raw, const AnchorGrid& grid);

/// Per class, the box maximizing confidence * class_prob. Ties go to the
/// lowest (row, col, anchor). Returns at most C boxes, ordered by class.
std::vector<DecodedBox> select_best(const std::vector<DecodedBox>& boxes, int num_classes);

class DetHead {
 public:
  DetHead(int in_channels, const AnchorGrid& grid, std::uint64_t seed);

  /// features [B,N,S,S] -> Y [B,S,S,A,C+5] via one 1x1 convolution.
  Tensor forward(const Tensor& features) const;

  const AnchorGrid& grid() const { return grid_; }
  int in_channels() const { return in_channels_; }
  std::vector<NamedTensor> parameters() const;

 private:
  AnchorGrid grid_;
  int in_channels_;
  Conv2d conv_;
};

/// Ground-truth box in pixels.
struct GtBox {
  int class_id = 0;
  double cx = 0, cy = 0;
  double w = 0, h = 0;
};

struct DetectionTarget {
  std::size_t batch = 0;
  AnchorGrid grid;
  // One entry per (b, i, j, k) slot in Y order.
  std::vector<double> responsible;
  std::vector<RawBox> raw;         // exact decode preimage of the box
  std::vector<double> cell_x;      // sigma-space centre targets: b_x - j
  std::vector<double> cell_y;
  std::vector<int> class_id;       // -1 where not responsible
  std::size_t responsible_count = 0;

  std::size_t slot(std::size_t b, std::size_t i, std::size_t j, std::size_t k) const;
};

/// Responsible cell = cell containing the box centre; responsible anchor = the
/// prior with the highest co-centred IoU. Centres on a cell border are nudged
/// 1e-9 cells inward so that the raw preimage exists.
DetectionTarget assign_targets(const std::vector<std::vector<GtBox>>& boxes, const AnchorGrid& grid,
                               int input_size);

struct DetLossWeights {
  double centers = 5.0;
  double dimensions = 5.0;
  double confidence = 1.0;
  double classes = 1.0;
  double no_object = 0.5;  // scales the confidence penalty on non-responsible slots
};

struct DetLoss {
  Tensor total;
  double centers = 0;
  double dimensions = 0;
  double confidence = 0;
  double classes = 0;
};

/// Weighted sum of
///   centers:    mean over responsible slots of (s(x)-tx)^2 + (s(y)-ty)^2
///   dimensions: mean over responsible slots of (w-tw)^2 + (h-th)^2
///   confidence: mean over responsible slots of (s(c)-1)^2
///               + no_object * mean over the other slots of s(c)^2
///   classes:    mean over responsible slots of the softmax cross-entropy
/// where s is the logistic sigmoid. The unweighted terms are reported.
DetLoss det_loss(const Tensor& raw, const DetectionTarget& target, const DetLossWeights& weights);

/// Co-centred IoU of two box shapes.
double shape_iou(double w1, double h1, double w2, double h2);

/// k-means over box shapes with 1 - IoU distance. Deterministic: centroids
/// start at evenly spaced area quantiles. Result sorted by area.
std::vector<AnchorPrior> kmeans_anchors(const std::vector<AnchorPrior>& shapes, int k,
                                        int max_iterations = 100);

}  // namespace uolo
