#pragma once

// Segmentation overlap and detection distance metrics.
//
// Distances are in pixels of the (preprocessed) network input grid.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "uolo/image.hpp"

namespace uolo {

/// pixel >= threshold -> 1.
Mask binarize(const std::vector<double>& soft_mask, int width, int height, double threshold = 0.5);

struct Overlap {
  double iou = 0;
  double dice = 0;
  bool both_empty = false;  // scored as perfect agreement
};

/// IoU = |P & G| / |P | G|, Dice = 2|P & G| / (|P| + |G|). Two empty masks
/// score 1 on both.
Overlap overlap_metrics(const Mask& pred, const Mask& gt);

/// Radius of the circle with the mask's area.
double od_radius_from_mask(const Mask& gt_od_mask);

struct DetectionScore {
  bool predicted = false;     // a box was available for this class
  double ed = 0;              // euclidean centre distance, px
  double dbar = 0;            // ed / od radius
  bool hit = false;           // ed <= od radius
};

struct Point {
  double x = 0;
  double y = 0;
};

/// A missing prediction is a miss with undefined distance.
DetectionScore detection_metrics(const std::optional<Point>& pred_center, const Point& gt_center,
                                 double od_radius_px);

struct SampleEval {
  std::string id;
  std::optional<Overlap> overlap;                       // when a GT mask exists
  std::vector<std::optional<DetectionScore>> detection;  // per class, when a GT box exists
  double od_radius = 0;
};

struct ClassSummary {
  std::size_t evaluated = 0;  // samples with GT for the class
  std::size_t hits = 0;
  std::size_t with_distance = 0;
  double mean_ed = 0;
  double mean_dbar = 0;
  double s1r = 0;  // percent
};

struct EvalReport {
  int input_size = 0;
  std::vector<SampleEval> samples;
  std::size_t masks_evaluated = 0;
  double mean_iou = 0;
  double mean_dice = 0;
  std::vector<ClassSummary> classes;

  /// Recomputes the aggregates from the per-sample records.
  void summarize(int num_classes);
  /// Fixed columns; one row per sample and a final "MEAN" row. Values use the
  /// shortest round-trip decimal form; undefined values are empty.
  void write_csv(std::ostream& out) const;
};

}  // namespace uolo
