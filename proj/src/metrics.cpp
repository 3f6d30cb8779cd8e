#include "uolo/metrics.hpp"

#include <cmath>
#include <numbers>
#include <ostream>

#include "uolo/data.hpp"
#include "uolo/errors.hpp"
#include "uolo/format.hpp"

namespace uolo {

Mask binarize(const std::vector<double>& soft_mask, int width, int height, double threshold) {
  if (soft_mask.size() != static_cast<std::size_t>(width) * height) {
    throw ConfigError("binarize: mask size does not match dimensions");
  }
  Mask m(width, height);
  for (std::size_t i = 0; i < soft_mask.size(); ++i) m.bits[i] = soft_mask[i] >= threshold ? 1 : 0;
  return m;
}

Overlap overlap_metrics(const Mask& pred, const Mask& gt) {
  if (pred.width != gt.width || pred.height != gt.height) {
    throw ConfigError("overlap_metrics: mask sizes differ");
  }
  std::size_t inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    if (pred.bits[i] > 1 || gt.bits[i] > 1) throw UsageError("overlap_metrics: masks must be binary");
    p += pred.bits[i];
    g += gt.bits[i];
    inter += pred.bits[i] & gt.bits[i];
  }
  if (p == 0 && g == 0) return {1.0, 1.0, true};
  const std::size_t uni = p + g - inter;
  return {static_cast<double>(inter) / static_cast<double>(uni),
          2.0 * static_cast<double>(inter) / static_cast<double>(p + g), false};
}

double od_radius_from_mask(const Mask& gt_od_mask) {
  const std::size_t area = gt_od_mask.count();
  if (area == 0) throw DataError("od_radius_from_mask: empty mask");
  return std::sqrt(static_cast<double>(area) / std::numbers::pi);
}

DetectionScore detection_metrics(const std::optional<Point>& pred_center, const Point& gt_center,
                                 double od_radius_px) {
  if (!(od_radius_px > 0)) throw ConfigError("detection_metrics: OD radius must be positive");
  DetectionScore s;
  if (!pred_center) return s;
  s.predicted = true;
  s.ed = std::hypot(pred_center->x - gt_center.x, pred_center->y - gt_center.y);
  s.dbar = s.ed / od_radius_px;
  s.hit = s.ed <= od_radius_px;
  return s;
}

void EvalReport::summarize(int num_classes) {
  masks_evaluated = 0;
  double iou = 0, dice = 0;
  classes.assign(static_cast<std::size_t>(num_classes), ClassSummary{});
  for (const SampleEval& s : samples) {
    if (s.overlap) {
      ++masks_evaluated;
      iou += s.overlap->iou;
      dice += s.overlap->dice;
    }
    for (std::size_t c = 0; c < s.detection.size() && c < classes.size(); ++c) {
      if (!s.detection[c]) continue;
      ClassSummary& cs = classes[c];
      ++cs.evaluated;
      if (s.detection[c]->hit) ++cs.hits;
      if (s.detection[c]->predicted) {
        ++cs.with_distance;
        cs.mean_ed += s.detection[c]->ed;
        cs.mean_dbar += s.detection[c]->dbar;
      }
    }
  }
  mean_iou = masks_evaluated ? iou / static_cast<double>(masks_evaluated) : 0.0;
  mean_dice = masks_evaluated ? dice / static_cast<double>(masks_evaluated) : 0.0;
  for (ClassSummary& cs : classes) {
    if (cs.with_distance) {
      cs.mean_ed /= static_cast<double>(cs.with_distance);
      cs.mean_dbar /= static_cast<double>(cs.with_distance);
    }
    cs.s1r = cs.evaluated ? 100.0 * static_cast<double>(cs.hits) / static_cast<double>(cs.evaluated) : 0.0;
  }
}

void EvalReport::write_csv(std::ostream& out) const {
  out << "# distances in pixels of the " << input_size << "x" << input_size << " network input grid\n";
  out << "id,iou,dice,both_empty";
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const std::string n = class_name(static_cast<int>(c));
    out << ',' << n << "_ed," << n << "_dbar," << n << "_hit";
  }
  out << ",od_radius\n";
  for (const SampleEval& s : samples) {
    out << s.id << ',';
    if (s.overlap) {
      out << format_number(s.overlap->iou) << ',' << format_number(s.overlap->dice) << ',' << (s.overlap->both_empty ? 1 : 0);
    } else {
      out << ",,";
    }
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const bool have = c < s.detection.size() && s.detection[c].has_value();
      if (have && s.detection[c]->predicted) {
        out << ',' << format_number(s.detection[c]->ed) << ',' << format_number(s.detection[c]->dbar) << ','
            << (s.detection[c]->hit ? 1 : 0);
      } else if (have) {
        out << ",,,0";
      } else {
        out << ",,,";
      }
    }
    out << ',' << format_number(s.od_radius) << '\n';
  }
  out << "MEAN," << format_number(mean_iou) << ',' << format_number(mean_dice) << ',';
  for (const ClassSummary& cs : classes) {
    out << ',' << format_number(cs.mean_ed) << ',' << format_number(cs.mean_dbar) << ',' << format_number(cs.s1r);
  }
  out << ",\n";
}

}  // namespace uolo
