#include "uolo/dethead.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "uolo/errors.hpp"

namespace uolo {

namespace {

// Keeps decoded centres strictly inside their cell in floating point.
constexpr double kCellMargin = 1e-12;

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

void AnchorGrid::validate() const {
  if (S < 1) throw ConfigError("anchor grid: S must be positive");
  if (A < 1) throw ConfigError("anchor grid: at least one anchor is required");
  if (C < 1) throw ConfigError("anchor grid: at least one class is required");
  if (priors.size() != static_cast<std::size_t>(A)) {
    throw ConfigError("anchor grid: expected " + std::to_string(A) + " priors, got " +
                      std::to_string(priors.size()));
  }
  for (const AnchorPrior& p : priors) {
    if (!(p.w > 0) || !(p.h > 0)) throw ConfigError("anchor grid: priors must be positive");
  }
}

DecodedBox decode_one(const RawBox& raw, double conf_logit, std::span<const double> logits, int row,
                      int col, const AnchorPrior& prior) {
  DecodedBox box;
  box.row = row;
  box.col = col;
  box.bx = col + std::clamp(logistic(raw.x), kCellMargin, 1.0 - kCellMargin);
  box.by = row + std::clamp(logistic(raw.y), kCellMargin, 1.0 - kCellMargin);
  box.bw = prior.w * std::exp(raw.w);
  box.bh = prior.h * std::exp(raw.h);
  box.confidence = logistic(conf_logit);
  const double m = logits.empty() ? 0.0 : *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  box.class_probs.resize(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) {
    box.class_probs[c] = std::exp(logits[c] - m);
    z += box.class_probs[c];
  }
  for (double& p : box.class_probs) p /= z;
  return box;
}

RawBox encode_box(double bx, double by, double bw, double bh, int row, int col,
                  const AnchorPrior& prior) {
  const double fx = bx - col;
  const double fy = by - row;
  return {std::log(fx / (1.0 - fx)), std::log(fy / (1.0 - fy)), std::log(bw / prior.w),
          std::log(bh / prior.h)};
}

std::vector<std::vector<DecodedBox>> decode(const Tensor& raw, const AnchorGrid& grid) {
  grid.validate();
  const auto S = static_cast<std::size_t>(grid.S), A = static_cast<std::size_t>(grid.A);
  const std::size_t D = static_cast<std::size_t>(grid.C) + 5;
  if (raw.rank() != 5 || raw.dim(1) != S || raw.dim(2) != S || raw.dim(3) != A || raw.dim(4) != D) {
    throw ConfigError("decode: prediction " + shape_to_string(raw.shape()) +
                      " does not match the anchor grid");
  }
  const auto data = raw.data();
  std::vector<std::vector<DecodedBox>> result(raw.dim(0));
  for (std::size_t b = 0; b < raw.dim(0); ++b) {
    result[b].reserve(S * S * A);
    for (std::size_t i = 0; i < S; ++i) {
      for (std::size_t j = 0; j < S; ++j) {
        for (std::size_t k = 0; k < A; ++k) {
          const double* v = data.data() + (((b * S + i) * S + j) * A + k) * D;
          DecodedBox box = decode_one({v[kX], v[kY], v[kW], v[kH]}, v[kConf],
                                      std::span<const double>(v + kLogits, D - kLogits),
                                      static_cast<int>(i), static_cast<int>(j), grid.priors[k]);
          box.anchor = static_cast<int>(k);
          result[b].push_back(std::move(box));
        }
      }
    }
  }
  return result;
}

std::vector<DecodedBox> select_best(const std::vector<DecodedBox>& boxes, int num_classes) {
  std::vector<const DecodedBox*> order;
  order.reserve(boxes.size());
  for (const DecodedBox& b : boxes) order.push_back(&b);
  std::sort(order.begin(), order.end(), [](const DecodedBox* l, const DecodedBox* r) {
    return std::tie(l->row, l->col, l->anchor) < std::tie(r->row, r->col, r->anchor);
  });
  std::vector<DecodedBox> best;
  for (int c = 0; c < num_classes; ++c) {
    const DecodedBox* pick = nullptr;
    double pick_score = -1.0;
    for (const DecodedBox* b : order) {
      if (static_cast<std::size_t>(c) >= b->class_probs.size()) continue;
      const double score = b->confidence * b->class_probs[static_cast<std::size_t>(c)];
      if (score > pick_score) {
        pick = b;
        pick_score = score;
      }
    }
    if (pick == nullptr) continue;
    DecodedBox chosen = *pick;
    chosen.class_id = c;
    chosen.score = pick_score;
    best.push_back(std::move(chosen));
  }
  return best;
}

// ---------------------------------------------------------------------------

DetHead::DetHead(int in_channels, const AnchorGrid& grid, std::uint64_t seed)
    : grid_(grid), in_channels_(in_channels) {
  grid_.validate();
  if (in_channels < 1) throw ConfigError("detection head: in_channels must be positive");
  std::mt19937_64 rng(seed);
  conv_ = Conv2d::create(static_cast<std::size_t>(in_channels),
                         static_cast<std::size_t>(grid_.channels()), 1, 1, 0, rng);
}

Tensor DetHead::forward(const Tensor& features) const {
  const auto S = static_cast<std::size_t>(grid_.S);
  if (features.rank() != 4 || features.dim(1) != static_cast<std::size_t>(in_channels_) ||
      features.dim(2) != S || features.dim(3) != S) {
    throw ConfigError("detection head: expected features [B," + std::to_string(in_channels_) + "," +
                      std::to_string(S) + "," + std::to_string(S) + "], got " +
                      shape_to_string(features.shape()));
  }
  const std::size_t B = features.dim(0);
  const Tensor maps = conv_.forward(features);              // [B, A*(C+5), S, S]
  const Tensor cells = permute(maps, {0, 2, 3, 1});         // [B, S, S, A*(C+5)]
  return reshape(cells, {B, S, S, static_cast<std::size_t>(grid_.A),
                         static_cast<std::size_t>(grid_.C) + 5});
}

std::vector<NamedTensor> DetHead::parameters() const {
  std::vector<NamedTensor> out;
  conv_.collect("head.conv", out);
  return out;
}

// ---------------------------------------------------------------------------

std::size_t DetectionTarget::slot(std::size_t b, std::size_t i, std::size_t j, std::size_t k) const {
  const auto S = static_cast<std::size_t>(grid.S), A = static_cast<std::size_t>(grid.A);
  return ((b * S + i) * S + j) * A + k;
}

double shape_iou(double w1, double h1, double w2, double h2) {
  const double inter = std::min(w1, w2) * std::min(h1, h2);
  return inter / (w1 * h1 + w2 * h2 - inter);
}

DetectionTarget assign_targets(const std::vector<std::vector<GtBox>>& boxes, const AnchorGrid& grid,
                               int input_size) {
  grid.validate();
  if (input_size <= 0) throw ConfigError("assign_targets: input_size must be positive");
  DetectionTarget t;
  t.batch = boxes.size();
  t.grid = grid;
  const std::size_t slots = t.batch * static_cast<std::size_t>(grid.S * grid.S * grid.A);
  t.responsible.assign(slots, 0.0);
  t.raw.assign(slots, RawBox{});
  t.cell_x.assign(slots, 0.0);
  t.cell_y.assign(slots, 0.0);
  t.class_id.assign(slots, -1);
  std::vector<int> owner(slots, -1);

  const double cell_px = static_cast<double>(input_size) / grid.S;
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    for (std::size_t n = 0; n < boxes[b].size(); ++n) {
      const GtBox& g = boxes[b][n];
      if (!(g.cx >= 0 && g.cx <= input_size && g.cy >= 0 && g.cy <= input_size)) {
        throw DataError("assign_targets: box " + std::to_string(n) + " of image " +
                        std::to_string(b) + " has its centre outside the image");
      }
      if (g.class_id < 0 || g.class_id >= grid.C) {
        throw DataError("assign_targets: class id " + std::to_string(g.class_id) +
                        " outside [0," + std::to_string(grid.C) + ")");
      }
      if (!(g.w > 0) || !(g.h > 0)) throw DataError("assign_targets: box sides must be positive");
      const double gx = g.cx / cell_px, gy = g.cy / cell_px;
      const int j = std::clamp(static_cast<int>(std::floor(gx)), 0, grid.S - 1);
      const int i = std::clamp(static_cast<int>(std::floor(gy)), 0, grid.S - 1);
      const double fx = std::clamp(gx - j, 1e-9, 1.0 - 1e-9);
      const double fy = std::clamp(gy - i, 1e-9, 1.0 - 1e-9);
      const double gw = g.w / cell_px, gh = g.h / cell_px;
      int k = 0;
      double best = -1.0;
      for (int a = 0; a < grid.A; ++a) {
        const double iou = shape_iou(gw, gh, grid.priors[static_cast<std::size_t>(a)].w,
                                     grid.priors[static_cast<std::size_t>(a)].h);
        if (iou > best) {
          best = iou;
          k = a;
        }
      }
      const std::size_t s = t.slot(b, static_cast<std::size_t>(i), static_cast<std::size_t>(j),
                                   static_cast<std::size_t>(k));
      if (owner[s] >= 0) {
        throw DataError("assign_targets: boxes " + std::to_string(owner[s]) + " and " +
                        std::to_string(n) + " of image " + std::to_string(b) +
                        " both claim cell (" + std::to_string(i) + "," + std::to_string(j) +
                        ") anchor " + std::to_string(k));
      }
      owner[s] = static_cast<int>(n);
      t.responsible[s] = 1.0;
      t.cell_x[s] = fx;
      t.cell_y[s] = fy;
      t.raw[s] = encode_box(j + fx, i + fy, gw, gh, i, j, grid.priors[static_cast<std::size_t>(k)]);
      t.class_id[s] = g.class_id;
      ++t.responsible_count;
    }
  }
  return t;
}

DetLoss det_loss(const Tensor& raw, const DetectionTarget& target, const DetLossWeights& weights) {
  const AnchorGrid& grid = target.grid;
  const auto S = static_cast<std::size_t>(grid.S), A = static_cast<std::size_t>(grid.A);
  const auto C = static_cast<std::size_t>(grid.C);
  const std::size_t D = C + 5;
  if (raw.rank() != 5 || raw.dim(0) != target.batch || raw.dim(1) != S || raw.dim(2) != S ||
      raw.dim(3) != A || raw.dim(4) != D) {
    throw ConfigError("det_loss: prediction " + shape_to_string(raw.shape()) +
                      " inconsistent with the target layout");
  }
  const std::size_t M = target.batch * S * S * A;
  const std::size_t n_obj = target.responsible_count;
  const std::size_t n_noobj = M - n_obj;

  const Tensor y = reshape(raw, {M, D});
  auto column = [&](std::size_t f) { return slice(y, 1, f, f + 1); };
  auto constant = [&](auto get) {
    std::vector<double> v(M);
    for (std::size_t s = 0; s < M; ++s) v[s] = get(s);
    return Tensor::from_data({M, 1}, std::move(v));
  };
  const Tensor resp = constant([&](std::size_t s) { return target.responsible[s]; });

  DetLoss out;
  Tensor centers = Tensor::scalar(0.0), dims = Tensor::scalar(0.0), classes = Tensor::scalar(0.0);
  Tensor confidence = Tensor::scalar(0.0);
  const Tensor conf = sigmoid(column(kConf));
  if (n_obj > 0) {
    const double inv = 1.0 / static_cast<double>(n_obj);
    const Tensor tx = constant([&](std::size_t s) { return target.cell_x[s]; });
    const Tensor ty = constant([&](std::size_t s) { return target.cell_y[s]; });
    const Tensor tw = constant([&](std::size_t s) { return target.raw[s].w; });
    const Tensor th = constant([&](std::size_t s) { return target.raw[s].h; });
    centers = (sum(resp * square(sigmoid(column(kX)) - tx)) +
               sum(resp * square(sigmoid(column(kY)) - ty))) * inv;
    dims = (sum(resp * square(column(kW) - tw)) + sum(resp * square(column(kH) - th))) * inv;
    confidence = sum(resp * square(conf - 1.0)) * inv;

    std::vector<double> onehot(M * C, 0.0);
    for (std::size_t s = 0; s < M; ++s) {
      if (target.class_id[s] >= 0) onehot[s * C + static_cast<std::size_t>(target.class_id[s])] = 1.0;
    }
    const Tensor logp = log_softmax(slice(y, 1, kLogits, D));
    classes = neg(sum(Tensor::from_data({M, C}, std::move(onehot)) * logp)) * inv;
  }
  if (n_noobj > 0) {
    const Tensor empty = add_scalar(neg(resp), 1.0);
    confidence = confidence +
                 sum(empty * square(conf)) * (weights.no_object / static_cast<double>(n_noobj));
  }

  out.centers = centers.item();
  out.dimensions = dims.item();
  out.confidence = confidence.item();
  out.classes = classes.item();
  out.total = centers * weights.centers + dims * weights.dimensions +
              confidence * weights.confidence + classes * weights.classes;
  return out;
}

std::vector<AnchorPrior> kmeans_anchors(const std::vector<AnchorPrior>& shapes, int k,
                                        int max_iterations) {
  if (k < 1) throw ConfigError("kmeans_anchors: k must be positive");
  if (shapes.empty()) throw DataError("kmeans_anchors: no box shapes to cluster");
  std::vector<AnchorPrior> sorted = shapes;
  std::stable_sort(sorted.begin(), sorted.end(), [](const AnchorPrior& a, const AnchorPrior& b) {
    return a.w * a.h < b.w * b.h;
  });
  const std::size_t n = sorted.size();
  std::vector<AnchorPrior> centroids;
  for (int c = 0; c < k; ++c) {
    const auto idx = static_cast<std::size_t>((c + 0.5) * static_cast<double>(n) / k);
    centroids.push_back(sorted[std::min(idx, n - 1)]);
  }
  std::vector<int> assignment(n, -1);
  for (int iter = 0; iter < max_iterations; ++iter) {
    bool changed = false;
    for (std::size_t s = 0; s < n; ++s) {
      int best = 0;
      double best_iou = -1.0;
      for (int c = 0; c < k; ++c) {
        const double iou = shape_iou(sorted[s].w, sorted[s].h, centroids[static_cast<std::size_t>(c)].w,
                                     centroids[static_cast<std::size_t>(c)].h);
        if (iou > best_iou) {
          best_iou = iou;
          best = c;
        }
      }
      if (assignment[s] != best) {
        assignment[s] = best;
        changed = true;
      }
    }
    if (!changed) break;
    for (int c = 0; c < k; ++c) {
      double sw = 0, sh = 0;
      std::size_t count = 0;
      for (std::size_t s = 0; s < n; ++s) {
        if (assignment[s] != c) continue;
        sw += sorted[s].w;
        sh += sorted[s].h;
        ++count;
      }
      if (count > 0) {
        centroids[static_cast<std::size_t>(c)] = {sw / static_cast<double>(count),
                                                  sh / static_cast<double>(count)};
      }
    }
  }
  std::stable_sort(centroids.begin(), centroids.end(), [](const AnchorPrior& a, const AnchorPrior& b) {
    return a.w * a.h < b.w * b.h;
  });
  return centroids;
}

}  // namespace uolo
