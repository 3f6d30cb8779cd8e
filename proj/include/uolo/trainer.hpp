#pragma once

// Interleaved training: each step runs n_det detection batches through the
// full model under L_UOLO = L_YOLO + L_U-Net, then n_seg segmentation batches
// through the segmentation network alone under L_U-Net.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "uolo/data.hpp"
#include "uolo/metrics.hpp"
#include "uolo/model.hpp"

namespace uolo {

struct TrainConfig {
  int n_det = 8;
  int n_seg = 1;
  std::size_t batch_size = 8;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t max_steps = 100;
  double validation_fraction = 0.25;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentConfig augmentation;
  DetLossWeights loss_weights;
  /// Validation cadence in steps; 0 disables periodic validation.
  std::uint64_t eval_every = 1;

  void validate() const;
};

// ---- optimizer ----

struct AdamSlot {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
};

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moments keyed by parameter name. Each parameter keeps its own step count,
/// so parameters skipped by a phase keep an unbiased correction.
using AdamState = std::map<std::string, AdamSlot>;

/// Bias-corrected Adam on every parameter, then zeroes the gradients. A
/// non-finite gradient aborts before any parameter changes (NumericError
/// naming the parameter).
void adam_update(const std::vector<NamedTensor>& params, AdamState& state, const AdamHyper& hyper);

// ---- loss bookkeeping ----

struct LedgerRecord {
  std::uint64_t step = 0;
  double l_unet = 0;
  double l_yolo = 0;
  double l_uolo = 0;
  // Detection-phase means of the unweighted detection terms.
  double centers = 0;
  double dimensions = 0;
  double confidence = 0;
  double classes = 0;
  std::uint64_t det_batches = 0;  // cumulative
  std::uint64_t seg_batches = 0;
};

/// Current L_U-Net / L_YOLO / L_UOLO. Each phase stores the mean over its
/// batches; a phase with zero batches leaves its value untouched.
class LossLedger {
 public:
  double unet() const { return unet_; }
  double yolo() const { return yolo_; }
  double uolo() const { return yolo_ + unet_; }

  void update_yolo(double phase_mean) { yolo_ = phase_mean; }
  void update_unet(double phase_mean) { unet_ = phase_mean; }
  void record(LedgerRecord r);
  const std::vector<LedgerRecord>& history() const { return history_; }

 private:
  double unet_ = 1.0;
  double yolo_ = 0.0;
  std::vector<LedgerRecord> history_;
};

// ---- training ----

/// One step of the interleaved scheme. Detection batches backpropagate
/// L_YOLO plus the soft-IoU loss of their mask-annotated images through every
/// parameter; segmentation batches update the segmentation network only.
LedgerRecord train_step(UoloModel& model, Streams& streams, const TrainConfig& config,
                        AdamState& optimizer, LossLedger& ledger, std::uint64_t step_index);

/// Everything needed to continue a run bit-identically.
struct TrainerCounters {
  std::uint64_t step = 0;
  std::uint64_t det_batches = 0;
  std::uint64_t seg_batches = 0;
  double l_unet = 1.0;
  double l_yolo = 0.0;
  std::optional<double> best_score;
};

class Trainer {
 public:
  Trainer(UoloModel& model, std::shared_ptr<const std::vector<Sample>> dataset,
          std::vector<std::size_t> train_members, const TrainConfig& config);

  LedgerRecord step();
  const LossLedger& ledger() const { return ledger_; }
  std::uint64_t steps_done() const { return step_; }
  std::uint64_t det_batches_consumed() const { return streams_.detection.consumed(); }
  std::uint64_t seg_batches_consumed() const { return streams_.segmentation.consumed(); }
  AdamState& optimizer() { return optimizer_; }
  const AdamState& optimizer() const { return optimizer_; }

  TrainerCounters counters() const;
  void restore(const TrainerCounters& counters, AdamState optimizer);

 private:
  UoloModel& model_;
  TrainConfig config_;
  Streams streams_;
  AdamState optimizer_;
  LossLedger ledger_;
  std::uint64_t step_ = 0;
};

/// Infer-mode evaluation: soft masks binarized at 0.5 against the GT masks,
/// the best box per class against the GT box centres. The OD radius comes
/// from the sample override, else the GT mask, else half the OD box side.
EvalReport evaluate_model(UoloModel& model, const std::vector<Sample>& samples,
                          std::size_t batch_size = 8);

/// Higher is better: mean IoU (when masks exist) plus the mean S_1R fraction
/// over classes with ground truth.
double validation_score(const EvalReport& report);

/// Anchor priors from k-means over the box shapes (grid units) of the given samples.
std::vector<AnchorPrior> fit_anchor_priors(const std::vector<Sample>& samples, int count,
                                           int input_size, int grid_size);

struct FitOptions {
  std::filesystem::path out_dir;
  /// Continue from this checkpoint (model, optimizer, counters).
  std::optional<std::filesystem::path> resume_from;
  /// Called after every step; returning false stops the run early.
  std::function<bool(const LedgerRecord&, const std::optional<EvalReport>&)> on_step;
};

struct FitResult {
  LossLedger ledger;
  std::optional<EvalReport> validation;  // at the final step
  std::uint64_t steps = 0;
};

/// Splits the dataset, trains up to max_steps and writes train_log.csv,
/// final.ckpt and (when a validation split exists) best.ckpt to out_dir.
FitResult fit(UoloModel& model, const std::vector<Sample>& dataset, const TrainConfig& config,
              const FitOptions& options);

}  // namespace uolo
