#include "uolo/trainer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "uolo/checkpoint.hpp"
#include "uolo/errors.hpp"
#include "uolo/format.hpp"

namespace uolo {

void TrainConfig::validate() const {
  if (n_det < 0 || n_seg < 0) throw ConfigError("n_det and n_seg must be non-negative");
  if (n_det == 0 && n_seg == 0) throw ConfigError("n_det and n_seg cannot both be zero");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(epsilon > 0)) throw ConfigError("adam epsilon must be positive");
  if (!(validation_fraction >= 0 && validation_fraction < 1)) {
    throw ConfigError("validation_fraction must be in [0, 1)");
  }
  if (!(augmentation.max_shift_fraction >= 0 && augmentation.max_shift_fraction < 0.5)) {
    throw ConfigError("max_shift_fraction must be in [0, 0.5)");
  }
}

void adam_update(const std::vector<NamedTensor>& params, AdamState& state, const AdamHyper& hyper) {
  for (const NamedTensor& p : params) {
    if (!p.tensor.requires_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);
    }
  }
  for (const NamedTensor& p : params) {
    if (!p.tensor.requires_grad()) continue;
    Tensor t = p.tensor;
    std::span<double> w = t.data();
    std::span<double> g = t.grad();
    AdamSlot& slot = state[p.name];
    if (slot.m.empty()) {
      slot.m.assign(w.size(), 0.0);
      slot.v.assign(w.size(), 0.0);
    }
    if (slot.m.size() != w.size()) throw UsageError("adam state size mismatch for " + p.name);
    ++slot.t;
    const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(slot.t));
    const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(slot.t));
    for (std::size_t i = 0; i < w.size(); ++i) {
      slot.m[i] = hyper.beta1 * slot.m[i] + (1.0 - hyper.beta1) * g[i];
      slot.v[i] = hyper.beta2 * slot.v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double m_hat = slot.m[i] / c1;
      const double v_hat = slot.v[i] / c2;
      w[i] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.epsilon);
    }
    t.zero_grad();
  }
}

void LossLedger::record(LedgerRecord r) {
  r.l_unet = unet_;
  r.l_yolo = yolo_;
  r.l_uolo = uolo();
  history_.push_back(r);
}

namespace {

double checked(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
  return v;
}

}  // namespace

LedgerRecord train_step(UoloModel& model, Streams& streams, const TrainConfig& config,
                        AdamState& optimizer, LossLedger& ledger, std::uint64_t step_index) {
  const AdamHyper hyper{config.learning_rate, config.beta1, config.beta2, config.epsilon};
  const std::vector<NamedTensor> all_params = model.parameters();
  const std::vector<NamedTensor> seg_params = model.segnet_parameters();
  const int input_size = model.config().segnet.input_size;
  LedgerRecord rec;
  rec.step = step_index;

  Tape tape;
  TapeScope scope(tape);

  if (config.n_det > 0) {
    double yolo = 0;
    for (int i = 0; i < config.n_det; ++i) {
      tape.clear();
      const Batch batch = streams.detection.next();
      const ModelOutput out = model.forward(batch.images, Mode::kTrain);
      const DetectionTarget target = assign_targets(batch.boxes, model.config().grid, input_size);
      const DetLoss det = det_loss(out.raw, target, config.loss_weights);
      const Tensor unet = seg_loss(out.soft_mask, batch.masks, batch.has_mask);
      const Tensor total = det.total + unet;
      checked(total.item(), "detection-phase loss");
      tape.backward(total);
      adam_update(all_params, optimizer, hyper);
      yolo += det.total.item();
      rec.centers += det.centers;
      rec.dimensions += det.dimensions;
      rec.confidence += det.confidence;
      rec.classes += det.classes;
    }
    const double n = config.n_det;
    ledger.update_yolo(yolo / n);
    rec.centers /= n;
    rec.dimensions /= n;
    rec.confidence /= n;
    rec.classes /= n;
  }

  if (config.n_seg > 0) {
    double unet = 0;
    for (int i = 0; i < config.n_seg; ++i) {
      tape.clear();
      const Batch batch = streams.segmentation.next();
      const SegNetOutput out = model.forward_segnet(batch.images, Mode::kTrain);
      const Tensor loss = seg_loss(out.soft_mask, batch.masks, batch.has_mask);
      checked(loss.item(), "segmentation-phase loss");
      tape.backward(loss);
      adam_update(seg_params, optimizer, hyper);
      unet += loss.item();
    }
    ledger.update_unet(unet / config.n_seg);
  }
  tape.clear();

  rec.det_batches = streams.detection.consumed();
  rec.seg_batches = streams.segmentation.consumed();
  ledger.record(rec);
  return ledger.history().back();
}

namespace {

Streams build_streams(std::shared_ptr<const std::vector<Sample>> dataset,
                      const std::vector<std::size_t>& members, const TrainConfig& config) {
  StreamConfig sc;
  sc.batch_size = config.batch_size;
  sc.seed = config.seed;
  sc.augment = config.augment;
  sc.augmentation = config.augmentation;
  return make_streams(std::move(dataset), members, sc, config.n_det > 0, config.n_seg > 0);
}

}  // namespace

Trainer::Trainer(UoloModel& model, std::shared_ptr<const std::vector<Sample>> dataset,
                 std::vector<std::size_t> train_members, const TrainConfig& config)
    : model_(model),
      config_((config.validate(), config)),
      streams_(build_streams(std::move(dataset), train_members, config)) {}

LedgerRecord Trainer::step() {
  const LedgerRecord rec = train_step(model_, streams_, config_, optimizer_, ledger_, step_ + 1);
  ++step_;
  return rec;
}

TrainerCounters Trainer::counters() const {
  TrainerCounters c;
  c.step = step_;
  c.det_batches = streams_.detection.consumed();
  c.seg_batches = streams_.segmentation.consumed();
  c.l_unet = ledger_.unet();
  c.l_yolo = ledger_.yolo();
  return c;
}

void Trainer::restore(const TrainerCounters& counters, AdamState optimizer) {
  step_ = counters.step;
  streams_.detection.seek(counters.det_batches);
  streams_.segmentation.seek(counters.seg_batches);
  ledger_ = LossLedger();
  ledger_.update_unet(counters.l_unet);
  ledger_.update_yolo(counters.l_yolo);
  optimizer_ = std::move(optimizer);
}

EvalReport evaluate_model(UoloModel& model, const std::vector<Sample>& samples, std::size_t batch_size) {
  if (samples.empty()) throw DataError("evaluation dataset is empty");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  NoTapeScope no_tape;
  const ModelConfig& cfg = model.config();
  const int size = cfg.segnet.input_size;
  const double cell_px = static_cast<double>(size) / cfg.grid.S;
  const std::size_t plane = static_cast<std::size_t>(size) * static_cast<std::size_t>(size);

  EvalReport report;
  report.input_size = size;
  for (std::size_t begin = 0; begin < samples.size(); begin += batch_size) {
    std::vector<std::size_t> indices;
    for (std::size_t i = begin; i < std::min(samples.size(), begin + batch_size); ++i) indices.push_back(i);
    const Batch batch = make_batch(samples, indices);
    const ModelOutput out = model.forward(batch.images, Mode::kInfer);
    const auto decoded = decode(out.raw, cfg.grid);
    const auto soft = out.soft_mask.data();
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const Sample& sample = samples[indices[b]];
      SampleEval se;
      se.id = sample.id;
      if (sample.mask) {
        const std::vector<double> mask_values(soft.begin() + static_cast<std::ptrdiff_t>(b * plane),
                                              soft.begin() + static_cast<std::ptrdiff_t>((b + 1) * plane));
        se.overlap = overlap_metrics(binarize(mask_values, size, size), *sample.mask);
      }
      if (sample.od_radius) {
        se.od_radius = *sample.od_radius;
      } else if (sample.mask && sample.mask->count() > 0) {
        se.od_radius = od_radius_from_mask(*sample.mask);
      } else if (const Box* od = sample.find_box(kOpticDisc)) {
        se.od_radius = od->side / 2.0;
      }
      const std::vector<DecodedBox> best = select_best(decoded[b], cfg.grid.C);
      se.detection.resize(static_cast<std::size_t>(cfg.grid.C));
      for (int c = 0; c < cfg.grid.C; ++c) {
        const Box* gt = sample.find_box(c);
        if (gt == nullptr) continue;
        if (!(se.od_radius > 0)) throw DataError("sample " + sample.id + " has no OD radius for detection metrics");
        std::optional<Point> pred;
        for (const DecodedBox& box : best) {
          if (box.class_id == c) pred = Point{box.bx * cell_px, box.by * cell_px};
        }
        se.detection[static_cast<std::size_t>(c)] =
            detection_metrics(pred, Point{gt->cx, gt->cy}, se.od_radius);
      }
      report.samples.push_back(std::move(se));
    }
  }
  report.summarize(cfg.grid.C);
  return report;
}

double validation_score(const EvalReport& report) {
  double score = report.masks_evaluated ? report.mean_iou : 0.0;
  double s1r = 0;
  int classes = 0;
  for (const ClassSummary& c : report.classes) {
    if (c.evaluated == 0) continue;
    s1r += c.s1r / 100.0;
    ++classes;
  }
  return classes ? score + s1r / classes : score;
}

std::vector<AnchorPrior> fit_anchor_priors(const std::vector<Sample>& samples, int count,
                                           int input_size, int grid_size) {
  const double cell_px = static_cast<double>(input_size) / grid_size;
  std::vector<AnchorPrior> shapes;
  for (const Sample& s : samples) {
    for (const Box& b : s.boxes) shapes.push_back({b.side / cell_px, b.side / cell_px});
  }
  if (shapes.empty()) throw DataError("cannot fit anchor priors: no boxes in the training data");
  return kmeans_anchors(shapes, count);
}

namespace {

const char* kLogHeader =
    "step,L_UOLO,L_YOLO,L_U-Net,centers,dimensions,confidence,classes,det_batches,seg_batches,"
    "val_iou,val_dice,val_OD_ed,val_OD_dbar,val_OD_s1r,val_FV_ed,val_FV_dbar,val_FV_s1r";

std::string log_row(const LedgerRecord& r, const std::optional<EvalReport>& report) {
  std::ostringstream os;
  os << r.step << ',' << format_number(r.l_uolo) << ',' << format_number(r.l_yolo) << ','
     << format_number(r.l_unet) << ',' << format_number(r.centers) << ',' << format_number(r.dimensions)
     << ',' << format_number(r.confidence) << ',' << format_number(r.classes) << ',' << r.det_batches << ','
     << r.seg_batches;
  if (report) {
    os << ',' << format_number(report->mean_iou) << ',' << format_number(report->mean_dice);
    for (std::size_t c = 0; c < 2; ++c) {
      if (c < report->classes.size()) {
        const ClassSummary& cs = report->classes[c];
        os << ',' << format_number(cs.mean_ed) << ',' << format_number(cs.mean_dbar) << ','
           << format_number(cs.s1r);
      } else {
        os << ",,,";
      }
    }
  } else {
    os << ",,,,,,,,";
  }
  return os.str();
}

// Keeps the header and the rows up to and including `step`.
std::vector<std::string> surviving_log(const std::filesystem::path& path, std::uint64_t step) {
  std::vector<std::string> lines;
  std::ifstream in(path);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    const std::uint64_t row_step = std::stoull(line.substr(0, line.find(',')));
    if (row_step <= step) lines.push_back(line);
  }
  return lines;
}

}  // namespace

FitResult fit(UoloModel& model, const std::vector<Sample>& dataset, const TrainConfig& config,
              const FitOptions& options) {
  config.validate();
  if (dataset.empty()) throw DataError("training dataset is empty");
  const auto [train, validation] = split_dataset(dataset, config.validation_fraction, config.seed);
  if (train.empty()) throw ConfigError("validation split leaves no training samples");
  auto shared = std::make_shared<const std::vector<Sample>>(dataset);
  std::vector<Sample> val_samples;
  for (std::size_t i : validation) val_samples.push_back(dataset[i]);

  Trainer trainer(model, shared, train, config);
  std::optional<double> best;
  if (options.resume_from) {
    CheckpointContents contents = load_checkpoint(*options.resume_from, model);
    best = contents.counters.best_score;
    trainer.restore(contents.counters, std::move(contents.optimizer));
  }

  std::filesystem::create_directories(options.out_dir);
  const auto log_path = options.out_dir / "train_log.csv";
  std::vector<std::string> previous;
  if (options.resume_from && std::filesystem::exists(log_path)) {
    previous = surviving_log(log_path, trainer.steps_done());
  }
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw DataError("cannot write " + log_path.string());
  log << kLogHeader << '\n';
  for (const std::string& line : previous) log << line << '\n';
  log.flush();

  auto counters_with_best = [&] {
    TrainerCounters c = trainer.counters();
    c.best_score = best;
    return c;
  };

  FitResult result;
  while (trainer.steps_done() < config.max_steps) {
    const LedgerRecord rec = trainer.step();
    std::optional<EvalReport> report;
    const bool due = config.eval_every > 0 &&
                     (rec.step % config.eval_every == 0 || rec.step == config.max_steps);
    if (!val_samples.empty() && due) {
      report = evaluate_model(model, val_samples, config.batch_size);
      const double score = validation_score(*report);
      if (!best || score > *best) {
        best = score;
        save_checkpoint(options.out_dir / "best.ckpt", model, trainer.optimizer(), counters_with_best());
      }
      result.validation = report;
    }
    log << log_row(rec, report) << '\n';
    log.flush();
    if (options.on_step && !options.on_step(rec, report)) break;
  }
  if (!log) throw DataError("failed writing " + log_path.string());
  save_checkpoint(options.out_dir / "final.ckpt", model, trainer.optimizer(), counters_with_best());
  result.ledger = trainer.ledger();
  result.steps = trainer.steps_done();
  return result;
}

}  // namespace uolo
