#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "uolo/checkpoint.hpp"
#include "uolo/errors.hpp"
#include "uolo/trainer.hpp"

using namespace uolo;
namespace fs = std::filesystem;

namespace {

SceneSpec tiny_scene(std::uint64_t seed) {
  SceneSpec s;
  s.image_size = 32;
  s.disc_radius_min = 3.5;
  s.disc_radius_max = 4.0;
  s.spot_radius_min = 1.5;
  s.spot_radius_max = 2.0;
  s.distractor_count = 1;
  s.distractor_radius_min = 1.0;
  s.distractor_radius_max = 1.5;
  s.seed = seed;
  return s;
}

ModelConfig tiny_model(int base = 2) {
  ModelConfig m;
  m.segnet.input_size = 32;
  m.segnet.depth = 2;
  m.segnet.base_channels = base;
  m.grid.S = 8;
  m.grid.A = 2;
  m.grid.C = 2;
  m.grid.priors = {{0.5, 0.5}, {1.0, 1.0}};
  return m;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.n_det = 2;
  c.n_seg = 1;
  c.batch_size = 4;
  c.learning_rate = 1e-3;
  c.validation_fraction = 0;
  c.max_steps = 3;
  return c;
}

std::vector<Sample> tiny_dataset(std::size_t masks = 4, std::uint64_t seed = 3) {
  std::vector<Sample> d = generate(tiny_scene(seed), 8);
  retain_masks(d, masks);
  return d;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

std::vector<std::vector<double>> snapshot(const std::vector<NamedTensor>& list) {
  std::vector<std::vector<double>> out;
  for (const NamedTensor& t : list) out.emplace_back(t.tensor.data().begin(), t.tensor.data().end());
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string eval_csv(UoloModel& model, const std::vector<Sample>& samples) {
  std::ostringstream os;
  evaluate_model(model, samples).write_csv(os);
  return os.str();
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("uolo_trainer_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

}  // namespace

// ---- Adam ----

TEST(Adam, MatchesHandComputedUpdates) {
  Tensor p = Tensor::from_data({2}, {1.0, -2.0}, true);
  const std::vector<NamedTensor> params{{"p", p}};
  AdamState state;
  const AdamHyper h{0.01, 0.9, 0.999, 1e-8};
  const std::vector<std::vector<double>> grads{{0.5, -3.0}, {1.0, 1.0}};
  std::vector<double> w{1.0, -2.0}, m(2, 0.0), v(2, 0.0);
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    {
      Tape tape;
      TapeScope scope(tape);
      tape.backward(sum(mul(p, Tensor::from_data({2}, grads[t - 1]))));
    }
    adam_update(params, state, h);
    for (std::size_t i = 0; i < 2; ++i) {
      const double g = grads[t - 1][i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, static_cast<double>(t)));
      const double vh = v[i] / (1 - std::pow(0.999, static_cast<double>(t)));
      w[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p.data()[i], w[i], 1e-15);
      EXPECT_EQ(p.grad()[i], 0.0);
    }
    EXPECT_EQ(state["p"].t, t);
  }
  // first step moves each weight by lr against the gradient sign
  EXPECT_NEAR(state["p"].m[0], 0.9 * 0.05 + 0.1 * 1.0, 1e-15);
}

TEST(Adam, NonFiniteGradientChangesNothing) {
  Tensor a = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor b = Tensor::from_data({1}, {3.0}, true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(add(sum(a), sum(b)));
  }
  b.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  AdamState state;
  try {
    adam_update({{"a", a}, {"b", b}}, state, {});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
  }
  EXPECT_EQ(a.data()[0], 1.0);
  EXPECT_EQ(b.data()[0], 3.0);
  EXPECT_TRUE(state.empty());
}

TEST(Adam, StepCountsArePerParameter) {
  Tensor a = Tensor::from_data({1}, {1.0}, true);
  Tensor b = Tensor::from_data({1}, {1.0}, true);
  AdamState state;
  for (int i = 0; i < 3; ++i) {
    adam_update({{"a", a}}, state, {});
  }
  adam_update({{"a", a}, {"b", b}}, state, {});
  EXPECT_EQ(state["a"].t, 4u);
  EXPECT_EQ(state["b"].t, 1u);
}

// ---- ledger ----

TEST(LossLedger, StartsWithUnitSegmentationLoss) {
  LossLedger l;
  EXPECT_EQ(l.unet(), 1.0);
  EXPECT_EQ(l.yolo(), 0.0);
  EXPECT_EQ(l.uolo(), 1.0);
  l.update_yolo(0.75);
  l.record({});
  EXPECT_EQ(l.history().back().l_uolo, 1.75);
  l.update_unet(0.25);
  l.record({});
  EXPECT_EQ(l.history().back().l_uolo, 1.0);
  EXPECT_EQ(l.history().back().l_unet, 0.25);
}

// ---- training steps ----

TEST(Trainer, BatchAccountingAndLedgerIdentity) {
  const auto data = std::make_shared<const std::vector<Sample>>(tiny_dataset());
  UoloModel model(tiny_model(), 1);
  TrainConfig cfg = tiny_train();
  cfg.n_det = 3;
  cfg.n_seg = 2;
  Trainer trainer(model, data, all_indices(8), cfg);
  for (std::uint64_t k = 1; k <= 3; ++k) {
    const LedgerRecord r = trainer.step();
    EXPECT_EQ(r.step, k);
    EXPECT_EQ(trainer.det_batches_consumed(), 3 * k);
    EXPECT_EQ(trainer.seg_batches_consumed(), 2 * k);
    EXPECT_EQ(r.det_batches, 3 * k);
    EXPECT_EQ(r.seg_batches, 2 * k);
  }
  for (const LedgerRecord& r : trainer.ledger().history()) {
    EXPECT_EQ(r.l_uolo, r.l_yolo + r.l_unet);
    EXPECT_GE(r.l_unet, 0.0);
    EXPECT_LE(r.l_unet, 1.0);
  }
}

TEST(Trainer, SegmentationPhaseLeavesHeadUntouched) {
  const auto data = std::make_shared<const std::vector<Sample>>(tiny_dataset());
  TrainConfig with_seg = tiny_train();
  TrainConfig without_seg = with_seg;
  without_seg.n_seg = 0;
  UoloModel a(tiny_model(), 5), b(tiny_model(), 5);
  Trainer ta(a, data, all_indices(8), with_seg), tb(b, data, all_indices(8), without_seg);
  ta.step();
  tb.step();
  // identical detection phases; only a's trunk saw the extra segmentation batch
  EXPECT_EQ(snapshot(a.head_parameters()), snapshot(b.head_parameters()));
  EXPECT_NE(snapshot(a.segnet_parameters()), snapshot(b.segnet_parameters()));
  EXPECT_EQ(tb.ledger().unet(), 1.0);  // never updated without a segmentation phase
  EXPECT_NE(ta.ledger().unet(), 1.0);
}

TEST(Trainer, SegmentationOnlyStepKeepsHeadAndYolo) {
  const auto data = std::make_shared<const std::vector<Sample>>(tiny_dataset());
  UoloModel model(tiny_model(), 6);
  AdamState optimizer;
  {
    Trainer warmup(model, data, all_indices(8), tiny_train());
    warmup.step();
    optimizer = warmup.optimizer();
  }
  TrainConfig cfg = tiny_train();
  cfg.n_det = 0;
  cfg.n_seg = 2;
  Trainer trainer(model, data, all_indices(8), cfg);
  trainer.restore({}, optimizer);
  for (int k = 0; k < 3; ++k) {
    const auto head = snapshot(model.head_parameters());
    const auto seg = snapshot(model.segnet_parameters());
    const LedgerRecord r = trainer.step();
    EXPECT_EQ(snapshot(model.head_parameters()), head);
    EXPECT_NE(snapshot(model.segnet_parameters()), seg);
    EXPECT_EQ(r.l_yolo, 0.0);
    EXPECT_EQ(r.det_batches, 0u);
  }
  EXPECT_EQ(trainer.seg_batches_consumed(), 6u);
}

TEST(Trainer, SmallSegmentationStreamCycles) {
  // 2 masked images against 8 box-annotated ones, batch 4
  const auto data = std::make_shared<const std::vector<Sample>>(tiny_dataset(2));
  TrainConfig cfg = tiny_train();
  cfg.n_seg = 3;
  UoloModel model(tiny_model(), 7);
  Trainer trainer(model, data, all_indices(8), cfg);
  for (int k = 0; k < 2; ++k) trainer.step();
  EXPECT_EQ(trainer.seg_batches_consumed(), 6u);
  EXPECT_EQ(trainer.det_batches_consumed(), 4u);
  EXPECT_NE(trainer.ledger().unet(), 1.0);
}

TEST(Trainer, MissingMasksRejectedWhenSegmentationRequired) {
  const auto data = std::make_shared<const std::vector<Sample>>(tiny_dataset(0));
  UoloModel model(tiny_model(), 1);
  EXPECT_THROW(Trainer(model, data, all_indices(8), tiny_train()), ConfigError);
  TrainConfig bad = tiny_train();
  bad.n_det = 0;
  bad.n_seg = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Trainer, EqualSeedsGiveIdenticalRuns) {
  const auto data = std::make_shared<const std::vector<Sample>>(tiny_dataset());
  UoloModel a(tiny_model(), 9), b(tiny_model(), 9);
  Trainer ta(a, data, all_indices(8), tiny_train()), tb(b, data, all_indices(8), tiny_train());
  for (int k = 0; k < 2; ++k) {
    const LedgerRecord ra = ta.step(), rb = tb.step();
    EXPECT_EQ(ra.l_uolo, rb.l_uolo);
    EXPECT_EQ(ra.centers, rb.centers);
  }
  EXPECT_EQ(snapshot(a.parameters()), snapshot(b.parameters()));
  EXPECT_EQ(snapshot(a.buffers()), snapshot(b.buffers()));
}

// ---- evaluation ----

TEST(Evaluate, ReportsEverySampleAndRejectsEmpty) {
  const auto data = tiny_dataset(3);
  UoloModel model(tiny_model(), 2);
  const EvalReport r = evaluate_model(model, data, 3);
  ASSERT_EQ(r.samples.size(), 8u);
  EXPECT_EQ(r.masks_evaluated, 3u);
  for (const SampleEval& s : r.samples) {
    ASSERT_EQ(s.detection.size(), 2u);
    EXPECT_TRUE(s.detection[0] && s.detection[1]);
    EXPECT_GT(s.od_radius, 0.0);
  }
  // batch size must not change the result
  EXPECT_EQ(eval_csv(model, data), [&] {
    std::ostringstream os;
    evaluate_model(model, data, 8).write_csv(os);
    return os.str();
  }());
  EXPECT_THROW(evaluate_model(model, {}), DataError);
}

TEST(Evaluate, ValidationScoreCombinesIouAndHitRate) {
  EvalReport r;
  r.masks_evaluated = 2;
  r.mean_iou = 0.5;
  r.classes = {ClassSummary{}, ClassSummary{}};
  r.classes[0].evaluated = 4;
  r.classes[0].s1r = 100;
  r.classes[1].evaluated = 4;
  r.classes[1].s1r = 50;
  EXPECT_DOUBLE_EQ(validation_score(r), 0.5 + 0.75);
  r.masks_evaluated = 0;
  EXPECT_DOUBLE_EQ(validation_score(r), 0.75);
}

TEST(AnchorPriors, FittedFromBoxSides) {
  const auto data = tiny_dataset();
  const auto priors = fit_anchor_priors(data, 2, 32, 8);
  ASSERT_EQ(priors.size(), 2u);
  // every FV box is 4 px = 1 cell, every OD box 8 px = 2 cells
  EXPECT_DOUBLE_EQ(priors[0].w, 1.0);
  EXPECT_DOUBLE_EQ(priors[1].w, 2.0);
}

// ---- checkpoints and fit ----

TEST(Checkpoint, RoundTripGivesIdenticalEvaluation) {
  TempDir dir;
  const auto samples = tiny_dataset();
  const auto data = std::make_shared<const std::vector<Sample>>(samples);
  UoloModel model(tiny_model(), 11);
  Trainer trainer(model, data, all_indices(8), tiny_train());
  trainer.step();
  const std::string before = eval_csv(model, samples);
  save_checkpoint(dir.path() / "m.ckpt", model, trainer.optimizer(), trainer.counters());
  EXPECT_FALSE(fs::exists(dir.path() / "m.ckpt.partial"));

  UoloModel fresh(tiny_model(), 99);
  const CheckpointContents c = load_checkpoint(dir.path() / "m.ckpt", fresh);
  EXPECT_EQ(eval_csv(fresh, samples), before);
  EXPECT_EQ(c.architecture, tiny_model());
  EXPECT_EQ(c.counters.step, 1u);
  EXPECT_EQ(c.counters.det_batches, 2u);
  EXPECT_EQ(c.counters.l_unet, trainer.ledger().unet());
  ASSERT_EQ(c.optimizer.size(), trainer.optimizer().size());
  for (const auto& [name, slot] : trainer.optimizer()) {
    EXPECT_EQ(c.optimizer.at(name).m, slot.m);
    EXPECT_EQ(c.optimizer.at(name).v, slot.v);
    EXPECT_EQ(c.optimizer.at(name).t, slot.t);
  }
  EXPECT_EQ(snapshot(fresh.buffers()), snapshot(model.buffers()));
  EXPECT_EQ(read_checkpoint_architecture(dir.path() / "m.ckpt"), tiny_model());
}

TEST(Checkpoint, RejectsOtherArchitecturesAndDamage) {
  TempDir dir;
  UoloModel model(tiny_model(), 1);
  save_checkpoint(dir.path() / "m.ckpt", model, {}, {});
  UoloModel wider(tiny_model(3), 1);
  const auto wider_before = snapshot(wider.parameters());
  try {
    load_checkpoint(dir.path() / "m.ckpt", wider);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("base_channels"), std::string::npos);
  }
  EXPECT_EQ(snapshot(wider.parameters()), wider_before);

  const std::string bytes = read_file(dir.path() / "m.ckpt");
  {
    std::ofstream out(dir.path() / "cut.ckpt", std::ios::binary);
    out << bytes.substr(0, bytes.size() - 100);
  }
  UoloModel target(tiny_model(), 2);
  const auto target_before = snapshot(target.parameters());
  EXPECT_THROW(load_checkpoint(dir.path() / "cut.ckpt", target), DataError);
  EXPECT_EQ(snapshot(target.parameters()), target_before);
  {
    std::ofstream out(dir.path() / "junk.ckpt", std::ios::binary);
    out << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(dir.path() / "junk.ckpt", target), DataError);
  EXPECT_THROW(load_checkpoint(dir.path() / "absent.ckpt", target), DataError);
}

TEST(Checkpoint, FailedSaveLeavesNoPartialFile) {
  TempDir dir;
  UoloModel model(tiny_model(), 1);
  fs::create_directories(dir.path() / "occupied" / "child");
  EXPECT_THROW(save_checkpoint(dir.path() / "occupied", model, {}, {}), DataError);
  EXPECT_FALSE(fs::exists(dir.path() / "occupied.partial"));
}

TEST(Fit, ZeroStepsWritesHeaderAndFinalCheckpoint) {
  TempDir dir;
  UoloModel model(tiny_model(), 1);
  TrainConfig cfg = tiny_train();
  cfg.max_steps = 0;
  const FitResult r = fit(model, tiny_dataset(), cfg, {dir.path(), std::nullopt, {}});
  EXPECT_EQ(r.steps, 0u);
  const std::string log = read_file(dir.path() / "train_log.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 1);
  EXPECT_TRUE(fs::exists(dir.path() / "final.ckpt"));
}

TEST(Fit, ResumedRunMatchesUninterruptedRun) {
  TempDir dir;
  const auto samples = tiny_dataset();
  TrainConfig cfg = tiny_train();
  cfg.validation_fraction = 0.25;
  cfg.eval_every = 2;
  cfg.max_steps = 4;
  UoloModel straight(tiny_model(), 3);
  fit(straight, samples, cfg, {dir.path() / "a", std::nullopt, {}});

  TrainConfig half = cfg;
  half.max_steps = 2;  // on an eval boundary, so the final-step validation row matches
  UoloModel first(tiny_model(), 3);
  fit(first, samples, half, {dir.path() / "b", std::nullopt, {}});
  UoloModel second(tiny_model(), 3);
  fit(second, samples, cfg, {dir.path() / "b", dir.path() / "b" / "final.ckpt", {}});

  EXPECT_EQ(read_file(dir.path() / "a" / "train_log.csv"), read_file(dir.path() / "b" / "train_log.csv"));
  EXPECT_EQ(read_file(dir.path() / "a" / "final.ckpt"), read_file(dir.path() / "b" / "final.ckpt"));
  EXPECT_TRUE(fs::exists(dir.path() / "a" / "best.ckpt"));
}

TEST(Fit, CallbackCanStopEarly) {
  TempDir dir;
  UoloModel model(tiny_model(), 1);
  TrainConfig cfg = tiny_train();
  cfg.max_steps = 10;
  int calls = 0;
  const FitResult r = fit(model, tiny_dataset(), cfg,
                          {dir.path(), std::nullopt, [&](const LedgerRecord&, const auto&) { return ++calls < 2; }});
  EXPECT_EQ(r.steps, 2u);
  EXPECT_EQ(r.ledger.history().size(), 2u);
}
