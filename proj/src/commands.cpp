#include "uolo/commands.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <ostream>

#include <CLI11.hpp>

#include "uolo/checkpoint.hpp"
#include "uolo/errors.hpp"
#include "uolo/format.hpp"

namespace uolo {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

void echo_config(const RunConfig& config, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  write_text(out_dir / "config.json", to_json_text(config));
}

// Model configuration for inference: empty priors defer to the checkpoint.
ModelConfig inference_architecture(const RunConfig& config, const fs::path& checkpoint) {
  ModelConfig arch = config.model;
  if (arch.grid.priors.empty()) arch.grid.priors = read_checkpoint_architecture(checkpoint).grid.priors;
  return arch;
}

Sample preprocess(const RunConfig& config, Sample s) {
  const int size = config.model.segnet.input_size;
  if (config.fov_crop) s = crop_and_resize(s, size);
  if (s.image.width != size || s.image.height != size) {
    throw DataError("sample " + s.id + " is " + std::to_string(s.image.width) + "x" +
                    std::to_string(s.image.height) + " but the model expects " + std::to_string(size) + "x" +
                    std::to_string(size) + " (enable data.fov_crop to resize)");
  }
  if (s.image.channels != config.model.segnet.in_channels) {
    throw DataError("sample " + s.id + " has " + std::to_string(s.image.channels) + " channels, model expects " +
                    std::to_string(config.model.segnet.in_channels));
  }
  return s;
}

}  // namespace

GenDataSummary cmd_gen_data(const RunConfig& config, const fs::path& out_dir, bool force, std::ostream& log) {
  if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force) {
    throw ConfigError("output directory " + out_dir.string() + " is not empty (use --force to overwrite)");
  }
  for (const char* owned : {"images", "masks"}) fs::remove_all(out_dir / owned);
  std::vector<Sample> samples = generate(config.scene, config.count);
  const auto keep = static_cast<std::size_t>(std::llround(config.mask_fraction * config.count));
  retain_masks(samples, keep);
  write_dataset(out_dir, samples);
  echo_config(config, out_dir);

  GenDataSummary summary;
  summary.samples = samples.size();
  for (const Sample& s : samples) (s.mask ? summary.with_mask : summary.boxes_only) += 1;
  log << "wrote " << summary.samples << " samples to " << out_dir.string() << ": " << summary.with_mask
      << " with mask and boxes, " << summary.boxes_only << " with boxes only\n";
  return summary;
}

std::vector<Sample> load_samples(const RunConfig& config, const fs::path& dataset_dir) {
  std::vector<Sample> samples = read_dataset(dataset_dir);
  if (samples.empty()) throw DataError("dataset " + dataset_dir.string() + " is empty");
  for (Sample& s : samples) s = preprocess(config, std::move(s));
  return samples;
}

FitResult cmd_train(const RunConfig& config, const fs::path& dataset_dir, const fs::path& out_dir,
                    const fs::path& resume, std::ostream& log) {
  const std::vector<Sample> samples = load_samples(config, dataset_dir);
  RunConfig effective = config;
  if (effective.model.grid.priors.empty()) {
    const auto split = split_dataset(samples, config.train.validation_fraction, config.seed);
    std::vector<Sample> train;
    for (std::size_t i : split.first) train.push_back(samples[i]);
    effective.model.grid.priors = fit_anchor_priors(train, effective.model.grid.A,
                                                    effective.model.segnet.input_size, effective.model.grid.S);
  }
  effective.finalize();
  echo_config(effective, out_dir);

  UoloModel model(effective.model, effective.seed);
  FitOptions options;
  options.out_dir = out_dir;
  if (!resume.empty()) options.resume_from = resume;
  const FitResult result = fit(model, samples, effective.train, options);
  log << "trained " << result.steps << " steps; L_UOLO " << format_number(result.ledger.uolo()) << " (L_YOLO "
      << format_number(result.ledger.yolo()) << ", L_U-Net " << format_number(result.ledger.unet()) << ")\n";
  if (result.validation) {
    log << "validation IoU " << format_number(result.validation->mean_iou) << ", Dice "
        << format_number(result.validation->mean_dice) << '\n';
  }
  return result;
}

EvalReport cmd_eval(const RunConfig& config, const fs::path& checkpoint, const fs::path& dataset_dir,
                    const fs::path& out_dir, std::ostream& log) {
  const std::vector<Sample> samples = load_samples(config, dataset_dir);
  UoloModel model(inference_architecture(config, checkpoint), config.seed);
  load_checkpoint(checkpoint, model);
  const EvalReport report = evaluate_model(model, samples, config.train.batch_size);
  echo_config(config, out_dir);
  std::ostringstream csv;
  report.write_csv(csv);
  write_text(out_dir / "eval.csv", csv.str());
  log << "evaluated " << report.samples.size() << " samples: IoU " << format_number(report.mean_iou) << ", Dice "
      << format_number(report.mean_dice);
  for (std::size_t c = 0; c < report.classes.size(); ++c) {
    log << ", " << class_name(static_cast<int>(c)) << " S1R " << format_number(report.classes[c].s1r) << "%";
  }
  log << '\n';
  return report;
}

namespace {

void put_rgb(Image& img, int x, int y, double r, double g, double b) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  const std::size_t i = static_cast<std::size_t>(y) * img.width + x;
  img.pixels[i] = r;
  img.pixels[n + i] = g;
  img.pixels[2 * n + i] = b;
}

void draw_rect(Image& img, int x0, int y0, int x1, int y1, double r, double g, double b) {
  for (int x = x0; x <= x1; ++x) {
    put_rgb(img, x, y0, r, g, b);
    put_rgb(img, x, y1, r, g, b);
  }
  for (int y = y0; y <= y1; ++y) {
    put_rgb(img, x0, y, r, g, b);
    put_rgb(img, x1, y, r, g, b);
  }
}

}  // namespace

void cmd_predict(const RunConfig& config, const fs::path& checkpoint, const fs::path& image_path,
                 const fs::path& out_dir, std::ostream& log) {
  Sample sample;
  sample.id = image_path.stem().string();
  sample.image = read_pnm(image_path);
  sample = preprocess(config, std::move(sample));

  UoloModel model(inference_architecture(config, checkpoint), config.seed);
  load_checkpoint(checkpoint, model);
  const ModelConfig& arch = model.config();
  const int size = arch.segnet.input_size;
  const double cell_px = static_cast<double>(size) / arch.grid.S;

  ModelOutput out;
  {
    NoTapeScope no_tape;
    out = model.forward(make_batch({sample}).images, Mode::kInfer);
  }
  const auto soft = out.soft_mask.data();
  const Mask mask = binarize(std::vector<double>(soft.begin(), soft.end()), size, size);
  const std::vector<DecodedBox> best = select_best(decode(out.raw, arch.grid)[0], arch.grid.C);

  // Grayscale base, mask contour in green, OD box red, FV box blue.
  Image overlay(size, size, 3);
  const std::vector<std::uint8_t> gray = to_gray_bytes(sample.image);
  const std::size_t n = static_cast<std::size_t>(size) * size;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < n; ++i) overlay.pixels[c * n + i] = gray[i] / 255.0;
  }
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (!mask.at(y, x)) continue;
      const bool edge = x == 0 || y == 0 || x == size - 1 || y == size - 1 || !mask.at(y, x - 1) ||
                        !mask.at(y, x + 1) || !mask.at(y - 1, x) || !mask.at(y + 1, x);
      if (edge) put_rgb(overlay, x, y, 0, 1, 0);
    }
  }

  std::ostringstream record, caption;
  record << "# boxes in pixels of the " << size << "x" << size
         << " network input grid: class cx cy w h x0 y0 x1 y1 confidence class_prob score\n";
  for (const DecodedBox& box : best) {
    const double cx = box.bx * cell_px, cy = box.by * cell_px;
    const double w = box.bw * cell_px, h = box.bh * cell_px;
    const double x0 = std::clamp(cx - w / 2, 0.0, static_cast<double>(size));
    const double y0 = std::clamp(cy - h / 2, 0.0, static_cast<double>(size));
    const double x1 = std::clamp(cx + w / 2, 0.0, static_cast<double>(size));
    const double y1 = std::clamp(cy + h / 2, 0.0, static_cast<double>(size));
    const char* name = class_name(box.class_id);
    record << name << ' ' << format_number(cx) << ' ' << format_number(cy) << ' ' << format_number(w) << ' '
           << format_number(h) << ' ' << format_number(x0) << ' ' << format_number(y0) << ' '
           << format_number(x1) << ' ' << format_number(y1) << ' ' << format_number(box.confidence) << ' '
           << format_number(box.class_probs[static_cast<std::size_t>(box.class_id)]) << ' '
           << format_number(box.score) << '\n';
    char conf[32];
    std::snprintf(conf, sizeof(conf), "%.2f", box.confidence);
    caption << name << ' ' << conf << '\n';
    const bool od = box.class_id == kOpticDisc;
    draw_rect(overlay, static_cast<int>(x0), static_cast<int>(y0), std::min(static_cast<int>(x1), size - 1),
              std::min(static_cast<int>(y1), size - 1), od ? 1.0 : 0.0, 0.0, od ? 0.0 : 1.0);
  }
  record << "mask_pixels " << mask.count() << '\n';
  if (mask.count() > 0) record << "od_radius_estimate " << format_number(od_radius_from_mask(mask)) << '\n';

  fs::create_directories(out_dir);
  write_pnm(out_dir / "overlay.ppm", overlay);
  write_text(out_dir / "caption.txt", caption.str());
  write_text(out_dir / "prediction.txt", record.str());
  echo_config(config, out_dir);
  log << record.str();
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Joint optic-disc segmentation and OD/fovea detection on synthetic fundus-like images", "uolo"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON run configuration");
    cmd->add_option("--seed", seed, "seed for data, initialization and training");
    cmd->add_option("--set", sets, "override a config field, e.g. train.max_steps=10")->take_all();
  };

  std::string out_dir, data_dir, checkpoint, image, resume;
  bool force = false;
  std::optional<double> mask_fraction;
  std::optional<int> count;
  std::optional<std::uint64_t> steps;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  common(gen);
  gen->add_option("--out", out_dir, "dataset directory")->required();
  gen->add_flag("--force", force, "overwrite a non-empty directory");
  gen->add_option("--mask-fraction", mask_fraction, "share of samples keeping their mask");
  gen->add_option("--count", count, "number of samples");

  CLI::App* train = app.add_subcommand("train", "train a model");
  common(train);
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_dir, "run directory")->required();
  train->add_option("--steps", steps, "training steps");
  train->add_option("--resume", resume, "checkpoint to continue from");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--out", out_dir, "report directory")->required();

  CLI::App* predict = app.add_subcommand("predict", "predict one image");
  common(predict);
  predict->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  predict->add_option("--image", image, "PGM/PPM image")->required();
  predict->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    std::vector<std::string> overrides = sets;
    if (seed) overrides.push_back("seed=" + std::to_string(*seed));
    if (steps) overrides.push_back("train.max_steps=" + std::to_string(*steps));
    if (mask_fraction) overrides.push_back("data.mask_fraction=" + format_number(*mask_fraction));
    if (count) overrides.push_back("data.count=" + std::to_string(*count));
    const RunConfig config =
        config_path.empty() ? parse_run_config("", overrides) : load_run_config(config_path, overrides);

    if (gen->parsed()) {
      cmd_gen_data(config, out_dir, force, out);
    } else if (train->parsed()) {
      cmd_train(config, data_dir, out_dir, resume, out);
    } else if (eval->parsed()) {
      cmd_eval(config, checkpoint, data_dir, out_dir, out);
    } else if (predict->parsed()) {
      cmd_predict(config, checkpoint, image, out_dir, out);
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return 3;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace uolo
