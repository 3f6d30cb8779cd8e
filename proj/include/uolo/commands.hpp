#pragma once

// Command implementations behind the `uolo` executable.
//
// Exit codes: 0 success, 1 unexpected failure, 2 configuration or usage
// error, 3 data or I/O error, 4 numeric failure.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "uolo/config.hpp"
#include "uolo/metrics.hpp"

namespace uolo {

struct GenDataSummary {
  std::size_t samples = 0;
  std::size_t with_mask = 0;
  std::size_t boxes_only = 0;
};

/// Refuses a non-empty out_dir unless force is set.
GenDataSummary cmd_gen_data(const RunConfig& config, const std::filesystem::path& out_dir, bool force,
                            std::ostream& log);

/// Loads a dataset and applies the configured preprocessing.
std::vector<Sample> load_samples(const RunConfig& config, const std::filesystem::path& dataset_dir);

/// Writes config.json, train_log.csv, final.ckpt and best.ckpt to out_dir.
FitResult cmd_train(const RunConfig& config, const std::filesystem::path& dataset_dir,
                    const std::filesystem::path& out_dir, const std::filesystem::path& resume,
                    std::ostream& log);

/// Writes eval.csv to out_dir.
EvalReport cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& dataset_dir, const std::filesystem::path& out_dir,
                    std::ostream& log);

/// Writes overlay.ppm, caption.txt and prediction.txt to out_dir.
void cmd_predict(const RunConfig& config, const std::filesystem::path& checkpoint,
                 const std::filesystem::path& image_path, const std::filesystem::path& out_dir,
                 std::ostream& log);

/// Parses argv, dispatches and maps errors to exit codes.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace uolo
