#ifndef PRENET_FIT_HPP
#define PRENET_FIT_HPP

#include "prenet/checkpoint.hpp"
#include "prenet/config.hpp"
#include "prenet/data.hpp"
#include "prenet/inference.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

namespace prenet {

/// Per-epoch means over batches. Fields a run never computed (the concat
/// pass is skipped in some per-epoch phases, or there is no validation
/// split) are NaN.
struct EpochRecord {
  int epoch = 0;
  std::vector<double> pass_losses;  // one per schedule pass
  double train_ce = 0;              // mean stage cross-entropy on the concat pass
  double concat_ce = 0;
  double kl = 0;
  double total = 0;
  double val_top1 = 0;
  double val_top5 = 0;
  double lr = 0;
};

struct TrainingLog {
  std::vector<BatchReport> batches;
  std::vector<EpochRecord> epochs;
  std::vector<MetricsReport> val;
  int best_epoch = -1;
  double best_val = -1;
};

struct FitOptions {
  std::optional<std::filesystem::path> resume;  // last.ckpt of an earlier run
  bool write_artifacts = true;                  // metrics.csv, last.ckpt, best.ckpt under output_dir
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
  TrainingLog log;
  std::unique_ptr<Prenet<float>> model;
};

/// CSV header for `stages`/`steps`: epoch,pass1_loss..passK_loss,train_ce,...
std::string metrics_header(std::size_t passes);
std::string metrics_row(const EpochRecord& r);

/// Model from a config and the dataset's class count, with pretrained
/// backbone weights applied when configured.
std::unique_ptr<Prenet<float>> build_model(const RunConfig& cfg);

/// Epoch loop: seeded batches of `split.train`, the progressive schedule on
/// every batch, validation after each epoch, checkpoints and metrics CSV.
FitResult fit(RunConfig cfg, ImageDataset& data, const SplitManifest& split, const FitOptions& options = {});

struct LoadedModel {
  RunConfig config;
  Checkpoint checkpoint;
  std::unique_ptr<Prenet<float>> model;
};

/// Rebuilds the model described by a checkpoint's config snapshot.
LoadedModel load_model(const std::filesystem::path& checkpoint_path);

}  // namespace prenet

#endif  // PRENET_FIT_HPP
