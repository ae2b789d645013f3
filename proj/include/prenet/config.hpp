#ifndef PRENET_CONFIG_HPP
#define PRENET_CONFIG_HPP

#include "prenet/image.hpp"
#include "prenet/inference.hpp"
#include "prenet/model.hpp"
#include "prenet/trainer.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace prenet {

/// Invalid or unreadable run configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Everything a run needs. Serialised as one flat JSON object; `stages`
/// and `backbone` are shared by the model and the trainer.
struct RunConfig {
  ModelConfig model;  // num_classes == 0 means "take it from the dataset"
  TrainConfig train;
  AugmentConfig augment;
  std::string dataset_root;
  std::string output_dir = "runs/prenet";
  bool cache_images = true;
  CombineMode combine_mode = CombineMode::Probability;
  std::string pretrained;  // path or $PRENET_CACHE file name for backbone weights
  std::size_t eval_batch_size = 32;

  void set_stages(int stages) { model.stages = train.stages = stages; }
  void set_backbone(const std::string& name) { model.backbone = train.backbone = name; }

  /// Throws ConfigError. num_classes may still be 0 here.
  void validate() const;
};

/// Parses a JSON object; keys not listed in `run_config_keys()` are
/// rejected by name. Missing keys keep their defaults.
RunConfig parse_run_config(const std::string& json_text, const std::string& origin = "config");
RunConfig load_run_config(const std::filesystem::path& path);
std::string dump_run_config(const RunConfig& cfg, int indent = 2);
const std::vector<std::string>& run_config_keys();

/// Small settings sized for the bundled synthetic dataset.
RunConfig toy_run_config();

}  // namespace prenet

#endif  // PRENET_CONFIG_HPP
