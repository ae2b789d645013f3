#ifndef PRENET_DATA_HPP
#define PRENET_DATA_HPP

#include "prenet/image.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace prenet {

inline constexpr int kManifestSchemaVersion = 1;

struct ManifestEntry {
  std::string image_path;  // relative to the manifest root
  int class_id = 0;
  std::string class_name;

  bool operator==(const ManifestEntry&) const = default;
};

/// Labelled image inventory of a directory-of-classes corpus. Class ids
/// follow the sorted class directory names; entries are sorted by path.
struct DatasetManifest {
  std::string root;
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;

  std::filesystem::path full_path(std::size_t index) const {
    return std::filesystem::path(root) / entries.at(index).image_path;
  }
  bool operator==(const DatasetManifest&) const = default;
};

struct SplitManifest {
  std::vector<std::size_t> train, val, test;
  std::uint64_t seed = 0;
  std::array<double, 3> ratios{0.6, 0.1, 0.3};

  bool operator==(const SplitManifest&) const = default;
};

/// Scans `root/<class>/<image>`; recognised extensions are
/// .png .jpg .jpeg .bmp (case-insensitive).
DatasetManifest build_manifest(const std::filesystem::path& root);

/// Per-class seeded 60/10/30 partition. Classes with fewer than three
/// images are placed entirely in train.
SplitManifest split_manifest(const DatasetManifest& manifest, std::uint64_t seed);

/// Per-class split sizes for a class of `n` items.
std::array<std::size_t, 3> split_sizes(std::size_t n);

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest, const SplitManifest& split);
std::pair<DatasetManifest, SplitManifest> load_manifest(const std::filesystem::path& path);

/// Groups `split` into batches; with a seed the order is a permutation
/// keyed on (seed, epoch). The last partial batch is kept.
std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> split, std::size_t batch_size,
                                                   std::optional<std::uint64_t> shuffle_seed, std::uint64_t epoch = 0);

struct LabeledBatch {
  Tensor<float> images;  // (batch, 3, side, side)
  std::vector<int> labels;
};

/// Stacks per-image tensors of identical shape into one batch tensor.
Tensor<float> stack_images(const std::vector<Tensor<float>>& images);

/// Decodes manifest images (with an in-memory cache) and assembles batches.
class ImageDataset {
 public:
  explicit ImageDataset(DatasetManifest manifest, bool cache_decoded = true)
      : manifest_(std::move(manifest)), cache_(cache_decoded) {}

  const DatasetManifest& manifest() const { return manifest_; }
  const Image& image(std::size_t index);

  /// Training batch: augment_train on every item, drawing from `rng` in index order.
  LabeledBatch train_batch(std::span<const std::size_t> indices, const AugmentConfig& cfg, Rng& rng);
  /// Evaluation batch: preprocess_eval on every item.
  LabeledBatch eval_batch(std::span<const std::size_t> indices, const AugmentConfig& cfg);

 private:
  DatasetManifest manifest_;
  bool cache_;
  std::map<std::size_t, Image> decoded_;
  std::optional<Image> scratch_;
};

}  // namespace prenet

#endif  // PRENET_DATA_HPP
