#ifndef PRENET_TOY_HPP
#define PRENET_TOY_HPP

#include "prenet/image.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace prenet {

/// Synthetic coloured-shape corpus: one class directory per shape.
struct ToyDatasetSpec {
  int images_per_class = 32;
  Index side = 64;
  std::uint64_t seed = 7;
};

/// Class directory names, in class-id order once sorted.
const std::vector<std::string>& toy_class_names();

/// Renders one sample of class `class_id` (index into toy_class_names()).
Image render_toy_image(int class_id, Index side, Rng& rng);

/// Writes `root/<class>/<class>_NNN.png` for every class; returns the
/// number of images written.
std::size_t write_toy_dataset(const std::filesystem::path& root, const ToyDatasetSpec& spec = {});

}  // namespace prenet

#endif  // PRENET_TOY_HPP
