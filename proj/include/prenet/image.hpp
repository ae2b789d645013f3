#ifndef PRENET_IMAGE_HPP
#define PRENET_IMAGE_HPP

#include "prenet/rng.hpp"
#include "prenet/tensor.hpp"

#include <array>
#include <filesystem>

namespace prenet {

/// Planar RGB image with values in [0, 1], stored as a (3, height, width) tensor.
struct Image {
  Tensor<float> planes;

  Image() = default;
  Image(Index height, Index width) : planes({3, height, width}) {}
  explicit Image(Tensor<float> t) : planes(std::move(t)) {}

  Index height() const { return planes.dim(1); }
  Index width() const { return planes.dim(2); }
  float& at(Index c, Index y, Index x) { return planes.at(c, y, x); }
  float at(Index c, Index y, Index x) const { return planes.at(c, y, x); }
};

/// Decodes any raster format OpenCV reads (PNG and JPEG at least) into RGB.
Image decode_image(const std::filesystem::path& path);

/// Writes an RGB image as 8-bit PNG or JPEG depending on extension.
void write_image(const std::filesystem::path& path, const Image& image);

/// Writes an (height, width) map in [0, 1] as an 8-bit single-channel PNG.
void write_gray_png(const std::filesystem::path& path, const Tensor<float>& map);

/// Bilinear resampling with half-pixel centres and clamped borders.
Image resize_bilinear(const Image& image, Index out_height, Index out_width);

/// Same sampling rule for a single (height, width) map.
Tensor<float> resize_map_bilinear(const Tensor<float>& map, Index out_height, Index out_width);

struct AugmentConfig {
  Index resize_side = 550;
  Index crop_side = 448;
  double hflip_prob = 0.5;
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
  // true: stretch to resize_side x resize_side; false: scale the shorter side
  // to resize_side and keep the aspect ratio.
  bool fixed_size_resize = true;

  void validate() const;
};

/// Resize, random crop, random horizontal flip, colour jitter, normalise.
Tensor<float> augment_train(const Image& image, const AugmentConfig& cfg, Rng& rng);

/// Resize, centre crop, normalise.
Tensor<float> preprocess_eval(const Image& image, const AugmentConfig& cfg);

}  // namespace prenet

#endif  // PRENET_IMAGE_HPP
