#include "prenet/image.hpp"

#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace prenet {

namespace {

// Source index pair and blend weight for output coordinate `o`.
struct Tap {
  Index lo, hi;
  float frac;
};

std::vector<Tap> taps(Index in, Index out) {
  std::vector<Tap> t(static_cast<std::size_t>(out));
  const double scale = double(in) / double(out);
  for (Index o = 0; o < out; ++o) {
    double src = (double(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, double(in - 1));
    const Index lo = static_cast<Index>(std::floor(src));
    t[std::size_t(o)] = {lo, std::min(lo + 1, in - 1), static_cast<float>(src - double(lo))};
  }
  return t;
}

void resample_plane(const float* src, Index ih, Index iw, float* dst, Index oh, Index ow) {
  const auto ty = taps(ih, oh);
  const auto tx = taps(iw, ow);
  for (Index y = 0; y < oh; ++y) {
    const Tap& a = ty[std::size_t(y)];
    for (Index x = 0; x < ow; ++x) {
      const Tap& b = tx[std::size_t(x)];
      const float top = src[a.lo * iw + b.lo] * (1 - b.frac) + src[a.lo * iw + b.hi] * b.frac;
      const float bot = src[a.hi * iw + b.lo] * (1 - b.frac) + src[a.hi * iw + b.hi] * b.frac;
      dst[y * ow + x] = top * (1 - a.frac) + bot * a.frac;
    }
  }
}

Image resize_for(const Image& image, const AugmentConfig& cfg) {
  if (cfg.fixed_size_resize) return resize_bilinear(image, cfg.resize_side, cfg.resize_side);
  const double s = double(cfg.resize_side) / double(std::min(image.height(), image.width()));
  const Index h = std::max<Index>(cfg.crop_side, Index(std::lround(image.height() * s)));
  const Index w = std::max<Index>(cfg.crop_side, Index(std::lround(image.width() * s)));
  return resize_bilinear(image, h, w);
}

Tensor<float> crop_normalize(const Image& image, Index top, Index left, Index side, bool flip, const AugmentConfig& cfg) {
  Tensor<float> out({3, side, side});
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < side; ++y)
      for (Index x = 0; x < side; ++x) {
        const Index sx = flip ? left + side - 1 - x : left + x;
        out.at(c, y, x) = (image.at(c, top + y, sx) - cfg.mean[std::size_t(c)]) / cfg.std[std::size_t(c)];
      }
  return out;
}

float luma(const Image& im, Index y, Index x) {
  return 0.299f * im.at(0, y, x) + 0.587f * im.at(1, y, x) + 0.114f * im.at(2, y, x);
}

void jitter(Image& im, const AugmentConfig& cfg, Rng& rng) {
  const float b = float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness));
  const float c = float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast));
  const float s = float(rng.uniform(1 - cfg.saturation, 1 + cfg.saturation));
  auto& a = im.planes.array();
  a = (a * b).min(1.0f).max(0.0f);
  double mean_luma = 0;
  for (Index y = 0; y < im.height(); ++y)
    for (Index x = 0; x < im.width(); ++x) mean_luma += luma(im, y, x);
  const float m = float(mean_luma / double(std::max<Index>(1, im.height() * im.width())));
  a = ((a - m) * c + m).min(1.0f).max(0.0f);
  for (Index y = 0; y < im.height(); ++y)
    for (Index x = 0; x < im.width(); ++x) {
      const float g = luma(im, y, x);
      for (Index ch = 0; ch < 3; ++ch) im.at(ch, y, x) = std::clamp(g + (im.at(ch, y, x) - g) * s, 0.0f, 1.0f);
    }
}

}  // namespace

Image decode_image(const std::filesystem::path& path) {
  if (!std::ifstream(path, std::ios::binary)) throw std::runtime_error("cannot open image file " + path.string());
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty() || bgr.channels() != 3) throw std::runtime_error("cannot decode image file " + path.string());
  Image im(bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x)
      for (int c = 0; c < 3; ++c) im.at(c, y, x) = float(row[x][2 - c]) / 255.0f;
  }
  return im;
}

void write_image(const std::filesystem::path& path, const Image& image) {
  cv::Mat bgr(int(image.height()), int(image.width()), CV_8UC3);
  for (int y = 0; y < bgr.rows; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x)
      for (int c = 0; c < 3; ++c)
        row[x][2 - c] = static_cast<unsigned char>(std::lround(std::clamp(image.at(c, y, x), 0.0f, 1.0f) * 255.0f));
  }
  if (!cv::imwrite(path.string(), bgr)) throw std::runtime_error("cannot write image file " + path.string());
}

void write_gray_png(const std::filesystem::path& path, const Tensor<float>& map) {
  if (map.rank() != 2) throw std::invalid_argument("write_gray_png expects a (height, width) map");
  cv::Mat gray(int(map.dim(0)), int(map.dim(1)), CV_8UC1);
  for (int y = 0; y < gray.rows; ++y)
    for (int x = 0; x < gray.cols; ++x)
      gray.at<unsigned char>(y, x) = static_cast<unsigned char>(std::lround(std::clamp(map.at(y, x), 0.0f, 1.0f) * 255.0f));
  if (!cv::imwrite(path.string(), gray)) throw std::runtime_error("cannot write image file " + path.string());
}

Image resize_bilinear(const Image& image, Index out_height, Index out_width) {
  if (image.height() < 1 || image.width() < 1) throw std::invalid_argument("cannot resize an empty image");
  if (out_height == image.height() && out_width == image.width()) return image;
  Image out(out_height, out_width);
  for (Index c = 0; c < 3; ++c)
    resample_plane(image.planes.data() + c * image.height() * image.width(), image.height(), image.width(),
                   out.planes.data() + c * out_height * out_width, out_height, out_width);
  return out;
}

Tensor<float> resize_map_bilinear(const Tensor<float>& map, Index out_height, Index out_width) {
  if (map.rank() != 2 || map.size() == 0) throw std::invalid_argument("resize_map_bilinear expects a non-empty 2-d map");
  Tensor<float> out({out_height, out_width});
  resample_plane(map.data(), map.dim(0), map.dim(1), out.data(), out_height, out_width);
  return out;
}

void AugmentConfig::validate() const {
  if (crop_side < 1 || resize_side < 1) throw std::invalid_argument("resize_side and crop_side must be positive");
  if (crop_side > resize_side) throw std::invalid_argument("crop_side must not exceed resize_side");
  if (!(hflip_prob >= 0 && hflip_prob <= 1)) throw std::invalid_argument("hflip_prob must lie in [0, 1]");
  if (!(brightness >= 0) || !(contrast >= 0) || !(saturation >= 0))
    throw std::invalid_argument("colour jitter deltas must be nonnegative");
  for (float s : std)
    if (!(s > 0)) throw std::invalid_argument("normalisation std must be positive");
}

Tensor<float> augment_train(const Image& image, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  Image im = resize_for(image, cfg);
  const Index top = Index(rng.below(std::uint64_t(im.height() - cfg.crop_side + 1)));
  const Index left = Index(rng.below(std::uint64_t(im.width() - cfg.crop_side + 1)));
  const bool flip = rng.bernoulli(cfg.hflip_prob);
  if (cfg.brightness == 0 && cfg.contrast == 0 && cfg.saturation == 0)
    return crop_normalize(im, top, left, cfg.crop_side, flip, cfg);
  Image crop(cfg.crop_side, cfg.crop_side);
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < cfg.crop_side; ++y)
      for (Index x = 0; x < cfg.crop_side; ++x)
        crop.at(c, y, x) = im.at(c, top + y, flip ? left + cfg.crop_side - 1 - x : left + x);
  jitter(crop, cfg, rng);
  return crop_normalize(crop, 0, 0, cfg.crop_side, false, cfg);
}

Tensor<float> preprocess_eval(const Image& image, const AugmentConfig& cfg) {
  cfg.validate();
  Image im = resize_for(image, cfg);
  const Index top = (im.height() - cfg.crop_side) / 2;
  const Index left = (im.width() - cfg.crop_side) / 2;
  return crop_normalize(im, top, left, cfg.crop_side, false, cfg);
}

}  // namespace prenet
