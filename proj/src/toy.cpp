#include "prenet/toy.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

namespace prenet {

namespace fs = std::filesystem;

namespace {

enum class Shape2D { Triangle, Square, Circle, Cross };

struct ClassStyle {
  Shape2D shape;
  std::array<float, 3> colour;
};

// Sorted by name so class ids match directory order.
const std::array<ClassStyle, 4> kStyles{{
    {Shape2D::Triangle, {0.15f, 0.25f, 0.90f}},
    {Shape2D::Square, {0.15f, 0.80f, 0.20f}},
    {Shape2D::Circle, {0.90f, 0.15f, 0.15f}},
    {Shape2D::Cross, {0.95f, 0.85f, 0.10f}},
}};

bool inside(Shape2D shape, double dx, double dy, double r) {
  switch (shape) {
    case Shape2D::Circle:
      return dx * dx + dy * dy <= r * r;
    case Shape2D::Square:
      return std::abs(dx) <= r * 0.85 && std::abs(dy) <= r * 0.85;
    case Shape2D::Triangle: {
      // apex up, base at dy = +r
      if (dy < -r || dy > r) return false;
      return std::abs(dx) <= (dy + r) * 0.5;
    }
    case Shape2D::Cross:
      return (std::abs(dx) <= r * 0.3 && std::abs(dy) <= r) || (std::abs(dy) <= r * 0.3 && std::abs(dx) <= r);
  }
  return false;
}

}  // namespace

const std::vector<std::string>& toy_class_names() {
  static const std::vector<std::string> names{"blue_triangle", "green_square", "red_circle", "yellow_cross"};
  return names;
}

Image render_toy_image(int class_id, Index side, Rng& rng) {
  const ClassStyle& style = kStyles.at(std::size_t(class_id));
  Image im(side, side);
  std::array<float, 3> bg;
  for (auto& b : bg) b = float(rng.uniform(0.3, 0.6));
  const double r = rng.uniform(0.18, 0.3) * double(side);
  const double cx = rng.uniform(r, double(side) - r);
  const double cy = rng.uniform(r, double(side) - r);
  const float shade = float(rng.uniform(0.85, 1.0));
  for (Index y = 0; y < side; ++y)
    for (Index x = 0; x < side; ++x) {
      const bool fg = inside(style.shape, double(x) + 0.5 - cx, double(y) + 0.5 - cy, r);
      for (Index c = 0; c < 3; ++c) {
        const float base = fg ? style.colour[std::size_t(c)] * shade : bg[std::size_t(c)];
        im.at(c, y, x) = std::clamp(base + float(rng.normal() * 0.05), 0.0f, 1.0f);
      }
    }
  return im;
}

std::size_t write_toy_dataset(const fs::path& root, const ToyDatasetSpec& spec) {
  std::size_t written = 0;
  const auto& names = toy_class_names();
  for (std::size_t c = 0; c < names.size(); ++c) {
    const fs::path dir = root / names[c];
    fs::create_directories(dir);
    Rng rng{spec.seed, std::uint64_t(c)};
    for (int i = 0; i < spec.images_per_class; ++i) {
      char file[64];
      std::snprintf(file, sizeof(file), "%s_%03d.png", names[c].c_str(), i);
      write_image(dir / file, render_toy_image(int(c), spec.side, rng));
      ++written;
    }
  }
  return written;
}

}  // namespace prenet
