#ifndef PRENET_TESTS_FIXTURES_HPP
#define PRENET_TESTS_FIXTURES_HPP

#include "prenet/image.hpp"

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace prenet::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "prenet") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline Image solid_image(Index h, Index w, float r, float g, float b) {
  Image im(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      im.at(0, y, x) = r;
      im.at(1, y, x) = g;
      im.at(2, y, x) = b;
    }
  return im;
}

/// Writes `count` small PNGs into root/cls.
inline void write_class(const std::filesystem::path& root, const std::string& cls, int count, Index side = 8) {
  std::filesystem::create_directories(root / cls);
  for (int i = 0; i < count; ++i)
    write_image(root / cls / ("img" + std::to_string(i) + ".png"), solid_image(side, side, 0.1f * float(i % 10), 0.5f, 0.2f));
}

}  // namespace prenet::testing

#endif
