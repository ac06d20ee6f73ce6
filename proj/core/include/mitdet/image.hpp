#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace mitdet {

/// Dense H×W×C raster stored row-major with interleaved channels.
template <typename T>
class Raster {
 public:
  Raster() = default;
  Raster(int height, int width, int channels, T fill = T{})
      : height_(height), width_(width), channels_(channels),
        data_(static_cast<std::size_t>(height) * width * channels, fill) {}

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return channels_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int y, int x, int c = 0) { return data_[index(y, x, c)]; }
  const T& operator()(int y, int x, int c = 0) const {
    return data_[index(y, x, c)];
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  bool operator==(const Raster&) const = default;

 private:
  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<T> data_;
};

/// 8-bit RGB intensities.
using RgbImage = Raster<std::uint8_t>;
/// Per-channel optical density, same layout as RgbImage.
using OdImage = Raster<double>;
/// Per-stain concentrations; channel 0 is hematoxylin.
using ConcentrationMap = Raster<double>;
/// Single-channel scalar map.
using ScalarMap = Raster<double>;

inline RgbImage make_rgb(int height, int width, std::uint8_t fill = 255) {
  return RgbImage(height, width, 3, fill);
}

}  // namespace mitdet
