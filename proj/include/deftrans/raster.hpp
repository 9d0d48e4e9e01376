#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace deftrans {

// Row-major single-channel raster. Specialized below into the two kinds the
// pipeline passes around; the element type keeps them from being mixed up.
template <typename T>
class Raster {
 public:
  Raster() = default;
  Raster(int height, int width, T fill = T{})
      : height_(height), width_(width),
        data_(static_cast<std::size_t>(check_dim(height)) * check_dim(width), fill) {}
  Raster(int height, int width, std::vector<T> data)
      : height_(height), width_(width), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(check_dim(height)) * check_dim(width))
      throw std::invalid_argument("raster data size does not match dimensions");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& at(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  const T& at(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  bool contains(int y, int x) const { return y >= 0 && x >= 0 && y < height_ && x < width_; }

  const std::vector<T>& values() const { return data_; }
  std::vector<T>& values() { return data_; }

  friend bool operator==(const Raster&, const Raster&) = default;

 private:
  static int check_dim(int d) {
    if (d <= 0) throw std::invalid_argument("raster dimensions must be positive");
    return d;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

/// Grayscale intensities in [0, 1].
using Image = Raster<float>;
/// Binary foreground mask; every entry is 0 or 1.
using SilhouetteMask = Raster<std::uint8_t>;

struct Keypoint {
  std::string name;
  double x = 0.0;  // image pixels, column
  double y = 0.0;  // image pixels, row
  bool visible = true;

  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

struct KeypointSet {
  std::vector<Keypoint> points;

  std::size_t size() const { return points.size(); }
  const Keypoint& operator[](std::size_t i) const { return points[i]; }
  Keypoint& operator[](std::size_t i) { return points[i]; }

  friend bool operator==(const KeypointSet&, const KeypointSet&) = default;
};

/// Thrown when a numerical quantity (loss, activation) turns non-finite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace deftrans
