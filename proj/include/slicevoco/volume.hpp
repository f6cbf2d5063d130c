// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace slicevoco {

/// (depth, height, width) = (Z, Y, X) for raw volumes, (T, H, W) for slice stacks.
struct Shape3 {
  std::size_t z = 0;
  std::size_t y = 0;
  std::size_t x = 0;

  std::size_t count() const noexcept { return z * y * x; }
  bool positive() const noexcept { return z >= 1 && y >= 1 && x >= 1; }
  bool operator==(const Shape3&) const = default;
};

std::string to_string(const Shape3& s);

/// Z-major (Z slowest, X fastest) scalar grid.
template <typename T>
class Grid3 {
 public:
  Grid3() = default;
  explicit Grid3(Shape3 shape, T fill = T{}) : shape_(shape), data_(shape.count(), fill) {}
  Grid3(Shape3 shape, std::vector<T> data);

  const Shape3& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return (z * shape_.y + y) * shape_.x + x;
  }
  T& operator()(std::size_t z, std::size_t y, std::size_t x) noexcept { return data_[index(z, y, x)]; }
  const T& operator()(std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return data_[index(z, y, x)];
  }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  /// Row-major H×W view of one z plane.
  std::span<const T> plane(std::size_t z) const noexcept {
    return std::span<const T>(data_).subspan(z * shape_.y * shape_.x, shape_.y * shape_.x);
  }

  bool operator==(const Grid3&) const = default;

 private:
  Shape3 shape_{};
  std::vector<T> data_;
};

extern template class Grid3<float>;

/// Voxel spacing in millimetres, (sz, sy, sx).
using Spacing = std::array<double, 3>;

/// Raw CT volume in Hounsfield units.
struct VolumeGrid {
  Grid3<float> voxels;
  Spacing spacing{1.0, 1.0, 1.0};
  std::string patient_id;

  const Shape3& shape() const noexcept { return voxels.shape(); }
  bool operator==(const VolumeGrid&) const = default;
};

/// Throws DataError if dims are zero, spacing is non-positive or voxels non-finite.
void validate(const VolumeGrid& v);

/// Window-normalized intensities in [0,1], shape (T, H, W).
struct SliceStack {
  Grid3<float> slices;
  std::string source_patient_id;

  const Shape3& shape() const noexcept { return slices.shape(); }
  std::size_t depth() const noexcept { return slices.shape().z; }
  std::size_t height() const noexcept { return slices.shape().y; }
  std::size_t width() const noexcept { return slices.shape().x; }
  bool operator==(const SliceStack&) const = default;
};

/// Plain 2D image / patch, row-major.
struct Image2D {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  double operator()(std::size_t y, std::size_t x) const noexcept { return pixels[y * width + x]; }
  bool operator==(const Image2D&) const = default;
};

Image2D slice_image(const SliceStack& stack, std::size_t t);

struct PreprocessSpec {
  double window_center = 50.0;
  double window_width = 400.0;
  Shape3 target_shape{32, 192, 192};
  bool foreground_crop = true;
  double foreground_threshold = -500.0;
  std::size_t foreground_margin = 2;

  /// Pretraining default: 32 slices of 192×192.
  static PreprocessSpec pretraining();
  /// Downstream default: 96 slices of 256×256.
  static PreprocessSpec downstream();
};

void validate(const PreprocessSpec& spec);

}  // namespace slicevoco
