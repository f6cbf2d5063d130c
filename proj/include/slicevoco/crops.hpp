// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "slicevoco/volume.hpp"

namespace slicevoco {

/// Axis-aligned pixel box on one axial slice.
struct CropBox {
  std::size_t x0 = 0;
  std::size_t y0 = 0;
  std::size_t w = 1;
  std::size_t h = 1;
  std::size_t slice_index = 0;

  std::size_t area() const noexcept { return w * h; }
  bool operator==(const CropBox&) const = default;
};

struct CropGridSpec {
  std::size_t rows = 4;
  std::size_t cols = 4;
  std::size_t crop_w = 48;
  std::size_t crop_h = 48;
  std::size_t slice_w = 192;
  std::size_t slice_h = 192;

  std::size_t cells() const noexcept { return rows * cols; }
};

/// Throws ConfigError when the grid does not fit or has a zero extent.
void validate(const CropGridSpec& spec);

enum class OverlapMeasure { iou, overlap_fraction };

/// rows*cols boxes tiling the top-left corner, row-major.
std::vector<CropBox> make_base_grid(const CropGridSpec& spec, std::size_t slice_index = 0);

/// Uniform top-left corner, crop extent equal to the grid cell.
CropBox sample_random_crop(const CropGridSpec& spec, std::mt19937_64& rng, std::size_t slice_index = 0);

std::size_t intersection_area(const CropBox& a, const CropBox& b);

/// |a∩b| / |a∪b|. Boxes must share a slice.
double iou(const CropBox& a, const CropBox& b);

/// |c∩b| / |b|; the overlap-proportion label of the original 3D method.
double overlap_fraction(const CropBox& c, const CropBox& base);

/// r_i for each base box, in grid order.
std::vector<double> overlap_vector(const CropBox& c, std::span<const CropBox> grid,
                                   OverlapMeasure measure = OverlapMeasure::iou);

/// Exact pixel copy of `box` from the stack.
Image2D extract_patch(const SliceStack& stack, const CropBox& box);

}  // namespace slicevoco
