// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/crops.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "slicevoco/errors.hpp"

namespace slicevoco {

void validate(const CropGridSpec& spec) {
  if (spec.rows == 0 || spec.cols == 0) throw ConfigError("crop grid needs at least one row and column");
  if (spec.crop_w == 0 || spec.crop_h == 0) throw ConfigError("crop extent must be >= 1");
  if (spec.rows * spec.crop_h > spec.slice_h || spec.cols * spec.crop_w > spec.slice_w) {
    throw ConfigError("crop grid " + std::to_string(spec.rows) + "x" + std::to_string(spec.cols) +
                      " of " + std::to_string(spec.crop_h) + "x" + std::to_string(spec.crop_w) +
                      " does not fit in a " + std::to_string(spec.slice_h) + "x" +
                      std::to_string(spec.slice_w) + " slice");
  }
}

std::vector<CropBox> make_base_grid(const CropGridSpec& spec, std::size_t slice_index) {
  validate(spec);
  std::vector<CropBox> grid;
  grid.reserve(spec.cells());
  for (std::size_t r = 0; r < spec.rows; ++r) {
    for (std::size_t c = 0; c < spec.cols; ++c) {
      grid.push_back({c * spec.crop_w, r * spec.crop_h, spec.crop_w, spec.crop_h, slice_index});
    }
  }
  return grid;
}

CropBox sample_random_crop(const CropGridSpec& spec, std::mt19937_64& rng, std::size_t slice_index) {
  if (spec.crop_w == 0 || spec.crop_h == 0) throw ConfigError("crop extent must be >= 1");
  if (spec.crop_w > spec.slice_w || spec.crop_h > spec.slice_h) {
    throw ConfigError("random crop larger than slice");
  }
  std::uniform_int_distribution<std::size_t> xs(0, spec.slice_w - spec.crop_w);
  std::uniform_int_distribution<std::size_t> ys(0, spec.slice_h - spec.crop_h);
  const std::size_t x0 = xs(rng);
  const std::size_t y0 = ys(rng);
  return {x0, y0, spec.crop_w, spec.crop_h, slice_index};
}

std::size_t intersection_area(const CropBox& a, const CropBox& b) {
  const std::size_t x_lo = std::max(a.x0, b.x0);
  const std::size_t x_hi = std::min(a.x0 + a.w, b.x0 + b.w);
  const std::size_t y_lo = std::max(a.y0, b.y0);
  const std::size_t y_hi = std::min(a.y0 + a.h, b.y0 + b.h);
  if (x_hi <= x_lo || y_hi <= y_lo) return 0;
  return (x_hi - x_lo) * (y_hi - y_lo);
}

double iou(const CropBox& a, const CropBox& b) {
  if (a.slice_index != b.slice_index) throw std::invalid_argument("iou: boxes lie on different slices");
  if (a.area() == 0 || b.area() == 0) throw std::invalid_argument("iou: zero-area box");
  const std::size_t inter = intersection_area(a, b);
  const std::size_t uni = a.area() + b.area() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double overlap_fraction(const CropBox& c, const CropBox& base) {
  if (c.slice_index != base.slice_index) {
    throw std::invalid_argument("overlap_fraction: boxes lie on different slices");
  }
  if (base.area() == 0) throw std::invalid_argument("overlap_fraction: zero-area box");
  return static_cast<double>(intersection_area(c, base)) / static_cast<double>(base.area());
}

std::vector<double> overlap_vector(const CropBox& c, std::span<const CropBox> grid,
                                   OverlapMeasure measure) {
  std::vector<double> r;
  r.reserve(grid.size());
  for (const auto& b : grid) {
    r.push_back(measure == OverlapMeasure::iou ? iou(c, b) : overlap_fraction(c, b));
  }
  return r;
}

Image2D extract_patch(const SliceStack& stack, const CropBox& box) {
  if (box.slice_index >= stack.depth()) {
    throw DataError("extract_patch: slice index " + std::to_string(box.slice_index) +
                    " out of range");
  }
  if (box.w == 0 || box.h == 0 || box.x0 + box.w > stack.width() || box.y0 + box.h > stack.height()) {
    throw DataError("extract_patch: box exceeds slice bounds");
  }
  Image2D patch{box.h, box.w, std::vector<double>(box.area())};
  for (std::size_t dy = 0; dy < box.h; ++dy) {
    for (std::size_t dx = 0; dx < box.w; ++dx) {
      patch.pixels[dy * box.w + dx] = stack.slices(box.slice_index, box.y0 + dy, box.x0 + dx);
    }
  }
  return patch;
}

}  // namespace slicevoco
