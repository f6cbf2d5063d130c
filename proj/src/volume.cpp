// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/volume.hpp"

#include <cmath>
#include <cstdio>

#include "slicevoco/errors.hpp"
#include "slicevoco/hashing.hpp"

namespace slicevoco {

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::string to_string(const Shape3& s) {
  return "[" + std::to_string(s.z) + "," + std::to_string(s.y) + "," + std::to_string(s.x) + "]";
}

template <typename T>
Grid3<T>::Grid3(Shape3 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.count()) {
    throw DataError("grid data size " + std::to_string(data_.size()) + " does not match shape " +
                    to_string(shape_));
  }
}

template class Grid3<float>;

void validate(const VolumeGrid& v) {
  if (!v.shape().positive()) throw DataError("volume has a zero dimension: " + to_string(v.shape()));
  for (double s : v.spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) throw DataError("volume spacing must be positive and finite");
  }
  for (float f : v.voxels.values()) {
    if (!std::isfinite(f)) throw DataError("volume '" + v.patient_id + "' contains non-finite voxels");
  }
}

Image2D slice_image(const SliceStack& stack, std::size_t t) {
  if (t >= stack.depth()) {
    throw DataError("slice index " + std::to_string(t) + " out of range for depth " +
                    std::to_string(stack.depth()));
  }
  auto plane = stack.slices.plane(t);
  Image2D img{stack.height(), stack.width(), {}};
  img.pixels.assign(plane.begin(), plane.end());
  return img;
}

PreprocessSpec PreprocessSpec::pretraining() {
  PreprocessSpec spec;
  spec.target_shape = {32, 192, 192};
  return spec;
}

PreprocessSpec PreprocessSpec::downstream() {
  PreprocessSpec spec;
  spec.target_shape = {96, 256, 256};
  return spec;
}

void validate(const PreprocessSpec& spec) {
  if (!(spec.window_width > 0.0)) throw ConfigError("window_width must be > 0");
  if (!spec.target_shape.positive()) throw ConfigError("target_shape dims must be >= 1");
}

}  // namespace slicevoco
