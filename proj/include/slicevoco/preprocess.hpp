// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>

#include "slicevoco/volume.hpp"

namespace slicevoco {

/// clamp((hu - (center - width/2)) / width, 0, 1), elementwise. Shape preserved.
SliceStack window_normalize(const VolumeGrid& volume, const PreprocessSpec& spec);

enum class Interpolation { trilinear, nearest };

/// Corner-aligned resampling: output index i maps to i*(in-1)/(out-1).
/// A target extent of 1 samples the input centre.
SliceStack resample_to(const SliceStack& stack, const Shape3& target,
                       Interpolation mode = Interpolation::trilinear);

/// Inclusive-exclusive voxel box [begin, end) per axis, ordered (z, y, x).
struct VoxelBox {
  std::array<std::size_t, 3> begin{};
  std::array<std::size_t, 3> end{};
  bool operator==(const VoxelBox&) const = default;
};

struct ForegroundCrop {
  VolumeGrid volume;
  VoxelBox box;
  bool no_foreground = false;
};

/// Bounding box of voxels with hu > threshold, grown by `margin` and clamped.
/// If nothing exceeds the threshold the input comes back whole with the flag set.
ForegroundCrop crop_foreground(const VolumeGrid& volume, double hu_threshold = -500.0,
                               std::size_t margin = 2);

VolumeGrid extract_box(const VolumeGrid& volume, const VoxelBox& box);

/// Full chain: optional foreground crop, windowing, resampling to spec.target_shape.
SliceStack preprocess_volume(const VolumeGrid& volume, const PreprocessSpec& spec);

}  // namespace slicevoco
