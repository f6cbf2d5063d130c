// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "slicevoco/errors.hpp"

namespace slicevoco {

SliceStack window_normalize(const VolumeGrid& volume, const PreprocessSpec& spec) {
  if (!(spec.window_width > 0.0)) throw ConfigError("window_width must be > 0");
  const double lo = spec.window_center - spec.window_width / 2.0;
  SliceStack out{Grid3<float>(volume.shape()), volume.patient_id};
  auto src = volume.voxels.values();
  auto dst = out.slices.values();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double u = (static_cast<double>(src[i]) - lo) / spec.window_width;
    dst[i] = static_cast<float>(std::clamp(u, 0.0, 1.0));
  }
  return out;
}

namespace {

struct AxisSample {
  std::size_t i0;
  std::size_t i1;
  double frac;
};

std::vector<AxisSample> axis_samples(std::size_t in, std::size_t out) {
  std::vector<AxisSample> samples(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double pos = out == 1 ? (static_cast<double>(in) - 1.0) / 2.0
                                : static_cast<double>(i) * static_cast<double>(in - 1) /
                                      static_cast<double>(out - 1);
    auto i0 = static_cast<std::size_t>(std::floor(pos));
    i0 = std::min(i0, in - 1);
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    samples[i] = {i0, i1, pos - static_cast<double>(i0)};
  }
  return samples;
}

}  // namespace

SliceStack resample_to(const SliceStack& stack, const Shape3& target, Interpolation mode) {
  const Shape3 in = stack.shape();
  if (!in.positive()) throw DataError("cannot resample an empty stack");
  if (!target.positive()) throw ConfigError("target shape has a zero dimension: " + to_string(target));
  if (in == target) return stack;

  const auto zs = axis_samples(in.z, target.z);
  const auto ys = axis_samples(in.y, target.y);
  const auto xs = axis_samples(in.x, target.x);
  SliceStack out{Grid3<float>(target), stack.source_patient_id};
  const auto& g = stack.slices;

  for (std::size_t z = 0; z < target.z; ++z) {
    for (std::size_t y = 0; y < target.y; ++y) {
      for (std::size_t x = 0; x < target.x; ++x) {
        const auto& sz = zs[z];
        const auto& sy = ys[y];
        const auto& sx = xs[x];
        if (mode == Interpolation::nearest) {
          out.slices(z, y, x) = g(sz.frac < 0.5 ? sz.i0 : sz.i1, sy.frac < 0.5 ? sy.i0 : sy.i1,
                                  sx.frac < 0.5 ? sx.i0 : sx.i1);
          continue;
        }
        auto lerp = [](double a, double b, double t) { return t == 0.0 ? a : a + (b - a) * t; };
        auto row = [&](std::size_t zz, std::size_t yy) {
          return lerp(g(zz, yy, sx.i0), g(zz, yy, sx.i1), sx.frac);
        };
        auto plane = [&](std::size_t zz) { return lerp(row(zz, sy.i0), row(zz, sy.i1), sy.frac); };
        out.slices(z, y, x) = static_cast<float>(lerp(plane(sz.i0), plane(sz.i1), sz.frac));
      }
    }
  }
  return out;
}

VolumeGrid extract_box(const VolumeGrid& volume, const VoxelBox& box) {
  const Shape3 s{box.end[0] - box.begin[0], box.end[1] - box.begin[1], box.end[2] - box.begin[2]};
  VolumeGrid out{Grid3<float>(s), volume.spacing, volume.patient_id};
  for (std::size_t z = 0; z < s.z; ++z) {
    for (std::size_t y = 0; y < s.y; ++y) {
      for (std::size_t x = 0; x < s.x; ++x) {
        out.voxels(z, y, x) = volume.voxels(z + box.begin[0], y + box.begin[1], x + box.begin[2]);
      }
    }
  }
  return out;
}

ForegroundCrop crop_foreground(const VolumeGrid& volume, double hu_threshold, std::size_t margin) {
  const Shape3 s = volume.shape();
  std::array<std::size_t, 3> lo{s.z, s.y, s.x};
  std::array<std::size_t, 3> hi{0, 0, 0};
  bool found = false;
  for (std::size_t z = 0; z < s.z; ++z) {
    for (std::size_t y = 0; y < s.y; ++y) {
      for (std::size_t x = 0; x < s.x; ++x) {
        if (volume.voxels(z, y, x) > hu_threshold) {
          found = true;
          const std::array<std::size_t, 3> p{z, y, x};
          for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
          }
        }
      }
    }
  }
  const VoxelBox full{{0, 0, 0}, {s.z, s.y, s.x}};
  if (!found) return {volume, full, true};

  const std::array<std::size_t, 3> dims{s.z, s.y, s.x};
  VoxelBox box;
  for (int a = 0; a < 3; ++a) {
    box.begin[a] = lo[a] >= margin ? lo[a] - margin : 0;
    box.end[a] = std::min(hi[a] + 1 + margin, dims[a]);
  }
  if (box == full) return {volume, box, false};
  return {extract_box(volume, box), box, false};
}

SliceStack preprocess_volume(const VolumeGrid& volume, const PreprocessSpec& spec) {
  validate(spec);
  if (spec.foreground_crop) {
    auto cropped = crop_foreground(volume, spec.foreground_threshold, spec.foreground_margin);
    return resample_to(window_normalize(cropped.volume, spec), spec.target_shape);
  }
  return resample_to(window_normalize(volume, spec), spec.target_shape);
}

}  // namespace slicevoco
