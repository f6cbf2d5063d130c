// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "slicevoco/labels.hpp"
#include "slicevoco/volume.hpp"

namespace slicevoco {

/// Generator constants, in HU unless noted. Body-relative coordinates run 0..1
/// across the body's bounding box in-plane and 0..1 over the slices in z.
namespace synth {
inline constexpr double kAirHu = -1000.0;
inline constexpr double kTissueHu = 40.0;
/// Mean shift grows linearly left to right: kMeanGradientHu * (bx - 0.5).
inline constexpr double kMeanGradientHu = 240.0;
/// Noise standard deviation grows top to bottom: kNoiseBaseHu + kNoiseGradientHu * by.
inline constexpr double kNoiseBaseHu = 5.0;
inline constexpr double kNoiseGradientHu = 95.0;
/// Peak lesion offset indexed by InjuryLevel (healthy, low, high).
inline constexpr std::array<double, 3> kLesionAmplitudeHu{0.0, -90.0, -220.0};
/// Lesion Gaussian width as a fraction of the organ radius, per InjuryLevel.
inline constexpr std::array<double, 3> kLesionWidthFraction{0.0, 0.45, 0.7};
}  // namespace synth

struct SyntheticSpec {
  Shape3 shape{32, 64, 64};
  int num_blobs = 4;
  std::optional<OrganLabelTriple> injury_pattern;
  std::uint64_t rng_seed = 0;
  /// Per-organ class prior (healthy, low, high) used when no pattern is given.
  std::array<double, 3> class_prior{0.5, 0.3, 0.2};
  std::string patient_id = "synthetic";
  Spacing spacing{2.5, 0.8, 0.8};
};

void validate(const SyntheticSpec& spec);

/// Voxel-space centre of a planted lesion; present for every organ regardless
/// of its level so healthy and injured variants share all other content.
struct OrganPlacement {
  std::array<double, 3> lesion_center{};  // (z, y, x) voxel coordinates
  std::array<double, 3> organ_center{};
  std::array<double, 3> organ_radius{};
};

struct SyntheticStudy {
  VolumeGrid volume;
  OrganLabelTriple labels;
  std::array<OrganPlacement, kNumOrgans> organs;
};

VolumeGrid generate_synthetic_volume(const SyntheticSpec& spec);

/// Like generate_synthetic_volume, but the returned labels always agree with
/// the planted anomalies. Without a pattern, one is sampled from the seed.
SyntheticStudy generate_synthetic_labeled_study(const SyntheticSpec& spec);

/// Pattern drawn from the class prior with a stream derived from `seed`.
OrganLabelTriple sample_injury_pattern(std::uint64_t seed, const std::array<double, 3>& prior);

/// Expected mean HU shift of the position field at body-relative column bx.
double position_mean_shift(double bx);

}  // namespace slicevoco
