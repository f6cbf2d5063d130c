// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/synthetic.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "slicevoco/errors.hpp"
#include "slicevoco/hashing.hpp"

namespace slicevoco {

namespace {

// Organ layout in body-relative (w, by, bx) coordinates; order kidney, liver, spleen.
struct OrganTemplate {
  std::array<double, 3> center;
  std::array<double, 3> radius;
  double offset_hu;
};

constexpr std::array<OrganTemplate, kNumOrgans> kOrgans{{
    {{0.78, 0.66, 0.62}, {0.16, 0.09, 0.08}, 35.0},
    {{0.22, 0.40, 0.30}, {0.17, 0.16, 0.16}, 25.0},
    {{0.52, 0.36, 0.74}, {0.14, 0.10, 0.09}, 15.0},
}};

struct Blob {
  std::array<double, 3> center;
  std::array<double, 3> sigma;
  double amplitude;
};

double gaussian3(const std::array<double, 3>& p, const std::array<double, 3>& c,
                 const std::array<double, 3>& s) {
  double q = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = (p[a] - c[a]) / s[a];
    q += d * d;
  }
  return std::exp(-0.5 * q);
}

double ellipsoid_q(const std::array<double, 3>& p, const std::array<double, 3>& c,
                   const std::array<double, 3>& r) {
  double q = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = (p[a] - c[a]) / r[a];
    q += d * d;
  }
  return q;
}

SyntheticStudy build(const SyntheticSpec& spec, const OrganLabelTriple& pattern) {
  validate(spec);
  std::mt19937_64 rng(mix64(spec.rng_seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto jitter = [&](double scale) { return (2.0 * unit(rng) - 1.0) * scale; };

  // Body: elliptic cylinder, slightly tapered toward the first and last slices.
  const double cy = 0.5 + jitter(0.03);
  const double cx = 0.5 + jitter(0.03);
  const double ay = 0.40 + jitter(0.03);
  const double ax = 0.43 + jitter(0.03);

  SyntheticStudy study;
  std::array<std::array<double, 3>, kNumOrgans> organ_center{};
  std::array<std::array<double, 3>, kNumOrgans> lesion_center{};
  for (std::size_t o = 0; o < kNumOrgans; ++o) {
    for (int a = 0; a < 3; ++a) organ_center[o][a] = kOrgans[o].center[a] + jitter(0.03);
    for (int a = 0; a < 3; ++a) {
      lesion_center[o][a] = organ_center[o][a] + jitter(0.35 * kOrgans[o].radius[a]);
    }
  }

  std::vector<Blob> blobs(static_cast<std::size_t>(spec.num_blobs));
  for (auto& b : blobs) {
    b.center = {unit(rng), 0.15 + 0.7 * unit(rng), 0.15 + 0.7 * unit(rng)};
    const double s = 0.04 + 0.05 * unit(rng);
    b.sigma = {2.0 * s, s, s};
    b.amplitude = -30.0 + 60.0 * unit(rng);
  }

  const Shape3 shape = spec.shape;
  auto to_voxel = [&](const std::array<double, 3>& p) {
    return std::array<double, 3>{p[0] * static_cast<double>(shape.z) - 0.5,
                                 (cy - ay + 2.0 * ay * p[1]) * static_cast<double>(shape.y) - 0.5,
                                 (cx - ax + 2.0 * ax * p[2]) * static_cast<double>(shape.x) - 0.5};
  };
  auto to_voxel_extent = [&](const std::array<double, 3>& r) {
    return std::array<double, 3>{r[0] * static_cast<double>(shape.z),
                                 2.0 * ay * r[1] * static_cast<double>(shape.y),
                                 2.0 * ax * r[2] * static_cast<double>(shape.x)};
  };
  for (std::size_t o = 0; o < kNumOrgans; ++o) {
    study.organs[o].lesion_center = to_voxel(lesion_center[o]);
    study.organs[o].organ_center = to_voxel(organ_center[o]);
    study.organs[o].organ_radius = to_voxel_extent(kOrgans[o].radius);
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  Grid3<float> voxels(shape);
  for (std::size_t z = 0; z < shape.z; ++z) {
    const double w = (static_cast<double>(z) + 0.5) / static_cast<double>(shape.z);
    const double taper = 1.0 - 0.12 * (2.0 * w - 1.0) * (2.0 * w - 1.0);
    for (std::size_t y = 0; y < shape.y; ++y) {
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(shape.y);
      for (std::size_t x = 0; x < shape.x; ++x) {
        const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(shape.x);
        const double noise = normal(rng);
        const double ey = (v - cy) / (ay * taper);
        const double ex = (u - cx) / (ax * taper);
        if (ey * ey + ex * ex > 1.0) {
          voxels(z, y, x) = static_cast<float>(synth::kAirHu);
          continue;
        }
        const double by = (v - (cy - ay)) / (2.0 * ay);
        const double bx = (u - (cx - ax)) / (2.0 * ax);
        const std::array<double, 3> p{w, by, bx};

        double hu = synth::kTissueHu + position_mean_shift(bx);
        for (std::size_t o = 0; o < kNumOrgans; ++o) {
          if (ellipsoid_q(p, organ_center[o], kOrgans[o].radius) <= 1.0) hu += kOrgans[o].offset_hu;
          const auto level = static_cast<std::size_t>(pattern.organs[o]);
          if (level != 0) {
            std::array<double, 3> s{};
            for (int a = 0; a < 3; ++a) s[a] = synth::kLesionWidthFraction[level] * kOrgans[o].radius[a];
            hu += synth::kLesionAmplitudeHu[level] * gaussian3(p, lesion_center[o], s);
          }
        }
        for (const auto& b : blobs) hu += b.amplitude * gaussian3(p, b.center, b.sigma);
        hu += (synth::kNoiseBaseHu + synth::kNoiseGradientHu * by) * noise;
        voxels(z, y, x) = static_cast<float>(hu);
      }
    }
  }

  study.volume = VolumeGrid{std::move(voxels), spec.spacing, spec.patient_id};
  study.labels = pattern;
  return study;
}

}  // namespace

void validate(const SyntheticSpec& spec) {
  if (!spec.shape.positive()) throw ConfigError("synthetic shape must be >= 1 in every dimension");
  if (spec.num_blobs < 0) throw ConfigError("num_blobs must be >= 0");
  double total = 0.0;
  for (double p : spec.class_prior) {
    if (!(p >= 0.0)) throw ConfigError("class prior entries must be >= 0");
    total += p;
  }
  if (!(total > 0.0)) throw ConfigError("class prior must have positive mass");
  for (double s : spec.spacing) {
    if (!(s > 0.0)) throw ConfigError("synthetic spacing must be > 0");
  }
}

double position_mean_shift(double bx) { return synth::kMeanGradientHu * (bx - 0.5); }

OrganLabelTriple sample_injury_pattern(std::uint64_t seed, const std::array<double, 3>& prior) {
  std::mt19937_64 rng(mix64(seed ^ 0x6C6162656C73ULL));
  std::discrete_distribution<int> dist(prior.begin(), prior.end());
  OrganLabelTriple t;
  for (auto& level : t.organs) level = static_cast<InjuryLevel>(dist(rng));
  return t;
}

VolumeGrid generate_synthetic_volume(const SyntheticSpec& spec) {
  return build(spec, spec.injury_pattern.value_or(OrganLabelTriple{})).volume;
}

SyntheticStudy generate_synthetic_labeled_study(const SyntheticSpec& spec) {
  validate(spec);
  const auto pattern = spec.injury_pattern ? *spec.injury_pattern
                                           : sample_injury_pattern(spec.rng_seed, spec.class_prior);
  return build(spec, pattern);
}

}  // namespace slicevoco
