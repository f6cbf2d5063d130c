// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "slicevoco/crops.hpp"
#include "slicevoco/errors.hpp"
#include "slicevoco/preprocess.hpp"
#include "slicevoco/rvol.hpp"
#include "slicevoco/synthetic.hpp"
#include "test_support.hpp"

using namespace slicevoco;
using slicevoco::fixtures::TempDir;

namespace {

VolumeGrid random_volume(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  std::uniform_real_distribution<float> hu(-1200.0f, 1500.0f);
  VolumeGrid v;
  v.voxels = Grid3<float>(Shape3{dim(rng), dim(rng), dim(rng)});
  for (auto& x : v.voxels.values()) x = hu(rng);
  v.spacing = {0.5 + (rng() % 100) / 40.0, 0.7, 0.7 + (rng() % 10) / 10.0};
  v.patient_id = "pt" + std::to_string(rng() % 100000);
  return v;
}

VolumeGrid constant_volume(Shape3 s, float hu) {
  VolumeGrid v;
  v.voxels = Grid3<float>(s, hu);
  return v;
}

PreprocessSpec no_crop(Shape3 target) {
  PreprocessSpec s;
  s.target_shape = target;
  s.foreground_crop = false;
  return s;
}

}  // namespace

TEST(Rvol, TwoByTwoByTwoZMajor) {
  VolumeGrid v;
  v.voxels = Grid3<float>(Shape3{2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  v.patient_id = "tiny";
  const VolumeGrid back = decode_rvol(encode_rvol(v));
  EXPECT_EQ(back, v);
  EXPECT_EQ(back.voxels(1, 0, 1), 5.0f);
  EXPECT_EQ(back.voxels(0, 1, 0), 2.0f);
}

TEST(Rvol, TruncatedPayload) {
  VolumeGrid v = constant_volume({2, 2, 2}, 3.0f);
  std::string bytes = encode_rvol(v);
  bytes.resize(bytes.size() - 5);
  try {
    decode_rvol(bytes);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated payload"), std::string::npos);
  }
}

TEST(Rvol, RejectsBadMagicAndNonFinite) {
  EXPECT_THROW(decode_rvol("NOPE\n{}\n"), DataError);
  VolumeGrid v = constant_volume({1, 1, 2}, 0.0f);
  v.voxels(0, 0, 1) = std::nanf("");
  EXPECT_THROW(decode_rvol(encode_rvol(v)), DataError);
  EXPECT_THROW(load_volume("/nonexistent/volume.rvol"), DataError);
}

TEST(Rvol, ByteIdenticalRoundTripOverRandomVolumes) {
  TempDir tmp("rvol");
  std::mt19937_64 rng(21);
  for (int i = 0; i < 50; ++i) {
    const VolumeGrid v = random_volume(rng);
    const auto p = tmp / ("v" + std::to_string(i) + ".rvol");
    write_volume(p, v);
    const std::string original = read_file(p);
    const VolumeGrid loaded = load_volume(p);
    EXPECT_EQ(loaded, v);
    write_volume(p, loaded);
    EXPECT_EQ(read_file(p), original);
  }
}

TEST(Rvol, AdapterDispatchByExtension) {
  TempDir tmp("adapter");
  const auto p = tmp / "scan.fake";
  std::ofstream(p) << "x";
  register_volume_adapter(".fake", [](const std::filesystem::path&) { return constant_volume({1, 2, 3}, 7.0f); });
  EXPECT_EQ(load_volume(p).voxels(0, 1, 2), 7.0f);
  clear_volume_adapters();
  EXPECT_THROW(load_volume(p), DataError);
}

TEST(Window, Examples) {
  PreprocessSpec spec = no_crop({1, 1, 5});
  VolumeGrid v;
  v.voxels = Grid3<float>(Shape3{1, 1, 5}, {50.0f, -150.0f, -400.0f, 250.0f, 150.0f});
  const SliceStack s = window_normalize(v, spec);
  EXPECT_DOUBLE_EQ(s.slices(0, 0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s.slices(0, 0, 1), 0.0);
  EXPECT_DOUBLE_EQ(s.slices(0, 0, 2), 0.0);
  EXPECT_DOUBLE_EQ(s.slices(0, 0, 3), 1.0);
  EXPECT_DOUBLE_EQ(s.slices(0, 0, 4), 0.75);
  spec.window_width = 0.0;
  EXPECT_THROW(window_normalize(v, spec), ConfigError);
}

TEST(Window, MonotoneInHu) {
  PreprocessSpec spec = no_crop({1, 1, 400});
  VolumeGrid v;
  v.voxels = Grid3<float>(Shape3{1, 1, 400});
  for (std::size_t i = 0; i < 400; ++i) v.voxels(0, 0, i) = -400.0f + 2.0f * static_cast<float>(i);
  const SliceStack s = window_normalize(v, spec);
  for (std::size_t i = 1; i < 400; ++i) EXPECT_LE(s.slices(0, 0, i - 1), s.slices(0, 0, i));
}

TEST(Resample, IdentityAndConstant) {
  const SliceStack in = slicevoco::fixtures::random_stack({4, 6, 5}, 3);
  EXPECT_EQ(resample_to(in, in.shape()).slices, in.slices);
  SliceStack flat;
  flat.slices = Grid3<float>(Shape3{3, 7, 7}, 0.375f);
  for (const Shape3& t : {Shape3{5, 9, 4}, Shape3{1, 1, 1}, Shape3{3, 20, 2}}) {
    const SliceStack out = resample_to(flat, t);
    EXPECT_EQ(out.shape(), t);
    for (float v : out.slices.values()) EXPECT_EQ(v, 0.375f);
    const SliceStack back = resample_to(out, flat.shape());
    EXPECT_EQ(back.slices, flat.slices);
  }
}

TEST(Resample, LinearRampPreservesEndpoints) {
  SliceStack ramp;
  ramp.slices = Grid3<float>(Shape3{1, 1, 11});
  for (std::size_t x = 0; x < 11; ++x) ramp.slices(0, 0, x) = static_cast<float>(x) / 10.0f;
  for (std::size_t w : {2u, 3u, 7u, 16u, 33u}) {
    const SliceStack out = resample_to(ramp, {1, 1, w});
    EXPECT_FLOAT_EQ(out.slices(0, 0, 0), 0.0f);
    EXPECT_FLOAT_EQ(out.slices(0, 0, w - 1), 1.0f);
    for (std::size_t x = 1; x < w; ++x) {
      EXPECT_LE(out.slices(0, 0, x - 1), out.slices(0, 0, x));
      const double expected = static_cast<double>(x) / static_cast<double>(w - 1);
      EXPECT_NEAR(out.slices(0, 0, x), expected, 1e-6);
    }
  }
}

TEST(Resample, StaysWithinInputRange) {
  const SliceStack in = slicevoco::fixtures::random_stack({3, 5, 4}, 9);
  float lo = 1.0f, hi = 0.0f;
  for (float v : in.slices.values()) lo = std::min(lo, v), hi = std::max(hi, v);
  const SliceStack out = resample_to(in, {7, 11, 13});
  for (float v : out.slices.values()) {
    EXPECT_GE(v, lo);
    EXPECT_LE(v, hi);
  }
  EXPECT_THROW(resample_to(in, {0, 2, 2}), ConfigError);
}

TEST(ForegroundCrop, AllAirIsFlagged) {
  const VolumeGrid air = constant_volume({4, 6, 6}, -1000.0f);
  const ForegroundCrop c = crop_foreground(air, -500.0, 0);
  EXPECT_TRUE(c.no_foreground);
  EXPECT_EQ(c.volume, air);
}

TEST(ForegroundCrop, PlantedBoxMatchesScanOracle) {
  VolumeGrid v = constant_volume({24, 64, 64}, -1000.0f);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> tissue(-400.0f, 300.0f);
  for (std::size_t z = 4; z <= 20; ++z) {
    for (std::size_t y = 8; y <= 56; ++y) {
      for (std::size_t x = 8; x <= 56; ++x) v.voxels(z, y, x) = tissue(rng);
    }
  }
  std::array<std::size_t, 3> lo{99, 99, 99}, hi{0, 0, 0};
  const Shape3 s = v.shape();
  for (std::size_t z = 0; z < s.z; ++z) {
    for (std::size_t y = 0; y < s.y; ++y) {
      for (std::size_t x = 0; x < s.x; ++x) {
        if (v.voxels(z, y, x) <= -500.0f) continue;
        const std::array<std::size_t, 3> p{z, y, x};
        for (int a = 0; a < 3; ++a) lo[a] = std::min(lo[a], p[a]), hi[a] = std::max(hi[a], p[a]);
      }
    }
  }
  const ForegroundCrop c = crop_foreground(v, -500.0, 0);
  EXPECT_FALSE(c.no_foreground);
  for (int a = 0; a < 3; ++a) {
    EXPECT_EQ(c.box.begin[a], lo[a]);
    EXPECT_EQ(c.box.end[a], hi[a] + 1);
  }
  EXPECT_EQ(c.box.begin, (std::array<std::size_t, 3>{4, 8, 8}));
  EXPECT_EQ(c.box.end, (std::array<std::size_t, 3>{21, 57, 57}));
  EXPECT_EQ(c.volume.shape(), (Shape3{17, 49, 49}));
  const ForegroundCrop m = crop_foreground(v, -500.0, 5);
  EXPECT_EQ(m.box.begin, (std::array<std::size_t, 3>{0, 3, 3}));
  EXPECT_EQ(m.box.end, (std::array<std::size_t, 3>{24, 62, 62}));
}

TEST(ForegroundCrop, ThresholdBelowMinimumKeepsEverything) {
  std::mt19937_64 rng(5);
  const VolumeGrid v = random_volume(rng);
  const ForegroundCrop c = crop_foreground(v, -5000.0, 0);
  EXPECT_FALSE(c.no_foreground);
  EXPECT_EQ(c.volume, v);
}

TEST(Preprocess, OutputShapeAndRange) {
  SyntheticSpec spec;
  spec.rng_seed = 3;
  const SliceStack s = preprocess_volume(generate_synthetic_volume(spec), PreprocessSpec::pretraining());
  EXPECT_EQ(s.shape(), (Shape3{32, 192, 192}));
  for (float v : s.slices.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_EQ(PreprocessSpec::downstream().target_shape, (Shape3{96, 256, 256}));
}

TEST(Synthetic, SameSeedIsBitwiseIdentical) {
  SyntheticSpec spec;
  spec.rng_seed = 99;
  EXPECT_EQ(generate_synthetic_volume(spec), generate_synthetic_volume(spec));
  SyntheticSpec other = spec;
  other.rng_seed = 100;
  EXPECT_NE(generate_synthetic_volume(spec), generate_synthetic_volume(other));
}

TEST(Synthetic, OutsideBodyIsAir) {
  SyntheticSpec spec;
  spec.num_blobs = 0;
  spec.rng_seed = 8;
  const VolumeGrid v = generate_synthetic_volume(spec);
  const Shape3 s = v.shape();
  for (std::size_t z = 0; z < s.z; ++z) {
    EXPECT_FLOAT_EQ(v.voxels(z, 0, 0), synth::kAirHu);
    EXPECT_FLOAT_EQ(v.voxels(z, s.y - 1, s.x - 1), synth::kAirHu);
  }
  // Centre voxel is tissue.
  EXPECT_GT(v.voxels(s.z / 2, s.y / 2, s.x / 2), -500.0f);
}

TEST(Synthetic, ColumnMeansFollowSeedIndependentSignPattern) {
  const CropGridSpec grid{4, 4, 16, 16, 64, 64};
  const auto cells = make_base_grid(grid);
  const PreprocessSpec pp = no_crop({16, 64, 64});
  std::vector<bool> reference;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SyntheticSpec spec;
    spec.rng_seed = seed;
    PreprocessSpec crop = pp;
    crop.foreground_crop = true;
    const SliceStack stack = preprocess_volume(generate_synthetic_volume(spec), crop);
    std::array<double, 4> col_mean{};
    for (std::size_t z = 0; z < stack.depth(); ++z) {
      for (std::size_t row = 1; row <= 2; ++row) {
        for (std::size_t col = 0; col < 4; ++col) {
          CropBox b = cells[row * 4 + col];
          b.slice_index = z;
          const Image2D patch = extract_patch(stack, b);
          double sum = 0.0;
          for (double v : patch.pixels) sum += v;
          col_mean[col] += sum / static_cast<double>(patch.pixels.size());
        }
      }
    }
    std::vector<bool> signs;
    for (std::size_t a = 0; a < 4; ++a) {
      for (std::size_t b = a + 1; b < 4; ++b) signs.push_back(col_mean[a] < col_mean[b]);
    }
    if (reference.empty()) reference = signs;
    EXPECT_EQ(signs, reference) << "seed " << seed;
    // Interior columns carry no air, so the mean shift alone orders them.
    EXPECT_LT(col_mean[0], col_mean[1]);
    EXPECT_LT(col_mean[1], col_mean[2]);
  }
  EXPECT_LT(position_mean_shift(0.2), position_mean_shift(0.8));
  EXPECT_DOUBLE_EQ(position_mean_shift(0.5), 0.0);
}

TEST(Synthetic, HealthyPatternPlantsNothing) {
  SyntheticSpec spec;
  spec.rng_seed = 12;
  const VolumeGrid plain = generate_synthetic_volume(spec);
  spec.injury_pattern = OrganLabelTriple{};
  const SyntheticStudy study = generate_synthetic_labeled_study(spec);
  EXPECT_EQ(study.volume, plain);
  EXPECT_EQ(study.labels, OrganLabelTriple{});
}

TEST(Synthetic, HighKidneyAnomalyAmplitude) {
  SyntheticSpec spec;
  spec.rng_seed = 31;
  spec.shape = {48, 96, 96};
  const VolumeGrid plain = generate_synthetic_volume(spec);
  for (InjuryLevel level : {InjuryLevel::low, InjuryLevel::high}) {
    OrganLabelTriple pattern;
    pattern.organs[0] = level;
    spec.injury_pattern = pattern;
    const SyntheticStudy study = generate_synthetic_labeled_study(spec);
    EXPECT_EQ(study.labels, pattern);
    double deepest = 0.0;
    std::array<std::size_t, 3> at{};
    const Shape3 s = plain.shape();
    for (std::size_t z = 0; z < s.z; ++z) {
      for (std::size_t y = 0; y < s.y; ++y) {
        for (std::size_t x = 0; x < s.x; ++x) {
          const double d = static_cast<double>(study.volume.voxels(z, y, x)) - plain.voxels(z, y, x);
          EXPECT_LE(d, 1e-3);
          if (d < deepest) deepest = d, at = {z, y, x};
        }
      }
    }
    const double amplitude = synth::kLesionAmplitudeHu[static_cast<std::size_t>(level)];
    EXPECT_LE(deepest, 0.9 * amplitude);
    EXPECT_GE(deepest, amplitude - 1e-3);
    const auto& c = study.organs[0].lesion_center;
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(static_cast<double>(at[a]), c[a], 1.5);
  }
}

TEST(Synthetic, PatternFrequenciesMatchPrior) {
  const std::array<double, 3> prior{0.5, 0.3, 0.2};
  std::array<std::array<int, 3>, kNumOrgans> counts{};
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    const auto t = sample_injury_pattern(static_cast<std::uint64_t>(i), prior);
    for (std::size_t o = 0; o < kNumOrgans; ++o) ++counts[o][static_cast<std::size_t>(t.class_of(o))];
  }
  for (std::size_t o = 0; o < kNumOrgans; ++o) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double sigma = std::sqrt(n * prior[c] * (1 - prior[c]));
      EXPECT_NEAR(counts[o][c], n * prior[c], 4 * sigma) << o << "," << c;
    }
  }
}

TEST(Labels, CsvRoundTrip) {
  TempDir tmp("labels");
  std::mt19937_64 rng(2);
  LabelTable labels;
  PredictionTable preds;
  for (int i = 0; i < 12; ++i) {
    labels["id" + std::to_string(i)] = slicevoco::fixtures::random_labels(rng);
    preds["id" + std::to_string(i)] = slicevoco::fixtures::random_prediction(rng);
  }
  write_labels_csv(tmp / "labels.csv", labels);
  EXPECT_EQ(read_labels_csv(tmp / "labels.csv"), labels);
  write_predictions_csv(tmp / "preds.csv", preds);
  const auto back = read_predictions_csv(tmp / "preds.csv");
  ASSERT_EQ(back.size(), preds.size());
  for (const auto& [id, p] : preds) {
    for (std::size_t c = 0; c < kNumColumns; ++c) EXPECT_NEAR(back.at(id).column(c), p.column(c), 5e-10);
  }
  EXPECT_EQ(column_name(0), "kidney_healthy");
  EXPECT_EQ(column_name(8), "spleen_high");
  EXPECT_THROW(parse_injury_level("medium"), DataError);
}
