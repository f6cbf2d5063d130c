// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "slicevoco/labels.hpp"
#include "slicevoco/volume.hpp"

namespace slicevoco::fixtures {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Uniform [0,1) stack for encoder and classifier tests.
SliceStack random_stack(Shape3 shape, std::uint64_t seed);

Image2D random_image(std::size_t h, std::size_t w, std::mt19937_64& rng);

StudyPrediction one_hot_prediction(const OrganLabelTriple& y);

StudyPrediction random_prediction(std::mt19937_64& rng);

OrganLabelTriple random_labels(std::mt19937_64& rng);

}  // namespace slicevoco::fixtures
