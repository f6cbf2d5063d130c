// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace slicevoco {

enum class InjuryLevel : int { healthy = 0, low = 1, high = 2 };

inline constexpr std::size_t kNumOrgans = 3;
inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::size_t kNumColumns = kNumOrgans * kNumClasses;

/// Column order used everywhere: kidney, liver, spleen.
inline constexpr std::array<std::string_view, kNumOrgans> kOrganNames{"kidney", "liver", "spleen"};
inline constexpr std::array<std::string_view, kNumClasses> kClassNames{"healthy", "low", "high"};

/// "kidney_healthy", ..., "spleen_high" in column order.
std::string column_name(std::size_t column);

std::string_view to_string(InjuryLevel level);
InjuryLevel parse_injury_level(std::string_view text);

struct OrganLabelTriple {
  std::array<InjuryLevel, kNumOrgans> organs{InjuryLevel::healthy, InjuryLevel::healthy,
                                             InjuryLevel::healthy};

  InjuryLevel kidney() const noexcept { return organs[0]; }
  InjuryLevel liver() const noexcept { return organs[1]; }
  InjuryLevel spleen() const noexcept { return organs[2]; }
  int class_of(std::size_t organ) const noexcept { return static_cast<int>(organs[organ]); }

  bool operator==(const OrganLabelTriple&) const = default;
};

using LabelTable = std::map<std::string, OrganLabelTriple>;

/// Per-organ probabilities over (healthy, low, high).
struct StudyPrediction {
  std::array<std::array<double, kNumClasses>, kNumOrgans> probs{};

  /// Probability in column order (organ * 3 + class).
  double column(std::size_t c) const noexcept { return probs[c / kNumClasses][c % kNumClasses]; }
  OrganLabelTriple argmax() const;
  bool operator==(const StudyPrediction&) const = default;
};

using PredictionTable = std::map<std::string, StudyPrediction>;

/// CSV with header `patient_id,kidney,liver,spleen`; rows sorted by id on write.
void write_labels_csv(const std::filesystem::path& path, const LabelTable& labels);
LabelTable read_labels_csv(const std::filesystem::path& path);

/// CSV with header `patient_id,kidney_healthy,...,spleen_high`, 9 decimal digits.
void write_predictions_csv(const std::filesystem::path& path, const PredictionTable& preds);
PredictionTable read_predictions_csv(const std::filesystem::path& path);

}  // namespace slicevoco
