// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "slicevoco/labels.hpp"

namespace slicevoco {

/// Per-class sample weights for the weighted log loss. The default follows the
/// RSNA 2023 abdominal trauma convention (healthy 1, low 2, high 4).
struct WeightTable {
  std::array<double, kNumClasses> weights{1.0, 2.0, 4.0};

  double operator[](std::size_t c) const noexcept { return weights[c]; }
  bool operator==(const WeightTable&) const = default;
};

void validate(const WeightTable& w);

inline constexpr double kProbabilityClip = 1e-15;

/// Probability of `c` after clipping to [1e-15, 1-1e-15].
double clipped(double p) noexcept;

/// Every prediction id must have a label; throws DataError listing the ones that don't.
void require_matching_ids(const PredictionTable& preds, const LabelTable& labels);

/// Per organ: sum_i w(y_i) * -ln p_i(y_i) / sum_i w(y_i).
std::array<double, kNumOrgans> rsna_organ_scores(const PredictionTable& preds, const LabelTable& labels,
                                                 const WeightTable& w);
/// Mean of the three organ scores.
double rsna_score(const PredictionTable& preds, const LabelTable& labels, const WeightTable& w);

/// Rank-based AP: descending scores, ties kept in input order. nullopt without positives.
std::optional<double> average_precision(std::span<const double> scores, std::span<const int> labels);

struct MapResult {
  double map = 0.0;
  std::array<std::optional<double>, kNumColumns> per_column{};
  std::vector<std::string> skipped_columns;
};

/// One-vs-rest AP over the 9 organ/class columns, averaged over evaluated columns.
MapResult mean_average_precision(const PredictionTable& preds, const LabelTable& labels);

using Thresholds = std::array<double, kNumColumns>;

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  std::array<double, kNumColumns> per_column_precision{};
  std::array<double, kNumColumns> per_column_recall{};
  std::vector<std::string> no_predicted_positive;
  std::vector<std::string> no_actual_positive;
};

struct ColumnCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

/// Macro average of per-column counts; 0 where a denominator is 0.
PrecisionRecall macro_from_counts(std::span<const ColumnCounts> counts);

/// Binarize p >= threshold per column, then macro-average over the 9 columns.
PrecisionRecall macro_precision_recall(const PredictionTable& preds, const LabelTable& labels,
                                       const Thresholds& thresholds);

struct SplitPlan {
  std::uint64_t seed = 0;
  std::size_t folds = 5;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::map<std::string, std::size_t> fold_of;  // train ids only

  std::vector<std::string> fold_members(std::size_t fold) const;
};

void to_json(nlohmann::json& j, const SplitPlan& p);
void from_json(const nlohmann::json& j, SplitPlan& p);

/// Hash-ranked 80/20 split and balanced folds. Depends only on (ids, seed).
SplitPlan make_split(std::span<const std::string> patient_ids, std::uint64_t seed,
                     double test_fraction = 0.2, std::size_t folds = 5);

/// Lowest grid threshold k/100 maximizing F1 = 2TP / (2TP + FP + FN).
double best_f1_threshold(std::span<const double> scores, std::span<const int> labels);

/// Per column: best F1 threshold on each fold's out-of-fold predictions, averaged over the
/// folds that contain a positive for that column (0 when none does).
Thresholds select_thresholds(const PredictionTable& oof_preds, const LabelTable& labels, const SplitPlan& plan);

struct EvaluationReport {
  double rsna_score = 0.0;
  double map = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  std::array<double, kNumOrgans> organ_rsna{};
  std::array<std::optional<double>, kNumColumns> column_ap{};
  std::array<double, kNumColumns> column_precision{};
  std::array<double, kNumColumns> column_recall{};
  Thresholds thresholds{};
  WeightTable weights{};
  std::vector<std::string> skipped_columns;
  std::vector<std::string> no_predicted_positive;
  std::size_t studies = 0;
  std::optional<std::uint64_t> split_seed;
  std::string test_ids_digest;
};

EvaluationReport evaluate_predictions(const PredictionTable& preds, const LabelTable& labels,
                                      const Thresholds& thresholds, const WeightTable& weights);

void to_json(nlohmann::json& j, const EvaluationReport& r);
void from_json(const nlohmann::json& j, EvaluationReport& r);
/// Header plus one data row (`patient_id` = ALL).
std::string report_csv(const EvaluationReport& r);

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
};

/// Sample standard deviation (n-1); sd is 0 for a single value.
MeanSd mean_sd(std::span<const double> values);

/// Pearson correlation of average ranks; 0 when either side is constant.
double spearman_correlation(std::span<const double> x, std::span<const double> y);

}  // namespace slicevoco
