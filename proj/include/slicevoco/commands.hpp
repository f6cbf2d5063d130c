// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "slicevoco/classifier.hpp"
#include "slicevoco/metrics.hpp"
#include "slicevoco/pretrain.hpp"
#include "slicevoco/synthetic.hpp"

namespace slicevoco {

inline constexpr const char* kVersion = "0.3.1";

/// True when SLICEVOCO_DETERMINISTIC=1 is set in the environment.
bool deterministic_env();

struct SynthOptions {
  std::filesystem::path out;
  std::size_t count = 32;
  std::uint64_t seed = 0;
  Shape3 shape{32, 64, 64};
  int num_blobs = 4;
  std::array<double, 3> class_prior{0.5, 0.3, 0.2};
  std::string id_prefix = "case";
};

/// N RVOL volumes plus labels.csv; study i uses seed mix(seed, i).
nlohmann::json cmd_synth(const SynthOptions& opt);

struct PretrainOptions {
  std::filesystem::path data;
  std::optional<std::filesystem::path> extra_unlabeled;
  std::filesystem::path out;
  PretrainConfig config{};
  PreprocessSpec preprocess = PreprocessSpec::pretraining();
  std::optional<std::filesystem::path> resume;
  bool prefetch = true;
  bool log_crops = false;
};

/// Loads and preprocesses every volume in `dir`, sorted by file name.
std::vector<SliceStack> load_pool(const std::filesystem::path& dir, const PreprocessSpec& spec);

nlohmann::json cmd_pretrain(const PretrainOptions& opt);

enum class InitMode { voco, scratch };
InitMode parse_init_mode(const std::string& text);
std::string to_string(InitMode m);

struct FinetuneOptions {
  std::filesystem::path data;
  std::filesystem::path out;
  InitMode init = InitMode::scratch;
  std::optional<std::filesystem::path> ssl_checkpoint;
  ClassifierConfig config{};
  PreprocessSpec preprocess = PreprocessSpec::downstream();
  std::uint64_t split_seed = 0;
  /// Use only this many training studies (after the split); 0 = all.
  std::size_t label_budget = 0;
  bool oof = false;
};

/// Labeled studies for every volume in `dir` that appears in labels.csv.
std::vector<LabeledStudy> load_labeled(const std::filesystem::path& dir, const PreprocessSpec& spec);

nlohmann::json cmd_finetune(const FinetuneOptions& opt);

struct SelectThresholdsOptions {
  std::filesystem::path oof_predictions;
  std::filesystem::path labels;
  std::filesystem::path split;
  std::filesystem::path out;  // thresholds JSON file
};

nlohmann::json thresholds_to_json(const Thresholds& t);
Thresholds thresholds_from_json(const nlohmann::json& j);

nlohmann::json cmd_select_thresholds(const SelectThresholdsOptions& opt);

struct EvaluateOptions {
  std::filesystem::path predictions;
  std::filesystem::path labels;
  std::optional<std::filesystem::path> thresholds;
  std::optional<std::filesystem::path> oof_predictions;
  std::optional<std::filesystem::path> split;
  WeightTable weights{};
  std::filesystem::path out;
};

/// Writes report.json and report.csv. Thresholds come from a file, or from
/// select_thresholds over out-of-fold predictions and the split.
EvaluationReport cmd_evaluate(const EvaluateOptions& opt);

struct CompareOptions {
  std::vector<std::pair<std::string, std::vector<std::filesystem::path>>> arms;
  std::vector<std::pair<std::string, std::vector<std::filesystem::path>>> curves;
  std::filesystem::path out;
};

struct ArmSummary {
  std::string name;
  std::size_t seeds = 0;
  MeanSd rsna;
  MeanSd map;
  MeanSd precision;
  MeanSd recall;
};

/// comparison.csv, comparison.txt, metrics.svg and (with curves) loss_curves.svg.
std::vector<ArmSummary> cmd_compare(const CompareOptions& opt);

/// "0.4133 ± 0.0068"
std::string format_mean_sd(const MeanSd& v, int decimals = 4);

struct BenchOptions {
  std::filesystem::path data;
  std::filesystem::path out;  // JSON file
  std::vector<std::size_t> batch_sizes{2, 4, 8};
  std::size_t steps = 5;
  std::size_t warmup = 1;
  PretrainConfig config{};
  PreprocessSpec preprocess = PreprocessSpec::pretraining();
};

nlohmann::json cmd_bench(const BenchOptions& opt);

/// JSON with keys sorted and no timestamps, written atomically.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace slicevoco
