// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "slicevoco/checkpoint.hpp"
#include "slicevoco/encoder.hpp"
#include "slicevoco/labels.hpp"
#include "slicevoco/metrics.hpp"
#include "slicevoco/optimizer.hpp"
#include "slicevoco/volume.hpp"

namespace slicevoco {

enum class Pooling { mean, last_states };
enum class FinetuneMode { full, frozen_backbone };

std::string to_string(Pooling p);
std::string to_string(FinetuneMode m);
Pooling parse_pooling(const std::string& text);
FinetuneMode parse_finetune_mode(const std::string& text);

struct ClassifierConfig {
  EncoderConfig encoder{};
  std::size_t hidden = 256;
  std::size_t layers = 1;
  Pooling pooling = Pooling::mean;
  /// Width of an optional tanh layer in each organ head; 0 = direct 3-logit head.
  std::size_t head_hidden = 0;
  FinetuneMode mode = FinetuneMode::full;
  WeightTable class_weights{};
  /// Multiplies each organ's cross-entropy term.
  std::array<double, kNumOrgans> organ_weights{1.0, 1.0, 1.0};
  OptimizerConfig optimizer{OptimizerKind::adam, 1e-3};
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;

  bool operator==(const ClassifierConfig&) const = default;
};

void validate(const ClassifierConfig& config);
void to_json(nlohmann::json& j, const ClassifierConfig& c);
void from_json(const nlohmann::json& j, ClassifierConfig& c);

/// T × F, one row per slice in stack order.
using SequenceFeatures = Matrix;

SequenceFeatures extract_sequence_features(const Encoder& encoder, const ParameterSet& params,
                                           const SliceStack& stack);
/// Same, but checks (T,H,W) against the downstream target shape first.
SequenceFeatures extract_sequence_features(const Encoder& encoder, const ParameterSet& params,
                                           const SliceStack& stack, const Shape3& expected);

/// Bi-LSTM + pooling + three organ heads over precomputed sequence features.
/// Parameter names:
///   lstm.l<k>.<fwd|bwd>.{W,U,b}   W: [4h, in], U: [4h, h], b: [4h], gate order i,f,g,o
///   head.<organ>.fc.{weight,bias} (head_hidden > 0)
///   head.<organ>.out.{weight,bias}
class SequenceClassifier {
 public:
  SequenceClassifier(ClassifierConfig config, std::size_t feature_dim);

  const ClassifierConfig& config() const noexcept { return config_; }
  std::size_t feature_dim() const noexcept { return feature_dim_; }

  /// Uniform(-1/sqrt(h), 1/sqrt(h)) LSTM weights, forget bias 1, fan-in normal heads.
  ParameterSet init_params(std::mt19937_64& rng) const;

  struct Output {
    std::array<std::array<double, kNumClasses>, kNumOrgans> logits{};
    StudyPrediction prediction;
  };

  Output forward(const ParameterSet& params, const SequenceFeatures& seq) const;

  /// Weighted cross-entropy of one study and its gradient. `d_seq` (T × F) is
  /// filled when non-null.
  double loss_and_grad(const ParameterSet& params, const SequenceFeatures& seq, const OrganLabelTriple& y,
                       ParameterSet& grads, SequenceFeatures* d_seq) const;

 private:
  ClassifierConfig config_;
  std::size_t feature_dim_;
};

/// Sum over organs of organ_weight * class_weight(y) * -ln p(y), with p clipped like the RSNA score.
double weighted_cross_entropy(const StudyPrediction& p, const OrganLabelTriple& y, const ClassifierConfig& config);

/// Backbone ("backbone.*") plus classifier parameters in one set.
struct DownstreamModel {
  ClassifierConfig config;
  ParameterSet params;
};

/// Backbone from `backbone_init` when given (SSL student), otherwise fresh from the config seed.
DownstreamModel make_downstream_model(const ClassifierConfig& config,
                                      const std::optional<ParameterSet>& backbone_init);

struct LabeledStudy {
  std::string patient_id;
  SliceStack stack;
  OrganLabelTriple labels;
};

struct FinetuneState {
  DownstreamModel model;
  Optimizer optimizer;
  std::int64_t step = 0;
};

FinetuneState make_finetune_state(DownstreamModel model);

/// One optimizer step on the mean loss of `batch`. In frozen_backbone mode the
/// backbone receives no gradient and stays bitwise unchanged.
double finetune_step(const Encoder& encoder, FinetuneState& state, std::span<const LabeledStudy* const> batch);

StudyPrediction predict_features(const DownstreamModel& model, const SequenceFeatures& seq);
StudyPrediction predict_stack(const Encoder& encoder, const DownstreamModel& model, const SliceStack& stack);
/// preprocess -> features -> classifier.
StudyPrediction predict_study(const Encoder& encoder, const DownstreamModel& model, const VolumeGrid& volume,
                              const PreprocessSpec& spec);

struct FinetuneEpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
};

struct FinetuneResult {
  FinetuneState state;
  std::vector<FinetuneEpochLog> log;
};

/// `epochs` passes over `studies` in a per-epoch shuffled order drawn from the config seed.
/// Frozen mode caches features once.
FinetuneResult run_finetune(DownstreamModel model, std::span<const LabeledStudy> studies,
                            const std::function<void(const FinetuneEpochLog&)>& on_epoch = {});

PredictionTable predict_all(const Encoder& encoder, const DownstreamModel& model,
                            std::span<const LabeledStudy> studies);

Checkpoint make_classifier_checkpoint(const DownstreamModel& model, const nlohmann::json& extras = {});
DownstreamModel restore_classifier_checkpoint(const Checkpoint& ckpt);

/// Loads the student backbone from an SSL checkpoint and checks it fits `encoder`.
ParameterSet load_ssl_backbone(const Checkpoint& ckpt, const EncoderConfig& encoder);

}  // namespace slicevoco
