// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "slicevoco/checkpoint.hpp"
#include "slicevoco/crops.hpp"
#include "slicevoco/encoder.hpp"
#include "slicevoco/objectives.hpp"
#include "slicevoco/optimizer.hpp"

namespace slicevoco {

struct StudentTeacherState {
  ParameterSet student;
  ParameterSet teacher;
  double momentum = 0.99;
  std::int64_t step = 0;
};

/// Fresh student from `seed`; teacher is an exact copy.
StudentTeacherState make_initial_state(const Encoder& encoder, std::uint64_t seed, double momentum);

/// teacher <- m*teacher + (1-m)*student, evaluated as fma(m, teacher, (1-m)*student).
/// Student untouched. Throws ConfigError on layout mismatch or m outside [0,1].
void ema_update(StudentTeacherState& state);

/// Crops of one patient for one step.
struct PatientCrops {
  std::string patient_id;
  std::size_t pool_index = 0;
  std::size_t slice_index = 0;
  std::vector<CropBox> grid;
  CropBox random_crop;
  std::vector<double> r;
  Image2D random_patch;
  std::vector<Image2D> base_patches;
};

struct PretrainBatch {
  std::vector<PatientCrops> patients;
};

nlohmann::json describe_batch(const PretrainBatch& batch, const CropGridSpec& grid);

/// P distinct patients, each with a uniformly chosen slice, the base grid, one
/// random crop and its overlap vector.
PretrainBatch assemble_batch(std::span<const SliceStack> volumes, const CropGridSpec& grid,
                             std::mt19937_64& rng, std::size_t patients,
                             OverlapMeasure measure = OverlapMeasure::iou);

struct PretrainConfig {
  std::int64_t steps = 500;
  std::size_t batch_patients = 4;
  OptimizerConfig optimizer{};
  double momentum = 0.99;
  LossWeights weights{};
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0 = only the final checkpoint
  OverlapMeasure overlap_measure = OverlapMeasure::iou;
  CropGridSpec grid{};
  EncoderConfig encoder{};
};

void validate(const PretrainConfig& config);
void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

/// Deterministic generator for step `step` of a run seeded with `seed`.
std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step);

struct StepLog {
  std::int64_t step = 0;
  LossBreakdown loss;
};

std::string to_json_line(const StepLog& log);

/// Loss and gradient w.r.t. the student, without touching any state.
struct PretrainGradients {
  LossBreakdown loss;
  ParameterSet grads;
};
PretrainGradients pretrain_loss_and_grad(const Encoder& encoder, const ParameterSet& student,
                                         const ParameterSet& teacher, const PretrainBatch& batch,
                                         const LossWeights& weights);

/// Optimizer update on the student, then EMA, then step += 1. Throws
/// NumericalError (with the batch as diagnostic) if the loss is not finite.
LossBreakdown pretrain_step(const Encoder& encoder, StudentTeacherState& state, Optimizer& optimizer,
                            const PretrainBatch& batch, const PretrainConfig& config);

Checkpoint make_pretrain_checkpoint(const StudentTeacherState& state, const Optimizer& optimizer,
                                    const PretrainConfig& config);
/// Restores state and optimizer; checks the stored encoder config matches.
StudentTeacherState restore_pretrain_checkpoint(const Checkpoint& ckpt, const PretrainConfig& config,
                                                Optimizer& optimizer);

struct PretrainRunOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoints + logs when set
  std::optional<Checkpoint> resume_from;
  bool prefetch = false;                         // assemble the next batch on a worker thread
  bool log_crops = false;                        // crops.jsonl debug log
  std::function<void(const StudentTeacherState&, const StepLog&)> on_step;
};

struct PretrainResult {
  StudentTeacherState state;
  std::vector<StepLog> log;
  double seconds = 0.0;
};

PretrainResult run_pretraining(const PretrainConfig& config, std::span<const SliceStack> pool,
                               const PretrainRunOptions& options = {});

/// Held-out probe of what pretraining learned: Spearman between cos(f_c, f_b_i)
/// and r_i over random crops, and how often argmax_i cos picks the cell a
/// cell-aligned crop coincides with.
struct OverlapProbe {
  double spearman = 0.0;
  double aligned_argmax_accuracy = 0.0;
  /// Largest Spearman any score could reach against these r values, given their ties.
  double spearman_ceiling = 0.0;
  std::size_t pairs = 0;
};

OverlapProbe probe_overlap_prediction(const Encoder& encoder, const ParameterSet& params,
                                      std::span<const SliceStack> volumes, const CropGridSpec& grid,
                                      std::size_t samples, std::uint64_t seed);

}  // namespace slicevoco
