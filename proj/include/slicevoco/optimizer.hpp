// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "slicevoco/tensor.hpp"

namespace slicevoco {

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Gradients are clipped to this global L2 norm when > 0.
  double clip_norm = 0.0;

  bool operator==(const OptimizerConfig&) const = default;
};

void validate(const OptimizerConfig& config);
void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);
OptimizerKind parse_optimizer_kind(const std::string& text);
std::string to_string(OptimizerKind kind);

/// Plain SGD or Adam with bias correction. State is exportable for checkpoints
/// so a resumed run continues bit-for-bit.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, const ParameterSet& layout);

  void step(ParameterSet& params, const ParameterSet& grads);

  const OptimizerConfig& config() const noexcept { return config_; }
  std::int64_t steps_taken() const noexcept { return t_; }

  /// Moment arrays under "<prefix>m/" and "<prefix>v/" (Adam only).
  void export_state(ParameterSet& dst, nlohmann::json& extras, const std::string& prefix) const;
  void import_state(const ParameterSet& src, const nlohmann::json& extras, const std::string& prefix);

 private:
  OptimizerConfig config_;
  ParameterSet m_;
  ParameterSet v_;
  std::int64_t t_ = 0;
};

}  // namespace slicevoco
