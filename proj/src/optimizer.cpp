// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/optimizer.hpp"

#include <cmath>

#include "slicevoco/checkpoint.hpp"
#include "slicevoco/errors.hpp"

namespace slicevoco {

void validate(const OptimizerConfig& c) {
  if (!(c.learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0,1)");
  }
  if (!(c.epsilon > 0.0)) throw ConfigError("optimizer epsilon must be > 0");
  if (!(c.clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
}

OptimizerKind parse_optimizer_kind(const std::string& text) {
  if (text == "sgd") return OptimizerKind::sgd;
  if (text == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + text + "' (expected sgd or adam)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"kind", to_string(c.kind)}, {"learning_rate", c.learning_rate}, {"beta1", c.beta1},
       {"beta2", c.beta2},          {"epsilon", c.epsilon},             {"clip_norm", c.clip_norm}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  c.kind = parse_optimizer_kind(j.at("kind").get<std::string>());
  c.learning_rate = j.at("learning_rate").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.epsilon = j.at("epsilon").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
}

Optimizer::Optimizer(OptimizerConfig config, const ParameterSet& layout) : config_(config) {
  validate(config_);
  if (config_.kind == OptimizerKind::adam) {
    m_ = layout.zeros_like();
    v_ = layout.zeros_like();
  }
}

void Optimizer::step(ParameterSet& params, const ParameterSet& grads) {
  require_same_layout(params, grads, "optimizer step");
  double scale = 1.0;
  if (config_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& e : grads) {
      for (double g : e.tensor.data) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
  }
  ++t_;
  const double lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params.entry(i).tensor.data;
      const auto& g = grads.entry(i).tensor.data;
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * (scale * g[k]);
    }
    return;
  }
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.entry(i).tensor.data;
    const auto& g = grads.entry(i).tensor.data;
    auto& m = m_.entry(i).tensor.data;
    auto& v = v_.entry(i).tensor.data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = scale * g[k];
      m[k] = b1 * m[k] + (1.0 - b1) * gk;
      v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.epsilon);
    }
  }
}

void Optimizer::export_state(ParameterSet& dst, nlohmann::json& extras, const std::string& prefix) const {
  extras[prefix + "t"] = t_;
  if (config_.kind == OptimizerKind::adam) {
    append_prefixed(dst, m_, prefix + "m/");
    append_prefixed(dst, v_, prefix + "v/");
  }
}

void Optimizer::import_state(const ParameterSet& src, const nlohmann::json& extras, const std::string& prefix) {
  t_ = extras.at(prefix + "t").get<std::int64_t>();
  if (config_.kind == OptimizerKind::adam) {
    auto m = take_prefixed(src, prefix + "m/");
    auto v = take_prefixed(src, prefix + "v/");
    require_same_layout(m_, m, "optimizer state (m)");
    require_same_layout(v_, v, "optimizer state (v)");
    m_ = std::move(m);
    v_ = std::move(v);
  }
}

}  // namespace slicevoco
