// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <span>
#include <vector>

namespace slicevoco {

/// Guard inside -log(1 - |d|): |d| is capped at 1 - kLossEpsilon, so a single
/// term never exceeds -log(1e-6) ≈ 13.8155.
inline constexpr double kLossEpsilon = 1e-6;

using Embedding = std::vector<double>;

/// a·b / (|a||b|) clamped to [-1, 1]. Throws std::invalid_argument on a zero norm
/// or size mismatch.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct CosineGrad {
  double value = 0.0;
  Embedding d_a;
  Embedding d_b;
};

/// Cosine plus its gradient w.r.t. both arguments.
CosineGrad cosine_with_grad(std::span<const double> a, std::span<const double> b);

struct ScalarGrad {
  double value = 0.0;
  std::vector<double> grad;
};

/// mean_i -log(1 - min(|r_i - sims_i|, 1-eps)). Gradient is w.r.t. sims; zero on the
/// |·| kink and where the cap engages.
ScalarGrad intra_loss_grad(std::span<const double> sims, std::span<const double> r);
double intra_loss(std::span<const double> sims, std::span<const double> r);

/// Same form between teacher and student similarities; gradient is w.r.t. the
/// student similarities only.
ScalarGrad inter_loss_grad(std::span<const double> teacher_sims, std::span<const double> student_sims);
double inter_loss(std::span<const double> teacher_sims, std::span<const double> student_sims);

struct RegLossGrad {
  double value = 0.0;
  std::vector<Embedding> grads;  // one per input embedding
};

/// Mean over unordered pairs i<j of |cos(b_i, b_j)|. Needs at least two embeddings.
RegLossGrad reg_loss_grad(std::span<const Embedding> base_embeddings);
double reg_loss(std::span<const Embedding> base_embeddings);

struct LossWeights {
  double intra = 1.0;
  double inter = 1.0;
  double reg = 1.0;
  bool operator==(const LossWeights&) const = default;
};

struct LossBreakdown {
  double intra = 0.0;
  double inter = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

/// Weighted sum; the breakdown keeps the unweighted parts. Throws NumericalError
/// on non-finite input and ConfigError on negative weights.
LossBreakdown total_loss(double intra, double inter, double reg, const LossWeights& weights = {});

}  // namespace slicevoco
