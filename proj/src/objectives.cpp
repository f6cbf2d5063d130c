// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "slicevoco/errors.hpp"

namespace slicevoco {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void require_finite(std::span<const double> xs, const char* what) {
  for (double x : xs) {
    if (std::isnan(x)) throw NumericalError(std::string(what) + ": NaN input");
  }
}

// -log(1 - min(|target - pred|, 1-eps)) and its derivative w.r.t. pred.
struct Term {
  double value;
  double d_pred;
};

Term guarded_log_term(double target, double pred) {
  const double diff = pred - target;
  const double gap = std::abs(diff);
  const double cap = 1.0 - kLossEpsilon;
  if (gap >= cap) return {-std::log(1.0 - cap), 0.0};
  const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
  return {-std::log(1.0 - gap), sign / (1.0 - gap)};
}

ScalarGrad mean_log_terms(std::span<const double> targets, std::span<const double> preds,
                          const char* what) {
  if (targets.size() != preds.size()) {
    throw std::invalid_argument(std::string(what) + ": length mismatch");
  }
  if (targets.empty()) throw std::invalid_argument(std::string(what) + ": empty input");
  require_finite(targets, what);
  require_finite(preds, what);
  const double n = static_cast<double>(preds.size());
  ScalarGrad out{0.0, std::vector<double>(preds.size())};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto t = guarded_log_term(targets[i], preds[i]);
    out.value += t.value;
    out.grad[i] = t.d_pred / n;
  }
  out.value /= n;
  return out;
}

}  // namespace

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: size mismatch");
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (!(na > 0.0) || !(nb > 0.0)) throw std::invalid_argument("cosine_similarity: zero-norm input");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

CosineGrad cosine_with_grad(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_with_grad: size mismatch");
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (!(na > 0.0) || !(nb > 0.0)) throw std::invalid_argument("cosine_with_grad: zero-norm input");
  const double raw = dot(a, b) / (na * nb);
  CosineGrad g{std::clamp(raw, -1.0, 1.0), Embedding(a.size()), Embedding(b.size())};
  const double inv = 1.0 / (na * nb);
  for (std::size_t i = 0; i < a.size(); ++i) {
    g.d_a[i] = b[i] * inv - raw * a[i] / (na * na);
    g.d_b[i] = a[i] * inv - raw * b[i] / (nb * nb);
  }
  return g;
}

ScalarGrad intra_loss_grad(std::span<const double> sims, std::span<const double> r) {
  return mean_log_terms(r, sims, "intra_loss");
}

double intra_loss(std::span<const double> sims, std::span<const double> r) {
  return intra_loss_grad(sims, r).value;
}

ScalarGrad inter_loss_grad(std::span<const double> teacher_sims, std::span<const double> student_sims) {
  return mean_log_terms(teacher_sims, student_sims, "inter_loss");
}

double inter_loss(std::span<const double> teacher_sims, std::span<const double> student_sims) {
  return inter_loss_grad(teacher_sims, student_sims).value;
}

RegLossGrad reg_loss_grad(std::span<const Embedding> base) {
  if (base.size() < 2) throw std::invalid_argument("reg_loss: needs at least two embeddings");
  RegLossGrad out;
  out.grads.assign(base.size(), Embedding(base.front().size(), 0.0));
  const std::size_t n = base.size();
  const double pairs = static_cast<double>(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    require_finite(base[i], "reg_loss");
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto c = cosine_with_grad(base[i], base[j]);
      out.value += std::abs(c.value);
      const double sign = c.value > 0.0 ? 1.0 : (c.value < 0.0 ? -1.0 : 0.0);
      for (std::size_t k = 0; k < c.d_a.size(); ++k) {
        out.grads[i][k] += sign * c.d_a[k] / pairs;
        out.grads[j][k] += sign * c.d_b[k] / pairs;
      }
    }
  }
  out.value /= pairs;
  return out;
}

double reg_loss(std::span<const Embedding> base) { return reg_loss_grad(base).value; }

LossBreakdown total_loss(double intra, double inter, double reg, const LossWeights& w) {
  if (!std::isfinite(intra) || !std::isfinite(inter) || !std::isfinite(reg)) {
    throw NumericalError("total_loss: non-finite component");
  }
  if (!(w.intra >= 0.0) || !(w.inter >= 0.0) || !(w.reg >= 0.0)) {
    throw ConfigError("loss weights must be >= 0");
  }
  return {intra, inter, reg, w.intra * intra + w.inter * inter + w.reg * reg};
}

}  // namespace slicevoco
