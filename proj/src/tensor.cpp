// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "slicevoco/errors.hpp"

namespace slicevoco {

std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(std::vector<std::size_t> dims, double fill)
    : shape(std::move(dims)), data(element_count(shape), fill) {}

Tensor& ParameterSet::add(std::string name, Tensor tensor) {
  if (contains(name)) {
    throw ConfigError("duplicate parameter name '" + name + "'");
  }
  entries_.push_back({std::move(name), std::move(tensor)});
  return entries_.back().tensor;
}

bool ParameterSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const NamedTensor& e) { return e.name == name; });
}

Tensor& ParameterSet::at(const std::string& name) {
  for (auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw ConfigError("unknown parameter '" + name + "'");
}

const Tensor& ParameterSet::at(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw ConfigError("unknown parameter '" + name + "'");
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  for (const auto& e : entries_) out.add(e.name, Tensor(e.tensor.shape, 0.0));
  return out;
}

bool ParameterSet::same_layout(const ParameterSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name ||
        entries_[i].tensor.shape != other.entries_[i].tensor.shape) {
      return false;
    }
  }
  return true;
}

void ParameterSet::fill(double value) {
  for (auto& e : entries_) std::fill(e.tensor.data.begin(), e.tensor.data.end(), value);
}

bool ParameterSet::all_finite() const {
  for (const auto& e : entries_) {
    for (double v : e.tensor.data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

void require_same_layout(const ParameterSet& a, const ParameterSet& b, const char* context) {
  if (a.size() != b.size()) {
    throw ConfigError(std::string(context) + ": parameter count mismatch (" +
                      std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.entry(i);
    const auto& y = b.entry(i);
    if (x.name != y.name) {
      throw ConfigError(std::string(context) + ": parameter name mismatch '" + x.name + "' vs '" +
                        y.name + "'");
    }
    if (x.tensor.shape != y.tensor.shape) {
      throw ConfigError(std::string(context) + ": shape mismatch for '" + x.name + "'");
    }
  }
}

double max_abs_difference(const ParameterSet& a, const ParameterSet& b) {
  require_same_layout(a, b, "max_abs_difference");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.entry(i).tensor.data;
    const auto& y = b.entry(i).tensor.data;
    for (std::size_t k = 0; k < x.size(); ++k) worst = std::max(worst, std::abs(x[k] - y[k]));
  }
  return worst;
}

}  // namespace slicevoco
