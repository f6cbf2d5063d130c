// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace slicevoco {

/// Dense row-major array of doubles with an explicit shape.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0);

  std::size_t size() const noexcept { return data.size(); }
  std::span<double> values() noexcept { return data; }
  std::span<const double> values() const noexcept { return data; }

  bool operator==(const Tensor&) const = default;
};

std::size_t element_count(const std::vector<std::size_t>& shape);

struct NamedTensor {
  std::string name;
  Tensor tensor;

  bool operator==(const NamedTensor&) const = default;
};

/// Ordered, named collection of parameter arrays. Insertion order is the
/// canonical order used for serialization, optimizers and EMA.
class ParameterSet {
 public:
  ParameterSet() = default;

  Tensor& add(std::string name, Tensor tensor);

  bool contains(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t scalar_count() const;

  auto begin() noexcept { return entries_.begin(); }
  auto end() noexcept { return entries_.end(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  NamedTensor& entry(std::size_t i) { return entries_[i]; }
  const NamedTensor& entry(std::size_t i) const { return entries_[i]; }

  /// Same names and shapes, every value zero.
  ParameterSet zeros_like() const;

  /// True when names, order and shapes all agree.
  bool same_layout(const ParameterSet& other) const;

  void fill(double value);
  bool all_finite() const;

  bool operator==(const ParameterSet&) const = default;

 private:
  std::vector<NamedTensor> entries_;
};

/// Throws ConfigError when layouts differ, naming the first mismatch.
void require_same_layout(const ParameterSet& a, const ParameterSet& b, const char* context);

/// max |a - b| over all entries; layouts must match.
double max_abs_difference(const ParameterSet& a, const ParameterSet& b);

}  // namespace slicevoco
