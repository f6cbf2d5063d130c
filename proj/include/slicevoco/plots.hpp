// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

namespace slicevoco {

struct Bar {
  std::string label;
  double value = 0.0;
  double error = 0.0;
};

struct BarGroup {
  std::string name;
  std::vector<Bar> bars;
};

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

/// Grouped bars with error whiskers, one group per arm. Plain SVG 1.1.
std::string bar_chart_svg(const std::string& title, const std::vector<BarGroup>& groups);

/// Polylines on shared linear axes.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);

}  // namespace slicevoco
