// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/plots.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace slicevoco {

namespace {

constexpr double kWidth = 720.0;
constexpr double kHeight = 400.0;
constexpr double kLeft = 70.0;
constexpr double kRight = 150.0;
constexpr double kTop = 40.0;
constexpr double kBottom = 50.0;

constexpr std::array<const char*, 8> kPalette{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                              "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void header(std::ostringstream& o, const std::string& title) {
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
    << "</text>\n";
}

void y_axis(std::ostringstream& o, double lo, double hi, const std::string& label) {
  const double plot_h = kHeight - kTop - kBottom;
  o << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kHeight - kBottom
    << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    const double y = kHeight - kBottom - plot_h * k / 4.0;
    o << "<line x1=\"" << kLeft - 4 << "\" y1=\"" << num(y) << "\" x2=\"" << kWidth - kRight << "\" y2=\"" << num(y)
      << "\" stroke=\"#dddddd\"/>\n"
      << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << tick(v) << "</text>\n";
  }
  if (!label.empty()) {
    o << "<text transform=\"translate(16," << num(kTop + plot_h / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(label) << "</text>\n";
  }
}

void legend(std::ostringstream& o, const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = kTop + 18.0 * static_cast<double>(i);
    o << "<rect x=\"" << kWidth - kRight + 12 << "\" y=\"" << num(y) << "\" width=\"12\" height=\"12\" fill=\""
      << kPalette[i % kPalette.size()] << "\"/>\n"
      << "<text x=\"" << kWidth - kRight + 30 << "\" y=\"" << num(y + 10) << "\">" << escape(names[i]) << "</text>\n";
  }
}

}  // namespace

std::string bar_chart_svg(const std::string& title, const std::vector<BarGroup>& groups) {
  std::vector<std::string> labels;
  double hi = 0.0;
  for (const auto& g : groups) {
    for (const auto& b : g.bars) {
      if (std::find(labels.begin(), labels.end(), b.label) == labels.end()) labels.push_back(b.label);
      hi = std::max(hi, b.value + b.error);
    }
  }
  if (!(hi > 0.0)) hi = 1.0;
  std::ostringstream o;
  header(o, title);
  y_axis(o, 0.0, hi, "");
  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;
  const double slot = labels.empty() ? plot_w : plot_w / static_cast<double>(labels.size());
  const double bar_w = groups.empty() ? slot : 0.8 * slot / static_cast<double>(groups.size());
  for (std::size_t li = 0; li < labels.size(); ++li) {
    const double x0 = kLeft + slot * static_cast<double>(li) + 0.1 * slot;
    o << "<text x=\"" << num(kLeft + slot * (static_cast<double>(li) + 0.5)) << "\" y=\"" << kHeight - kBottom + 18
      << "\" text-anchor=\"middle\">" << escape(labels[li]) << "</text>\n";
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      for (const auto& b : groups[gi].bars) {
        if (b.label != labels[li]) continue;
        const double h = plot_h * b.value / hi;
        const double x = x0 + bar_w * static_cast<double>(gi);
        const double y = kHeight - kBottom - h;
        o << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(bar_w * 0.9) << "\" height=\""
          << num(h) << "\" fill=\"" << kPalette[gi % kPalette.size()] << "\"/>\n";
        if (b.error > 0.0) {
          const double cx = x + bar_w * 0.45;
          const double e = plot_h * b.error / hi;
          o << "<line x1=\"" << num(cx) << "\" y1=\"" << num(y - e) << "\" x2=\"" << num(cx) << "\" y2=\""
            << num(y + e) << "\" stroke=\"black\"/>\n";
        }
      }
    }
  }
  std::vector<std::string> names;
  for (const auto& g : groups) names.push_back(g.name);
  legend(o, names);
  o << "</svg>\n";
  return o.str();
}

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
  double x_lo = std::numeric_limits<double>::infinity();
  double x_hi = -x_lo;
  double y_lo = x_lo;
  double y_hi = -x_lo;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      x_lo = std::min(x_lo, x);
      x_hi = std::max(x_hi, x);
      y_lo = std::min(y_lo, y);
      y_hi = std::max(y_hi, y);
    }
  }
  if (!std::isfinite(x_lo)) x_lo = 0.0, x_hi = 1.0, y_lo = 0.0, y_hi = 1.0;
  if (x_hi == x_lo) x_hi = x_lo + 1.0;
  if (y_hi == y_lo) y_hi = y_lo + 1.0;
  std::ostringstream o;
  header(o, title);
  y_axis(o, y_lo, y_hi, y_label);
  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;
  o << "<line x1=\"" << kLeft << "\" y1=\"" << kHeight - kBottom << "\" x2=\"" << kWidth - kRight << "\" y2=\""
    << kHeight - kBottom << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = x_lo + (x_hi - x_lo) * k / 4.0;
    o << "<text x=\"" << num(kLeft + plot_w * k / 4.0) << "\" y=\"" << kHeight - kBottom + 16
      << "\" text-anchor=\"middle\">" << tick(v) << "</text>\n";
  }
  o << "<text x=\"" << num(kLeft + plot_w / 2) << "\" y=\"" << kHeight - 10 << "\" text-anchor=\"middle\">"
    << escape(x_label) << "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    o << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << kPalette[si % kPalette.size()] << "\" points=\"";
    for (const auto& [x, y] : series[si].points) {
      o << num(kLeft + plot_w * (x - x_lo) / (x_hi - x_lo)) << ','
        << num(kHeight - kBottom - plot_h * (y - y_lo) / (y_hi - y_lo)) << ' ';
    }
    o << "\"/>\n";
  }
  std::vector<std::string> names;
  for (const auto& s : series) names.push_back(s.name);
  legend(o, names);
  o << "</svg>\n";
  return o.str();
}

}  // namespace slicevoco
