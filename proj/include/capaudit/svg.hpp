#pragma once

// Minimal SVG bar charts with confidence whiskers. Output depends only on
// the input values, so figures are byte-stable.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "capaudit/util.hpp"

namespace capaudit::svg {

struct Bar {
  std::string label;
  double value = 0.0;
  double lo = std::nan("");  // whisker ends; NaN draws no whisker
  double hi = std::nan("");
};

struct Group {
  std::string name;
  std::vector<Bar> bars;
};

inline std::string escape(std::string_view s) {
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

inline std::string num(double v) { return fixed(v, 2); }

// Grouped vertical bars. Groups are separated by a gap and labelled below
// the axis; every bar carries its own rotated label.
inline std::string bar_chart(const std::string& title, const std::string& y_label,
                             const std::vector<Group>& groups) {
  constexpr double kBarW = 18, kGap = 6, kGroupGap = 24, kLeft = 70, kTop = 40, kPlotH = 260;
  constexpr double kBottom = 140;
  double lo = 0.0, hi = 0.0;
  std::size_t n_bars = 0;
  for (const auto& g : groups)
    for (const auto& b : g.bars) {
      ++n_bars;
      for (double v : {b.value, b.lo, b.hi})
        if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
    }
  if (hi - lo < 1e-12) hi = lo + 1.0;
  const double pad = 0.05 * (hi - lo);
  lo = lo < 0 ? lo - pad : lo;
  hi += pad;
  const double plot_w = std::max(200.0, n_bars * (kBarW + kGap) +
                                            (groups.empty() ? 0 : (groups.size() - 1) * kGroupGap) + kGap);
  const double width = kLeft + plot_w + 20, height = kTop + kPlotH + kBottom;
  auto y = [&](double v) { return kTop + kPlotH * (hi - v) / (hi - lo); };

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"" +
       num(height) + "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  s += "<text x=\"" + num(width / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" +
       escape(title) + "</text>\n";
  s += "<text transform=\"translate(16," + num(kTop + kPlotH / 2) +
       ") rotate(-90)\" text-anchor=\"middle\">" + escape(y_label) + "</text>\n";
  // Axis ticks at five evenly spaced values.
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    s += "<line x1=\"" + num(kLeft - 4) + "\" x2=\"" + num(kLeft + plot_w) + "\" y1=\"" + num(y(v)) +
         "\" y2=\"" + num(y(v)) + "\" stroke=\"#ddd\"/>\n";
    s += "<text x=\"" + num(kLeft - 6) + "\" y=\"" + num(y(v) + 3) + "\" text-anchor=\"end\">" +
         num(v) + "</text>\n";
  }
  s += "<line x1=\"" + num(kLeft) + "\" x2=\"" + num(kLeft + plot_w) + "\" y1=\"" + num(y(0)) +
       "\" y2=\"" + num(y(0)) + "\" stroke=\"#000\"/>\n";

  double x = kLeft + kGap;
  for (const auto& g : groups) {
    const double gx0 = x;
    s += "<g class=\"group\" data-name=\"" + escape(g.name) + "\">\n";
    for (const auto& b : g.bars) {
      const double top = y(std::max(b.value, 0.0)), bottom = y(std::min(b.value, 0.0));
      s += "<rect x=\"" + num(x) + "\" y=\"" + num(top) + "\" width=\"" + num(kBarW) +
           "\" height=\"" + num(bottom - top) + "\" fill=\"#4c72b0\"><title>" + escape(b.label) +
           ": " + fmt(b.value) + "</title></rect>\n";
      if (std::isfinite(b.lo) && std::isfinite(b.hi)) {
        const double cx = x + kBarW / 2;
        s += "<path d=\"M" + num(cx) + " " + num(y(b.lo)) + "V" + num(y(b.hi)) + "M" + num(cx - 4) +
             " " + num(y(b.lo)) + "H" + num(cx + 4) + "M" + num(cx - 4) + " " + num(y(b.hi)) + "H" +
             num(cx + 4) + "\" stroke=\"#222\" fill=\"none\"/>\n";
      }
      s += "<text transform=\"translate(" + num(x + kBarW / 2 + 3) + "," + num(kTop + kPlotH + 8) +
           ") rotate(60)\">" + escape(b.label) + "</text>\n";
      x += kBarW + kGap;
    }
    s += "<text x=\"" + num((gx0 + x - kGap) / 2) + "\" y=\"" + num(height - 8) +
         "\" text-anchor=\"middle\" font-weight=\"bold\">" + escape(g.name) + "</text>\n";
    s += "</g>\n";
    x += kGroupGap;
  }
  s += "</svg>\n";
  return s;
}

}  // namespace capaudit::svg
