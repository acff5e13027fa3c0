/*
 * Copyright (C) 2026 The popcal authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include "popcal/bands.hpp"
#include "popcal/summaries.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace popcal {

struct PlotStyle {
  int width = 640;
  int height = 400;
  int margin = 56;
  std::string band_fill = "#9ecae1";
  std::string median_stroke = "#08519c";
  std::string truth_stroke = "#d62728";
};

namespace svg {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
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

/// Maps data ranges to a panel at (x0, y0) of size (w, h).
struct Frame {
  double x0, y0, w, h;
  double xmin, xmax, ymin, ymax;

  double px(double x) const { return x0 + (xmax > xmin ? (x - xmin) / (xmax - xmin) : 0.5) * w; }
  double py(double y) const { return y0 + h - (ymax > ymin ? (y - ymin) / (ymax - ymin) : 0.5) * h; }
};

inline Frame make_frame(double x0, double y0, double w, double h, double xmin, double xmax, double ymin, double ymax) {
  if (ymax <= ymin) {
    const double pad = std::abs(ymin) > 0 ? 0.1 * std::abs(ymin) : 1.0;
    ymin -= pad;
    ymax += pad;
  }
  if (xmax <= xmin) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  return {x0, y0, w, h, xmin, xmax, ymin, ymax};
}

inline void axes(std::ostringstream& o, const Frame& f, const std::string& title, const std::string& xlabel) {
  o << "<rect x=\"" << num(f.x0) << "\" y=\"" << num(f.y0) << "\" width=\"" << num(f.w) << "\" height=\"" << num(f.h)
    << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = f.xmin + (f.xmax - f.xmin) * k / 4.0;
    const double yv = f.ymin + (f.ymax - f.ymin) * k / 4.0;
    o << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << num(f.y0 + f.h + 14)
      << "\" font-size=\"10\" text-anchor=\"middle\">" << tick(xv) << "</text>\n";
    o << "<text x=\"" << num(f.x0 - 4) << "\" y=\"" << num(f.py(yv) + 3)
      << "\" font-size=\"10\" text-anchor=\"end\">" << tick(yv) << "</text>\n";
  }
  o << "<text x=\"" << num(f.x0 + f.w / 2) << "\" y=\"" << num(f.y0 - 8)
    << "\" font-size=\"12\" text-anchor=\"middle\">" << escape(title) << "</text>\n";
  o << "<text x=\"" << num(f.x0 + f.w / 2) << "\" y=\"" << num(f.y0 + f.h + 30)
    << "\" font-size=\"11\" text-anchor=\"middle\">" << escape(xlabel) << "</text>\n";
}

inline void polyline(std::ostringstream& o, const Frame& f, const std::vector<double>& x, const std::vector<double>& y,
                     const std::string& stroke, const std::string& extra = "") {
  o << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"1.5\"" << extra << " points=\"";
  for (std::size_t i = 0; i < x.size(); ++i) o << (i ? " " : "") << num(f.px(x[i])) << "," << num(f.py(y[i]));
  o << "\"/>\n";
}

inline std::string header(int w, int h) {
  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
    << " " << h << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  return o.str();
}

}  // namespace svg

/// Shaded band, median line and optional truth overlay.
inline std::string band_plot_svg(const BandTable& b, const std::string& title, const std::string& xlabel,
                                 const PlotStyle& style = {}) {
  double ymin = kInf, ymax = -kInf;
  for (std::size_t i = 0; i < b.size(); ++i) {
    ymin = std::min({ymin, b.lower[i], b.median[i]});
    ymax = std::max({ymax, b.upper[i], b.median[i]});
    if (b.truth) {
      ymin = std::min(ymin, (*b.truth)[i]);
      ymax = std::max(ymax, (*b.truth)[i]);
    }
  }
  if (b.size() == 0) ymin = 0.0, ymax = 1.0;
  const double xmin = b.size() ? b.grid.front() : 0.0, xmax = b.size() ? b.grid.back() : 1.0;
  const double m = style.margin;
  const auto f = svg::make_frame(m, m * 0.6, style.width - 1.4 * m, style.height - 1.6 * m, xmin, xmax, ymin, ymax);
  std::ostringstream o;
  o << svg::header(style.width, style.height);
  o << "<polygon fill=\"" << style.band_fill << "\" fill-opacity=\"0.6\" stroke=\"none\" points=\"";
  for (std::size_t i = 0; i < b.size(); ++i) o << (i ? " " : "") << svg::num(f.px(b.grid[i])) << "," << svg::num(f.py(b.upper[i]));
  for (std::size_t i = b.size(); i-- > 0;) o << " " << svg::num(f.px(b.grid[i])) << "," << svg::num(f.py(b.lower[i]));
  o << "\"/>\n";
  svg::polyline(o, f, b.grid, b.median, style.median_stroke);
  if (b.truth) svg::polyline(o, f, b.grid, *b.truth, style.truth_stroke, " stroke-dasharray=\"5,3\"");
  svg::axes(o, f, title, xlabel);
  o << "</svg>\n";
  return o.str();
}

/// Small multiples of marginal posterior densities (KDE of retained draws),
/// with optional vertical lines at true values.
inline std::string posterior_panels_svg(const std::vector<std::string>& names, const Eigen::MatrixXd& samples,
                                        const std::optional<std::vector<double>>& truth = std::nullopt,
                                        const PlotStyle& style = {}) {
  const std::size_t d = names.size();
  const std::size_t cols = std::min<std::size_t>(d, 3);
  const std::size_t rows = d == 0 ? 1 : (d + cols - 1) / cols;
  const int pw = 260, ph = 190;
  const int width = static_cast<int>(std::max<std::size_t>(cols, 1)) * pw, height = static_cast<int>(rows) * ph;
  std::ostringstream o;
  o << svg::header(width, height);
  for (std::size_t j = 0; j < d; ++j) {
    const auto col = samples.col(static_cast<Eigen::Index>(j));
    std::vector<double> v(col.data(), col.data() + col.size());
    double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
    if (truth) lo = std::min(lo, (*truth)[j]), hi = std::max(hi, (*truth)[j]);
    std::vector<double> grid, dens;
    const double sd = v.size() > 1 ? sample_sd(v) : 0.0;
    if (hi > lo && sd > 0.0) {
      grid = linear_grid(lo, hi, 120);
      dens = gaussian_kde(v, grid);
    } else {
      grid = {lo - 0.5, lo, lo + 0.5};
      dens = {0.0, 1.0, 0.0};
    }
    const double ymax = *std::max_element(dens.begin(), dens.end());
    const double x0 = static_cast<double>(j % cols) * pw + 40, y0 = static_cast<double>(j / cols) * ph + 24;
    const auto f = svg::make_frame(x0, y0, pw - 56, ph - 64, grid.front(), grid.back(), 0.0, ymax);
    svg::polyline(o, f, grid, dens, style.median_stroke);
    if (truth) {
      const double xt = f.px((*truth)[j]);
      o << "<line x1=\"" << svg::num(xt) << "\" y1=\"" << svg::num(f.y0) << "\" x2=\"" << svg::num(xt) << "\" y2=\""
        << svg::num(f.y0 + f.h) << "\" stroke=\"" << style.truth_stroke << "\" stroke-dasharray=\"4,3\"/>\n";
    }
    svg::axes(o, f, names[j], "");
  }
  o << "</svg>\n";
  return o.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

}  // namespace popcal
