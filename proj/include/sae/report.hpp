#pragma once

// Minimal SVG line/scatter plots for training curves, sweeps and histograms.

#include <string>
#include <vector>

namespace sae {

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  bool markers = false;  // scatter instead of a polyline
};

struct PlotSpec {
  std::string title;
  std::string xlabel;
  std::string ylabel;
  bool log_x = false;
  bool log_y = false;
  int width = 640;
  int height = 420;
  std::vector<PlotSeries> series;
};

// Points that are non-finite (or non-positive on a log axis) are dropped.
std::string render_svg(const PlotSpec& spec);

}  // namespace sae
