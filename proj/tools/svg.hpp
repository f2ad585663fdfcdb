#pragma once

#include <string>
#include <utility>
#include <vector>

namespace rohydr::cli {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (x, y), drawn in order
  std::size_t color = 0;  // palette index
  bool dashed = false;
};

struct ChartSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
};

// Standalone SVG document with axes, ticks, labels and a legend.
std::string line_chart(const ChartSpec& chart);

std::string xml_escape(const std::string& text);

}  // namespace rohydr::cli
