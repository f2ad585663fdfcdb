#include "svg.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace rohydr::cli {

namespace {

constexpr double kWidth = 720, kHeight = 420;
constexpr double kLeft = 70, kRight = 220, kTop = 40, kBottom = 60;

constexpr std::array<const char*, 8> kPalette = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                                 "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

// Roughly five round-valued ticks covering [lo, hi].
std::vector<double> ticks(double lo, double hi) {
  const double span = hi - lo;
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    step = m * mag;
    if (span / step <= 6.0) break;
  }
  std::vector<double> out;
  for (double t = std::ceil(lo / step) * step; t <= hi + step * 1e-9; t += step) {
    out.push_back(std::abs(t) < step * 1e-9 ? 0.0 : t);
  }
  return out;
}

}  // namespace

std::string xml_escape(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string line_chart(const ChartSpec& chart) {
  double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo;
  double y_lo = x_lo, y_hi = -x_lo;
  for (const auto& s : chart.series) {
    for (auto [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      x_lo = std::min(x_lo, x);
      x_hi = std::max(x_hi, x);
      y_lo = std::min(y_lo, y);
      y_hi = std::max(y_hi, y);
    }
  }
  if (!std::isfinite(x_lo)) x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;
  if (x_hi - x_lo < 1e-12) x_lo -= 0.5, x_hi += 0.5;
  if (y_hi - y_lo < 1e-12) y_lo -= 0.5, y_hi += 0.5;
  const double pad = (y_hi - y_lo) * 0.05;
  y_lo -= pad;
  y_hi += pad;

  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto sx = [&](double x) { return kLeft + (x - x_lo) / (x_hi - x_lo) * pw; };
  auto sy = [&](double y) { return kTop + (y_hi - y) / (y_hi - y_lo) * ph; };

  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<title>" << xml_escape(chart.title) << "</title>\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << num(kLeft + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
    << xml_escape(chart.title) << "</text>\n";

  o << "<g class=\"axes\" stroke=\"#444\" fill=\"none\">\n"
    << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw << "\" y2=\""
    << kTop + ph << "\"/>\n"
    << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + ph
    << "\"/>\n</g>\n";

  o << "<g class=\"ticks\" fill=\"#222\">\n";
  for (double t : ticks(x_lo, x_hi)) {
    o << "<line x1=\"" << num(sx(t)) << "\" y1=\"" << kTop + ph << "\" x2=\"" << num(sx(t)) << "\" y2=\""
      << kTop + ph + 5 << "\" stroke=\"#444\"/>"
      << "<text x=\"" << num(sx(t)) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">"
      << tick_text(t) << "</text>\n";
  }
  for (double t : ticks(y_lo, y_hi)) {
    o << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << num(sy(t)) << "\" x2=\"" << kLeft << "\" y2=\""
      << num(sy(t)) << "\" stroke=\"#444\"/>"
      << "<line x1=\"" << kLeft << "\" y1=\"" << num(sy(t)) << "\" x2=\"" << kLeft + pw << "\" y2=\""
      << num(sy(t)) << "\" stroke=\"#eee\"/>"
      << "<text x=\"" << kLeft - 8 << "\" y=\"" << num(sy(t) + 4) << "\" text-anchor=\"end\">"
      << tick_text(t) << "</text>\n";
  }
  o << "</g>\n";

  o << "<text x=\"" << num(kLeft + pw / 2) << "\" y=\"" << kHeight - 15
    << "\" text-anchor=\"middle\">" << xml_escape(chart.x_label) << "</text>\n"
    << "<text transform=\"translate(18 " << num(kTop + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
    << xml_escape(chart.y_label) << "</text>\n";

  o << "<g class=\"series\" fill=\"none\" stroke-width=\"2\">\n";
  for (const auto& s : chart.series) {
    const char* color = kPalette[s.color % kPalette.size()];
    o << "<polyline stroke=\"" << color << '"' << (s.dashed ? " stroke-dasharray=\"6 3\"" : "")
      << " points=\"";
    bool first = true;
    for (auto [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      o << (first ? "" : " ") << num(sx(x)) << ',' << num(sy(y));
      first = false;
    }
    o << "\"><title>" << xml_escape(s.label) << "</title></polyline>\n";
  }
  o << "</g>\n";

  o << "<g class=\"legend\">\n";
  double ly = kTop + 8;
  for (const auto& s : chart.series) {
    const char* color = kPalette[s.color % kPalette.size()];
    const double lx = kLeft + pw + 16;
    o << "<line x1=\"" << num(lx) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(lx + 24) << "\" y2=\""
      << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\""
      << (s.dashed ? " stroke-dasharray=\"6 3\"" : "") << "/>"
      << "<text x=\"" << num(lx + 30) << "\" y=\"" << num(ly + 4) << "\">" << xml_escape(s.label)
      << "</text>\n";
    ly += 18;
  }
  o << "</g>\n</svg>\n";
  return o.str();
}

}  // namespace rohydr::cli
