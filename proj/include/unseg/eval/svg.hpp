#pragma once

// Minimal SVG line plots for training curves.

#include <string>
#include <vector>

#include "unseg/data/image_io.hpp"

namespace unseg::eval {

struct CurveSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (epoch, value)
  std::string color = "#2266cc";
};

inline void write_curve_svg(const std::filesystem::path& path, const std::string& title,
                            const std::vector<CurveSeries>& series, double ymin = 0.0, double ymax = 1.0) {
  const int W = 560, H = 360, ml = 52, mr = 16, mt = 34, mb = 40;
  double xmin = 0, xmax = 1;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) xmax = std::max(xmax, x);
  auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin + 1e-12) * (W - ml - mr); };
  auto sy = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin + 1e-12) * (H - mt - mb); };

  std::string svg;
  char buf[256];
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(W) + "\" height=\"" +
         std::to_string(H) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof(buf), "<text x=\"%d\" y=\"20\" font-size=\"14\" font-family=\"sans-serif\">%s</text>\n",
                ml, title.c_str());
  svg += buf;
  // axes
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", ml, H - mb, W - mr, H - mb);
  svg += buf;
  std::snprintf(buf, sizeof(buf), "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", ml, mt, ml,
                H - mb);
  svg += buf;
  for (int i = 0; i <= 5; ++i) {
    const double y = ymin + (ymax - ymin) * i / 5.0;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%.1f\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"end\">%.2f"
                  "</text>\n",
                  ml - 6, sy(y) + 4, y);
    svg += buf;
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%d\" y1=\"%.1f\" x2=\"%d\" y2=\"%.1f\" stroke=\"#dddddd\"/>\n", ml, sy(y), W - mr,
                  sy(y));
    svg += buf;
  }
  int legend_y = mt + 4;
  for (const auto& s : series) {
    if (s.points.empty()) continue;
    std::string pts;
    for (const auto& [x, y] : s.points) {
      std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", sx(x), sy(y));
      pts += buf;
    }
    svg += "<polyline fill=\"none\" stroke=\"" + s.color + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%d\" font-size=\"11\" font-family=\"sans-serif\" fill=\"%s\">%s</text>\n",
                  W - mr - 180, legend_y, s.color.c_str(), s.label.c_str());
    svg += buf;
    legend_y += 14;
  }
  svg += "<text x=\"" + std::to_string((W - ml) / 2 + ml) + "\" y=\"" + std::to_string(H - 10) +
         "\" font-size=\"12\" font-family=\"sans-serif\" text-anchor=\"middle\">epoch</text>\n";
  svg += "</svg>\n";
  data::atomic_write(path, std::vector<unsigned char>(svg.begin(), svg.end()));
}

}  // namespace unseg::eval
