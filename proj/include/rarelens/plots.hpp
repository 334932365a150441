#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "rarelens/errors.hpp"
#include "rarelens/io.hpp"

namespace rarelens::plot {

// ---- 16-bit binary PGM ----------------------------------------------------

struct Gray16 {
  std::size_t width = 0, height = 0;
  std::vector<std::uint16_t> pixels;  // row-major
};

// Maps values in [0, 1] to 0..65535; anything outside is clamped.
inline std::uint16_t quantize(double v) {
  return static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
}

inline std::string encode_pgm(const Gray16& img) {
  if (img.pixels.size() != img.width * img.height) throw DimensionError("pgm pixel count differs from geometry");
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n65535\n";
  for (auto p : img.pixels) {
    out.push_back(static_cast<char>(p >> 8));  // big endian per the format
    out.push_back(static_cast<char>(p & 0xff));
  }
  return out;
}

inline Gray16 decode_pgm(const std::string& bytes, const std::string& what = "pgm") {
  std::istringstream in(bytes);
  std::string magic;
  Gray16 img;
  std::size_t maxval = 0;
  in >> magic >> img.width >> img.height >> maxval;
  if (!in || magic != "P5" || maxval != 65535) throw ChecksumError(what + ": not a 16-bit P5 graymap");
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() != offset + 2 * img.width * img.height) throw ChecksumError(what + ": truncated pixel data");
  for (std::size_t i = 0; i < img.width * img.height; ++i) {
    const auto hi = static_cast<unsigned char>(bytes[offset + 2 * i]);
    const auto lo = static_cast<unsigned char>(bytes[offset + 2 * i + 1]);
    img.pixels.push_back(static_cast<std::uint16_t>(hi << 8 | lo));
  }
  return img;
}

// ---- minimal SVG charts -----------------------------------------------------

struct Series {
  std::string label;
  std::vector<double> y;  // one value per x position
};

namespace detail {
inline const char* color(std::size_t i) {
  static const char* c[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
  return c[i % 7];
}
inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}
}  // namespace detail

// Line chart on a [0, 1] y axis.
inline std::string line_chart(const std::string& title, const std::string& x_label, const std::vector<double>& x,
                              const std::vector<Series>& series) {
  const double W = 640, H = 400, L = 60, R = 170, T = 40, B = 50;
  const double x0 = x.empty() ? 0.0 : x.front(), x1 = x.empty() ? 1.0 : std::max(x.back(), x0 + 1.0);
  auto px = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double v) { return H - B - v * (H - T - B); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    s << "<line x1=\"" << L << "\" x2=\"" << W - R << "\" y1=\"" << py(v) << "\" y2=\"" << py(v)
      << "\" stroke=\"#ddd\"/><text x=\"" << L - 8 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">"
      << detail::fmt(v) << "</text>\n";
  }
  for (double v : x)
    s << "<text x=\"" << px(v) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << detail::fmt(v) << "</text>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    s << "<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" << detail::color(k) << "\" points=\"";
    for (std::size_t i = 0; i < std::min(x.size(), series[k].y.size()); ++i) s << px(x[i]) << ',' << py(series[k].y[i]) << ' ';
    s << "\"/>\n";
    const double ly = T + 16 * static_cast<double>(k);
    s << "<rect x=\"" << W - R + 12 << "\" y=\"" << ly << "\" width=\"12\" height=\"3\" fill=\"" << detail::color(k)
      << "\"/><text x=\"" << W - R + 30 << "\" y=\"" << ly + 5 << "\">" << series[k].label << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// Grouped bars, one group per category, values in [0, 1].
inline std::string bar_chart(const std::string& title, const std::vector<std::string>& categories,
                             const std::vector<Series>& series) {
  const double W = 640, H = 400, L = 60, R = 150, T = 40, B = 60;
  const double group = (W - L - R) / std::max<std::size_t>(1, categories.size());
  const double bar = group * 0.8 / std::max<std::size_t>(1, series.size());
  auto py = [&](double v) { return H - B - std::clamp(v, 0.0, 1.0) * (H - T - B); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  for (int i = 0; i <= 4; ++i)
    s << "<line x1=\"" << L << "\" x2=\"" << W - R << "\" y1=\"" << py(i / 4.0) << "\" y2=\"" << py(i / 4.0)
      << "\" stroke=\"#ddd\"/><text x=\"" << L - 8 << "\" y=\"" << py(i / 4.0) + 4 << "\" text-anchor=\"end\">"
      << detail::fmt(i / 4.0) << "</text>\n";
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double gx = L + group * static_cast<double>(c) + group * 0.1;
    for (std::size_t k = 0; k < series.size(); ++k) {
      const double v = c < series[k].y.size() ? series[k].y[c] : 0.0;
      s << "<rect x=\"" << gx + bar * static_cast<double>(k) << "\" y=\"" << py(v) << "\" width=\"" << bar * 0.9
        << "\" height=\"" << H - B - py(v) << "\" fill=\"" << detail::color(k) << "\"/>\n";
    }
    s << "<text x=\"" << gx + group * 0.4 << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << categories[c]
      << "</text>\n";
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const double ly = T + 16 * static_cast<double>(k);
    s << "<rect x=\"" << W - R + 12 << "\" y=\"" << ly << "\" width=\"12\" height=\"10\" fill=\"" << detail::color(k)
      << "\"/><text x=\"" << W - R + 30 << "\" y=\"" << ly + 9 << "\">" << series[k].label << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace rarelens::plot
