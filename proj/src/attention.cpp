#include "aesb/attention.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace aesb {

std::string to_string(ChannelSelector s) {
  return s == ChannelSelector::peak_activation ? "peak" : "mean";
}

ChannelSelector parse_selector(const std::string& text) {
  if (text == "mean") return ChannelSelector::mean_activation;
  if (text == "peak") return ChannelSelector::peak_activation;
  throw ConfigError("unknown channel selector '" + text + "' (expected mean or peak)");
}

Plane normalize(const Plane& map) {
  const double lo = map.minCoeff();
  const double hi = map.maxCoeff();
  if (!(hi > lo)) return Plane::Zero(map.rows(), map.cols());
  return ((map.array() - lo) / (hi - lo)).matrix();
}

Index select_channel(const Tensor<double>& maps, ChannelSelector selector) {
  if (maps.batch() != 1) throw ShapeError("select_channel: expected a single sample");
  Index best = 0;
  double best_value = 0;
  for (Index c = 0; c < maps.channels(); ++c) {
    const auto plane = maps.plane(0, c);
    const double v = selector == ChannelSelector::mean_activation ? plane.mean() : plane.maxCoeff();
    if (c == 0 || v > best_value) {
      best = c;
      best_value = v;
    }
  }
  return best;
}

AttentionMaps extract(const Tensor<double>& maps, Index input_resolution,
                      ChannelSelector selector) {
  if (maps.size() == 0) throw DataError("attention: no last-layer feature maps available");
  if (maps.batch() != 1) {
    throw ShapeError("attention: expected maps for one image, got batch of " +
                     std::to_string(maps.batch()));
  }
  if (input_resolution <= 0) throw ShapeError("attention: unknown input resolution");

  AttentionMaps out;
  out.selector = selector;
  out.source_resolution = maps.height();
  out.selected_channel = select_channel(maps, selector);
  out.ffp_raw = maps.plane(0, out.selected_channel);
  out.air_raw = Plane::Zero(maps.height(), maps.width());
  for (Index c = 0; c < maps.channels(); ++c) out.air_raw += maps.plane(0, c);

  out.ffp = normalize(resize_bilinear(out.ffp_raw, input_resolution, input_resolution));
  out.air = normalize(resize_bilinear(out.air_raw, input_resolution, input_resolution));
  return out;
}

std::array<double, 3> colormap(double m) { return {m, 0.0, 1.0 - m}; }

RgbImage render_overlay(const RgbImage& image, const Plane& map, double alpha) {
  if (map.rows() != image.height() || map.cols() != image.width()) {
    throw ShapeError("render_overlay: map is " + std::to_string(map.rows()) + "x" +
                     std::to_string(map.cols()) + " but image is " +
                     std::to_string(image.height()) + "x" + std::to_string(image.width()));
  }
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("render_overlay: alpha must be in [0,1]");
  if ((map.array() < 0).any() || (map.array() > 1).any()) {
    throw DataError("render_overlay: map values must lie in [0,1]");
  }
  RgbImage out(image.height(), image.width());
  for (Index y = 0; y < image.height(); ++y) {
    for (Index x = 0; x < image.width(); ++x) {
      const auto color = colormap(map(y, x));
      for (int c = 0; c < 3; ++c) {
        out.channels[c](y, x) = (1.0 - alpha) * image.channels[c](y, x) + alpha * color[c];
      }
    }
  }
  return out;
}

void write_grid(const Plane& map, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write grid: " + path);
  char buf[32];
  for (Index y = 0; y < map.rows(); ++y) {
    for (Index x = 0; x < map.cols(); ++x) {
      std::snprintf(buf, sizeof buf, x == 0 ? "%.17g" : " %.17g", map(y, x));
      out << buf;
    }
    out << '\n';
  }
}

Plane read_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open grid: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::vector<double> row;
    double v = 0;
    while (ss >> v) row.push_back(v);
    if (!ss.eof()) throw FormatError(path + ": malformed grid row " + std::to_string(rows.size() + 1));
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw FormatError(path + ": ragged grid");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError(path + ": empty grid");
  Plane map(Index(rows.size()), Index(rows.front().size()));
  for (Index y = 0; y < map.rows(); ++y) {
    for (Index x = 0; x < map.cols(); ++x) map(y, x) = rows[y][x];
  }
  return map;
}

}  // namespace aesb
