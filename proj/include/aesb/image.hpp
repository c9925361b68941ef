#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "aesb/tensor.hpp"

namespace aesb {

using Plane = MatrixR<double>;

/// Planar RGB image with intensities in [0,1].
struct RgbImage {
  std::array<Plane, 3> channels;

  RgbImage() = default;
  RgbImage(Index height, Index width) {
    for (auto& c : channels) c = Plane::Zero(height, width);
  }
  Index height() const { return channels[0].rows(); }
  Index width() const { return channels[0].cols(); }
};

/// Bilinear resampling with half-pixel sample centers and edge clamping.
/// Interpolation is written in lerp form so constant inputs stay exact.
Plane resize_bilinear(const Plane& src, Index height, Index width);
RgbImage resize_bilinear(const RgbImage& src, Index height, Index width);

/// Decodes PNG or JPEG (chosen by signature bytes). 8-bit samples map to k/255.
RgbImage read_image(const std::string& path);

/// Writes an 8-bit RGB PNG; values are clamped to [0,1] and rounded.
void write_png(const RgbImage& image, const std::string& path);

inline std::uint8_t to_byte(double v) {
  const double c = v < 0 ? 0 : (v > 1 ? 1 : v);
  return std::uint8_t(c * 255.0 + 0.5);
}

}  // namespace aesb
