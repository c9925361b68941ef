#pragma once

// Attention maps from the last convolutional layer.
//
// FFP: the most activated channel, upsampled to the input resolution and
//      min-max normalized.
// AIR: the sum over all channels, upsampled and min-max normalized.

#include <string>

#include "aesb/image.hpp"
#include "aesb/modelb.hpp"
#include "aesb/tensor.hpp"

namespace aesb {

enum class ChannelSelector {
  mean_activation,  // largest mean over the map (default)
  peak_activation,  // largest single value
};

std::string to_string(ChannelSelector s);
ChannelSelector parse_selector(const std::string& text);

struct AttentionMaps {
  Plane ffp;  // input resolution, values in [0,1]
  Plane air;  // input resolution, values in [0,1]
  Plane ffp_raw;  // selected channel at source resolution
  Plane air_raw;  // channel sum at source resolution
  Index selected_channel = 0;
  Index source_resolution = 0;
  ChannelSelector selector = ChannelSelector::mean_activation;
};

/// Min-max to [0,1]; a constant map becomes all zeros.
Plane normalize(const Plane& map);

/// Ties resolve to the lowest channel index.
Index select_channel(const Tensor<double>& maps, ChannelSelector selector);

/// `maps` must hold a single sample (1 x C x r x r).
AttentionMaps extract(const Tensor<double>& maps, Index input_resolution,
                      ChannelSelector selector = ChannelSelector::mean_activation);

template <typename Scalar>
AttentionMaps extract(const ForwardArtifacts<Scalar>& artifacts,
                      ChannelSelector selector = ChannelSelector::mean_activation) {
  return extract(artifacts.last_conv_maps.template cast<double>(), artifacts.input_resolution,
                 selector);
}

/// Blue (0) to red (1) ramp: (m, 0, 1 - m).
std::array<double, 3> colormap(double m);

/// out = (1 - alpha) * image + alpha * colormap(map), per pixel and channel.
RgbImage render_overlay(const RgbImage& image, const Plane& map, double alpha = 0.5);

/// Whitespace-separated text grid, one row per line, 17 significant digits.
void write_grid(const Plane& map, const std::string& path);
Plane read_grid(const std::string& path);

}  // namespace aesb
