#pragma once

#include <vector>

#include "cfbench/nn/tensor.hpp"

namespace cfbench::data {

// Pixel-space estimates of stroke thickness and ink intensity. Thickness is
// twice the exact distance-to-background averaged over the stroke skeleton,
// computed on a 4x bilinear upsampling of the image so the half-max contour
// lands with sub-pixel accuracy. Intensity is the mean over the near-max
// core, where the stroke profile saturates.
struct GlyphMeasure {
  double thickness = 0.0;
  double intensity = 0.0;
};

// image: one grayscale image, any [h*w]-sized tensor. Throws when the image
// has no stroke to measure.
GlyphMeasure measure_glyph(const nn::TensorF& image, int h, int w);

// Foreground = value >= 0.5 * max(value).
std::vector<uint8_t> binarize_half_max(const nn::TensorF& image, int h, int w);

// Zhang-Suen thinning to a 1-pixel skeleton, in place.
void thin_zhang_suen(std::vector<uint8_t>& bin, int h, int w);

// Exact Euclidean distance from every foreground pixel to the nearest
// background pixel center (0 on background). Border pixels see an implicit
// background frame just outside the image.
std::vector<double> distance_to_background(const std::vector<uint8_t>& bin, int h, int w);

}  // namespace cfbench::data
