#pragma once

#include <cstdint>

#include "cfbench/data/dataset.hpp"

namespace cfbench::data {

// Digit glyphs drawn as capsule strokes around seven-segment skeletons.
// The generative factors form a small causal model:
//   digit     ~ uniform over ten classes
//   thickness = 0.5 + Gamma(10, 0.25), resampled into [1.8, 5.0]
//   intensity = 0.25 + 0.7 * sigmoid(2 * thickness - 5 + 0.5 * eps)
// so stroke width drives ink intensity through a noisy monotone link.
struct GlyphParams {
  int digit = 0;
  double thickness = 3.0;
  double intensity = 0.8;
  double jx = 0.0, jy = 0.0;  // sub-pixel translation
};

// One grayscale image [1, h*w]; pixel = intensity * coverage, where coverage
// falls off linearly over one pixel at distance thickness/2 from the
// skeleton.
nn::TensorF render_glyph(const GlyphParams& p, int h, int w);

struct GlyphConfig {
  int n = 16667;
  uint64_t seed = 0;
  int height = 32, width = 32;
};

// Intensity link without its noise term, exposed for oracle checks.
double glyph_intensity(double thickness, double eps);

Dataset generate_glyphs(const GlyphConfig& cfg);

}  // namespace cfbench::data
