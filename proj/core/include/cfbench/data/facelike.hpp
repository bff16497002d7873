#pragma once

#include <cstdint>

#include "cfbench/data/dataset.hpp"

namespace cfbench::data {

// Schematic face-like portraits with four causally linked attributes:
//   gender ~ Bernoulli(0.5)
//   age    = 50 + 12 * eps, resampled into [20, 80]
//   beard  | gender, age: logit = -1.0 + 3.2 * male + 0.03 * (age - 50)
//   bald   | gender, age: logit = -3.4 + 1.8 * male + 0.06 * (age - 50)
// Rendering makes each attribute visible: head width tracks gender, ring
// wrinkles deepen with age, a beard darkens the chin, hair brightens the
// crown unless bald.
struct FaceParams {
  double age = 50.0;
  int gender = 0;  // 0 female, 1 male
  int beard = 0;
  int bald = 0;
  double jx = 0.0, jy = 0.0;    // sub-pixel translation
  uint64_t texture_seed = 0;    // per-sample skin noise
};

nn::TensorF render_face(const FaceParams& p, int h, int w);

struct FaceConfig {
  int n = 8000;
  uint64_t seed = 0;
  int height = 32, width = 32;
};

double beard_logit(int gender, double age);
double bald_logit(int gender, double age);

Dataset generate_facelike(const FaceConfig& cfg);

}  // namespace cfbench::data
