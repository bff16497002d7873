#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cfbench/common.hpp"
#include "cfbench/nn/tensor.hpp"

namespace cfbench::scm {

enum class VarKind { continuous, categorical, image };

std::string to_string(VarKind k);
VarKind var_kind_from_string(const std::string& s);

struct VariableSpec {
  std::string name;
  VarKind kind = VarKind::continuous;
  int categories = 0;  // categorical only
  int height = 0, width = 0, channels = 0;  // image only
  std::vector<std::string> parents;

  int image_numel() const { return height * width * channels; }
};

using Image = nn::Tensor<float>;

// Tagged value; accessors validate the kind so mixups fail loudly instead of
// reading a stale union member.
class Value {
 public:
  static Value number(double v) {
    Value x;
    x.kind_ = VarKind::continuous;
    x.num_ = v;
    return x;
  }
  static Value category(int c) {
    Value x;
    x.kind_ = VarKind::categorical;
    x.cat_ = c;
    return x;
  }
  static Value image(Image img) {
    Value x;
    x.kind_ = VarKind::image;
    x.img_ = std::move(img);
    return x;
  }

  VarKind kind() const { return kind_; }
  double num() const {
    if (kind_ != VarKind::continuous) throw ValidationError("value is not continuous");
    return num_;
  }
  int cat() const {
    if (kind_ != VarKind::categorical) throw ValidationError("value is not categorical");
    return cat_;
  }
  const Image& img() const {
    if (kind_ != VarKind::image) throw ValidationError("value is not an image");
    return img_;
  }

 private:
  VarKind kind_ = VarKind::continuous;
  double num_ = 0.0;
  int cat_ = 0;
  Image img_;
};

using Observation = std::map<std::string, Value>;

// Exogenous noise for one variable. Which fields are meaningful depends on
// the mechanism family that produced the payload.
struct NoisePayload {
  enum class Tag { scalar, gumbel, latent_stack, latent_vector };
  Tag tag = Tag::scalar;

  double eps = 0.0;                  // scalar: flow noise
  Eigen::VectorXd gumbels;           // gumbel: per-category noise g, argmax(logits+g) = class
  std::vector<nn::TensorF> latents;  // latent_stack: per-group z, top to bottom
  nn::TensorF pixel_eps;             // latent_stack: standardized pixel residual
  bool has_pixel_eps = false;
  nn::TensorF latent;                // latent_vector: single encoder output
};

using NoiseRecord = std::map<std::string, NoisePayload>;

struct InterventionSet {
  std::map<std::string, Value> targets;

  bool empty() const { return targets.empty(); }
  bool contains(const std::string& name) const { return targets.count(name) > 0; }
};

struct AbductOptions {
  enum class LatentMode { mean, sample };
  // carry keeps the pixel residual in the payload; reset drops it so
  // prediction regenerates from the decoder mean.
  enum class PixelNoise { carry, reset };

  LatentMode latent_mode = LatentMode::mean;
  PixelNoise pixel_noise = PixelNoise::carry;
  uint64_t seed = 0;  // used only by LatentMode::sample
};

}  // namespace cfbench::scm
