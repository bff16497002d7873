#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "cfbench/data/dataset.hpp"
#include "cfbench/nn/layers.hpp"
#include "cfbench/nn/serialize.hpp"
#include "cfbench/scm/codec.hpp"
#include "cfbench/scm/types.hpp"

namespace cfbench::pred {

// Anti-causal predictors estimate an attribute from the image plus the
// attribute's child values. The role tag keeps the predictors used for
// effectiveness scoring distinct from the ones steering counterfactual
// fine-tuning; mixing them would let a model be graded by its own teacher.
enum class Role { evaluation, finetune_guidance };

std::string to_string(Role r);
Role role_from_string(const std::string& s);

struct PredictorSpec {
  std::string target;
  scm::VarKind target_kind = scm::VarKind::continuous;
  int categories = 0;                 // categorical targets
  std::vector<std::string> children;  // non-image children, conditioning inputs
  Role role = Role::evaluation;
  int height = 32, width = 32;
  int feature_dim = 64;
};

struct PredictorConfig {
  double lr = 1e-3;
  double weight_decay = 1e-2;
  int batch = 256;
  int max_epochs = 40;
  int patience = 10;
  uint64_t seed = 0;
  bool balanced_sampler = false;  // per-batch class balance for skewed targets
};

struct FitReport {
  double init_val_loss = 0.0;
  double best_val_loss = 0.0;
  double val_accuracy = 0.0;  // categorical targets only
  int epochs = 0;
  std::vector<double> curve;
};

struct Prediction {
  Eigen::VectorXd num;     // regression estimates
  Eigen::VectorXi cls;     // categorical argmax
  Eigen::MatrixXd probs;   // categorical class probabilities, rows sum to 1
};

// Index batches that draw near-equal counts from every class regardless of
// the marginal distribution, cycling each class's pool independently.
std::vector<std::vector<int>> balanced_batches(const std::vector<int>& labels, int categories,
                                               int batch, nn::Rng& rng);

// Shared convolutional backbone: four stride-2 blocks from the input image
// down to a feature vector.
class ConvTrunk {
 public:
  ConvTrunk() = default;
  ConvTrunk(const std::string& name, int height, int width, int in_channels, int feature_dim,
            nn::Rng& rng);

  int feature_dim() const { return feature_dim_; }
  nn::Var<float> features(nn::Graph<float>& g, nn::Var<float> images) const;
  void collect(nn::ParamList<float>& ps);

 private:
  std::vector<nn::Conv2d<float>> convs_;
  int height_ = 0, width_ = 0, feature_dim_ = 0;
};

class Predictor {
 public:
  Predictor() = default;
  Predictor(PredictorSpec spec, uint64_t seed);

  const PredictorSpec& spec() const { return spec_; }
  bool trained() const { return trained_; }

  FitReport fit(const data::Dataset& ds, const PredictorConfig& cfg);

  // images: [N, h*w]; children: one row per sample in spec().children order.
  Prediction predict(const nn::TensorF& images,
                     const std::vector<std::vector<scm::Value>>& children) const;

  // Mean loss toward the given targets plus its gradient with respect to the
  // input pixels; the steering signal for counterfactual fine-tuning.
  std::pair<double, nn::TensorF> loss_and_image_grad(
      const nn::TensorF& images, const std::vector<scm::Value>& targets,
      const std::vector<std::vector<scm::Value>>& children) const;

  // Penultimate trunk features, [N, feature_dim].
  nn::TensorF features(const nn::TensorF& images) const;

  void save(nn::Checkpoint& ck) const;
  static Predictor load(const nn::Checkpoint& ck);

 private:
  nn::Var<float> head_logits(nn::Graph<float>& g, const nn::TensorF& images,
                             const std::vector<std::vector<scm::Value>>& children,
                             bool needs_image_grad, nn::Var<float>* image_var) const;
  nn::TensorF encode_children(const std::vector<std::vector<scm::Value>>& children,
                              int64_t n) const;

  PredictorSpec spec_;
  ConvTrunk trunk_;
  nn::Dense<float> head_;
  scm::ParentCodec child_codec_;
  double target_mean_ = 0.0, target_std_ = 1.0;  // regression standardization
  bool trained_ = false;
};

// Multi-task feature extractor: one trunk with a head per attribute, trained
// jointly so the features carry every generative factor. Used for perceptual
// distances and image-distribution statistics.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(const data::Dataset& ds, int feature_dim, uint64_t seed);

  int feature_dim() const { return trunk_.feature_dim(); }
  bool trained() const { return trained_; }
  const std::string& id() const { return id_; }

  FitReport fit(const data::Dataset& ds, const PredictorConfig& cfg);
  nn::TensorF features(const nn::TensorF& images) const;

  void save(nn::Checkpoint& ck) const;
  static FeatureExtractor load(const nn::Checkpoint& ck);

 private:
  struct Head {
    std::string attr;
    scm::VarKind kind = scm::VarKind::continuous;
    int categories = 0;
    double mean = 0.0, stddev = 1.0;
    nn::Dense<float> dense;
  };

  ConvTrunk trunk_;
  std::vector<Head> heads_;
  int height_ = 0, width_ = 0;
  std::string id_;
  bool trained_ = false;
};

}  // namespace cfbench::pred
