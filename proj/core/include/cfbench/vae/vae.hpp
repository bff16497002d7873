#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cfbench/data/dataset.hpp"
#include "cfbench/nn/layers.hpp"
#include "cfbench/nn/optim.hpp"
#include "cfbench/nn/serialize.hpp"
#include "cfbench/pred/predictor.hpp"
#include "cfbench/scm/codec.hpp"
#include "cfbench/scm/mechanism.hpp"

namespace cfbench::vae {

// Floor applied to every emitted standard deviation. The counterfactual rule
// divides by sigma, so it must stay bounded away from zero.
constexpr float kSigmaMin = 1e-3f;

// Diagonal Gaussian over pixels: one mean and one stddev per pixel.
struct GaussianHead {
  nn::TensorF mu;     // [n, height*width]
  nn::TensorF sigma;  // [n, height*width], >= kSigmaMin
};

// One latent group emitted by the top-down pass.
struct LatentGroup {
  int resolution = 1;
  int channels = 0;
  nn::TensorF z;  // [n, channels*resolution*resolution]
};

// Ordered latent groups, coarsest resolution first. A single group at
// resolution one is the classic conditional VAE.
struct LatentStack {
  std::vector<LatentGroup> groups;
};

struct VaeSpec {
  std::string family = "vae";  // reported through the mechanism interface
  std::string dataset;
  int height = 32, width = 32;
  std::vector<std::string> parents;  // attribute names in graph order

  // Stochastic resolutions in ascending order; consecutive entries must be
  // 2x or 4x apart and the last must not exceed the image height. widths
  // aligns with resolutions and sets the top-down state channels.
  std::vector<int> resolutions = {1};
  std::vector<int> widths = {96};
  int blocks_per_resolution = 1;
  int latent_channels = 16;

  // Encoder channels along the chain height, height/2, ..., 1.
  std::vector<int> encoder_widths;
};

// Single-group conditional VAE: one 16-channel latent at resolution one.
VaeSpec vae_spec(const std::string& dataset, std::vector<std::string> parents,
                 int height = 32, int width = 32);

// Hierarchical preset: latent groups at resolutions {1,4,8,16,32} with two
// stochastic blocks each and 16 latent channels.
VaeSpec hvae_spec(const std::string& dataset, std::vector<std::string> parents,
                  int height = 32, int width = 32);

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 0.0;
  int batch = 128;
  int max_epochs = 50;
  int patience = 10;
  double beta = 1.0;
  double clip_norm = 0.0;  // 0 disables
  double skip_norm = 0.0;  // 0 disables
  int warmup_steps = 100;
  uint64_t seed = 0;
};

TrainConfig vae_train_defaults();
TrainConfig hvae_train_defaults();

// Evidence bound split into its parts. elbo = recon_ll - beta * sum(kl);
// higher is better. All terms are per-image averages over the batch, summed
// over pixels respectively latent dimensions.
struct ElboComponents {
  double elbo = 0.0;
  double recon_ll = 0.0;
  std::vector<double> kl;  // one entry per latent group block
  double kl_total() const;
};

struct FitReport {
  double init_val_elbo = 0.0;
  double best_val_elbo = 0.0;
  int epochs = 0;
  int skipped_updates = 0;
  std::vector<double> curve;  // validation elbo per epoch
};

struct LagrangeConfig;
struct FinetuneReport;

// Conditional top-down latent-variable model over images. Two state streams
// run through the top-down pass: one never sees parents and parameterizes
// the latent priors, the other consumes (z, parents) projections and feeds
// the posterior heads and the pixel decoder. Priors therefore stay
// parent-independent by construction while decoding is fully conditional.
class TopDownVae {
 public:
  // schema_source supplies parent kinds and category counts; statistics are
  // fitted later in fit(). The seed fixes the weight initialization.
  TopDownVae(VaeSpec spec, const data::Dataset& schema_source, uint64_t seed);

  const VaeSpec& spec() const { return spec_; }
  const scm::ParentCodec& codec() const { return codec_; }
  bool trained() const { return trained_; }
  // Validation bound recorded by fit(); the fine-tuning constraint target.
  double pretrain_elbo() const { return pretrain_elbo_; }

  FitReport fit(const data::Dataset& ds, const TrainConfig& cfg);

  // Encode dataset attribute rows with the fitted parent statistics.
  nn::TensorF parent_rows(const data::Dataset& ds, const std::vector<int>& idx) const;
  nn::TensorF encode_parents(const std::vector<std::vector<scm::Value>>& rows) const;

  // Posterior latents for a batch; mean mode is deterministic.
  LatentStack encode(const nn::TensorF& images, const nn::TensorF& parents,
                     scm::AbductOptions::LatentMode mode = scm::AbductOptions::LatentMode::mean,
                     uint64_t seed = 0) const;

  // Pixel distribution for given latents under the given parents.
  GaussianHead decode(const LatentStack& latents, const nn::TensorF& parents) const;

  // Latents drawn from the prior chain. Parents never enter this path.
  LatentStack sample_prior(int n, uint64_t seed) const;

  // Standardized pixel residual eps = (x - mu) / sigma.
  static nn::TensorF abduct_pixel_noise(const GaussianHead& head, const nn::TensorF& images);

  // Abduct latents and pixel noise under factual parents, decode under
  // counterfactual parents, recompose mu* + sigma* * eps. Clamped to [0,1]
  // unless clamp is false.
  nn::TensorF counterfactual(const nn::TensorF& images, const nn::TensorF& parents,
                             const nn::TensorF& parents_cf, bool clamp = true) const;

  // Decoder mean under the factual parents (posterior-mean latents).
  nn::TensorF reconstruct(const nn::TensorF& images, const nn::TensorF& parents) const;

  // Deterministic bound evaluation at the posterior mean. Throws if any
  // component is non-finite, listing the parts.
  ElboComponents elbo(const nn::TensorF& images, const nn::TensorF& parents, double beta) const;

  void save(nn::Checkpoint& ck) const;
  static TopDownVae load(const nn::Checkpoint& ck);

  nn::ParamList<float> params();

 private:
  struct Block {
    nn::Conv2d<float> prior_head;  // state -> 2*latent channels
    nn::Conv2d<float> post_head;   // encoder features + state -> 2*latent
    nn::Conv2d<float> fc1, fc2;    // (z, parents) projection into the
                                   // conditioned stream
    nn::Conv2d<float> fp1, fp2;    // z projection into the prior stream
  };
  struct Transition {
    int doublings = 0;
    nn::Conv2d<float> prior_adapt, cond_adapt;
  };
  struct EncLevel {
    nn::Conv2d<float> a, b;
  };

  struct PassOut {
    nn::Var<float> mu = nullptr, sigma = nullptr;  // pixel head, null unless requested
    std::vector<nn::Var<float>> z;    // per block
    std::vector<nn::Var<float>> kl;   // per block, scalar (posterior passes)
  };

  TopDownVae(VaeSpec spec, scm::ParentCodec codec, uint64_t seed);
  void build(uint64_t seed);
  void validate_spec() const;

  // Shared top-down driver. images null -> no encoder/posterior; given
  // null -> z from posterior (or prior when images is also null).
  PassOut run(nn::Graph<float>& g, const nn::TensorF* images, const nn::TensorF* parents,
              const LatentStack* given, scm::AbductOptions::LatentMode mode, nn::Rng* rng,
              bool want_pixels) const;

  nn::Var<float> encoder_level(nn::Graph<float>& g, nn::Var<float> x, int level) const;
  int encoder_width(int resolution) const;

  // Fine-tuning graph: factual posterior pass plus a conditioned replay
  // under intervened parents sharing the latent nodes, so gradients reach
  // the encoder through both decodes. Writes the recomposed counterfactual
  // and the beta-weighted bound loss.
  void finetune_graph(nn::Graph<float>& g, const nn::TensorF& images,
                      const nn::TensorF& parents, const nn::TensorF& parents_cf, double beta,
                      nn::Var<float>* xstar, nn::Var<float>* elbo_loss);

  VaeSpec spec_;
  scm::ParentCodec codec_;
  bool trained_ = false;
  double pretrain_elbo_ = 0.0;
  double beta_used_ = 1.0;

  nn::Param<float> h0p_, h0c_;  // learned initial states, [1, widths[0]]
  std::vector<EncLevel> enc_;
  std::vector<std::vector<Block>> blocks_;   // per resolution
  std::vector<Transition> ups_;              // between resolutions
  std::vector<nn::Conv2d<float>> tail_;      // last resolution -> image size
  std::vector<int> tail_widths_;
  nn::Conv2d<float> pixel_head_;

  friend class VaeMechanism;
  friend FinetuneReport counterfactual_finetune(TopDownVae&,
                                                const std::vector<const pred::Predictor*>&,
                                                const data::Dataset&, const LagrangeConfig&);
};

// scm::Mechanism adapter so the model slots into the counterfactual engine.
// abduct packs the posterior latents (and, under carry, the standardized
// pixel residual); predict decodes under new parents and recomposes.
class VaeMechanism : public scm::Mechanism {
 public:
  explicit VaeMechanism(std::shared_ptr<const TopDownVae> model) : model_(std::move(model)) {}

  std::string family() const override { return model_->spec().family; }
  bool trained() const override { return model_->trained(); }

  scm::NoisePayload abduct(const scm::Value& value, const std::vector<scm::Value>& parents,
                           const scm::AbductOptions& opts) const override;
  scm::Value predict(const scm::NoisePayload& noise,
                     const std::vector<scm::Value>& parents) const override;

  const TopDownVae& model() const { return *model_; }

 private:
  std::shared_ptr<const TopDownVae> model_;
};

struct LagrangeConfig {
  // Constraint target: pretraining bound, in per-pixel nats. 0 means take
  // the model's recorded value.
  double c = 0.0;
  double lambda_init = 0.0;
  double lambda_lr = 0.05;
  double lambda_max = 100.0;  // beyond this the run aborts flagged
  double lr = 1e-4;
  double beta = 1.0;
  int steps = 0;
  int batch = 32;
  double clip_norm = 350.0;
  uint64_t seed = 0;
};

struct FinetuneReport {
  int steps_done = 0;
  double lambda = 0.0;
  double final_val_elbo = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

// Counterfactual fine-tuning: descend classifier loss on counterfactuals
// generated under parent values resampled from the training marginals,
// while a Lagrange multiplier (ascended on the bound residual) keeps the
// evidence bound near its pretraining value. Guides must be image-only
// classifiers tagged for fine-tuning guidance; the evaluation predictors
// are refused. Aborts flagged (weights restored) when lambda explodes.
FinetuneReport counterfactual_finetune(TopDownVae& model,
                                       const std::vector<const pred::Predictor*>& guides,
                                       const data::Dataset& ds, const LagrangeConfig& cfg);

}  // namespace cfbench::vae
