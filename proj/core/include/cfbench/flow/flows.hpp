#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cfbench/nn/autodiff.hpp"
#include "cfbench/nn/layers.hpp"
#include "cfbench/nn/optim.hpp"
#include "cfbench/nn/rng.hpp"
#include "cfbench/nn/serialize.hpp"
#include "cfbench/scm/codec.hpp"
#include "cfbench/scm/mechanism.hpp"

namespace cfbench::flows {

using DGraph = nn::Graph<double>;
using DVar = nn::Var<double>;
using TD = nn::Tensor<double>;
using Json = nlohmann::ordered_json;

// Layer kinds, named by their conditioner:
//  - scale_shift: unconditional affine (learned location/scale)
//  - affine: affine with parameters produced from the context
//  - spline: monotone piecewise-quadratic map on [-bound, bound] with
//    identity tails; parameters from the context when one is given
enum class LayerKind { scale_shift, affine, spline };

std::string to_string(LayerKind k);
LayerKind layer_kind_from_string(const std::string& s);

struct LayerConfig {
  LayerKind kind = LayerKind::affine;
  int hidden = 32;     // conditioner MLP width; 0 = linear conditioner
  int bins = 8;        // spline only
  double bound = 4.0;  // spline only
};

struct FlowConfig {
  int ctx_dim = 0;
  std::vector<LayerConfig> layers;  // generative order: noise-side layer first

  // scale-shift, then context affine, then context spline
  static FlowConfig default_stack(int ctx_dim);

  Json to_json() const;
  static FlowConfig from_json(const Json& j);
};

namespace detail {

// Per-sample spline description, shared by the differentiable normalizing
// pass (bin selection), the plain evaluation, and the bisection inverse.
struct SplineTable {
  Eigen::ArrayXd w;    // bin widths, sum = 2*bound
  Eigen::ArrayXd p;    // node densities, length bins+1
  Eigen::ArrayXd xk;   // knots, length bins+1
  Eigen::ArrayXd cum;  // cumulative integral at knots
  double z = 0.0;      // total integral
  double bound = 0.0;
};

SplineTable spline_table(const Eigen::Ref<const Eigen::RowVectorXd>& wl,
                         const Eigen::Ref<const Eigen::RowVectorXd>& vl, double bound);
int spline_bin(const SplineTable& t, double x);
double spline_value(const SplineTable& t, double x, double* dydx = nullptr);
double spline_invert(const SplineTable& t, double y);

}  // namespace detail

class FlowLayer {
 public:
  FlowLayer() = default;
  FlowLayer(const std::string& name, LayerConfig cfg, int ctx_dim, nn::Rng& rng);

  // Differentiable closed form, value side -> noise side. Returns (u, logdet)
  // as [N, 1] nodes. ctx may be null for unconditional layers.
  std::pair<DVar, DVar> normalize(DGraph& g, DVar v, DVar ctx);

  // Plain-math maps used outside training. generate inverts splines by
  // bisection; invert is the same closed form as normalize without the tape
  // and can report the per-row log|du/dv|.
  TD generate(const TD& u, const TD& ctx) const;
  TD invert(const TD& v, const TD& ctx, TD* logdet = nullptr) const;

  void collect(nn::ParamList<double>& ps);
  const LayerConfig& config() const { return cfg_; }

 private:
  bool conditional() const { return cfg_.kind != LayerKind::scale_shift && ctx_dim_ > 0; }
  int head_dim() const {
    return cfg_.kind == LayerKind::spline ? 2 * cfg_.bins + 1 : 2;
  }
  // Conditioner output rows [N, head_dim]; for unconditional layers the
  // learned head row is broadcast.
  DVar head_nodes(DGraph& g, DVar ctx, int rows);
  // Eager conditioner evaluation for generate/invert.
  Eigen::MatrixXd head_values(const TD& ctx, int rows) const;

  LayerConfig cfg_;
  int ctx_dim_ = 0;
  nn::Dense<double> c1_, c2_, chead_;
  nn::Param<double> head_row_;

  friend class FlowStack;
};

struct FitOptions {
  double lr = 1e-3;
  int batch = 64;
  int patience = 10;
  int max_epochs = 200;
  uint64_t seed = 0;
  double grad_clip = 350.0;
  double grad_skip = 500.0;
};

struct FitResult {
  double init_val_nll = 0.0;
  double best_val_nll = 0.0;
  int epochs = 0;
  std::vector<double> curve;  // validation NLL per epoch
};

// Conditional 1-D normalizing flow with a standard-normal base. The value
// column is standardized internally (stats fitted from training data and
// stored in checkpoints); context encoding is the caller's concern.
class FlowStack {
 public:
  FlowStack() = default;
  FlowStack(FlowConfig cfg, uint64_t seed);

  const FlowConfig& config() const { return cfg_; }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }  // for hand-constructed stacks
  void set_value_stats(double mean, double stddev);
  std::pair<double, double> value_stats() const { return {vmean_, vstd_}; }

  std::vector<FlowLayer>& layers() { return layers_; }

  // Differentiable log density of raw values [N, 1] given ctx [N, ctx_dim].
  DVar log_prob_nodes(DGraph& g, DVar v_raw, DVar ctx);

  TD log_prob(const TD& v, const TD& ctx) const;
  TD forward(const TD& noise, const TD& ctx) const;  // noise -> value
  TD inverse(const TD& value, const TD& ctx) const;  // value -> noise

  FitResult fit(const TD& train_v, const TD& train_ctx, const TD& val_v, const TD& val_ctx,
                const FitOptions& opts);

  void collect(nn::ParamList<double>& ps);
  void save(nn::Checkpoint& ck, const std::string& prefix) const;
  static FlowStack load(const nn::Checkpoint& ck, const std::string& prefix);

 private:
  double val_nll(const TD& v, const TD& ctx) const;

  FlowConfig cfg_;
  std::vector<FlowLayer> layers_;
  double vmean_ = 0.0, vstd_ = 1.0;
  bool trained_ = false;
};

// Continuous scalar mechanism backed by a flow.
class FlowMechanism : public scm::Mechanism {
 public:
  FlowMechanism(FlowStack stack, scm::ParentCodec codec)
      : stack_(std::move(stack)), codec_(std::move(codec)) {}

  std::string family() const override { return "flow"; }
  bool trained() const override { return stack_.trained(); }

  scm::NoisePayload abduct(const scm::Value& value, const std::vector<scm::Value>& parents,
                           const scm::AbductOptions& opts) const override;
  scm::Value predict(const scm::NoisePayload& noise,
                     const std::vector<scm::Value>& parents) const override;

  double log_prob(double value, const std::vector<scm::Value>& parents) const;

  const FlowStack& stack() const { return stack_; }
  FlowStack& stack() { return stack_; }
  const scm::ParentCodec& codec() const { return codec_; }

  void save(nn::Checkpoint& ck) const;
  static std::shared_ptr<FlowMechanism> load(const nn::Checkpoint& ck);

 private:
  TD encode_ctx(const std::vector<scm::Value>& parents, int rows) const;

  FlowStack stack_;
  scm::ParentCodec codec_;
};

}  // namespace cfbench::flows
