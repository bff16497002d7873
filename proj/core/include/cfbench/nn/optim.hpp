#pragma once

#include <cmath>
#include <cstdint>

#include "cfbench/nn/autodiff.hpp"
#include "cfbench/nn/layers.hpp"

namespace cfbench::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW) when nonzero
  int warmup_steps = 0;       // linear learning-rate ramp
  double clip_norm = 0.0;     // global-norm clipping threshold, 0 disables
  double skip_norm = 0.0;     // skip the whole update above this norm, 0 disables
};

enum class StepOutcome { applied, skipped };

// Adam/AdamW over a fixed parameter list. Gradients are read from each
// Param's grad buffer and zeroed afterwards, so callers accumulate freely
// (e.g. over sub-batches) before stepping.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  int64_t steps_applied() const { return t_; }
  int64_t steps_skipped() const { return skipped_; }

  StepOutcome step(const ParamList<T>& params) {
    double sq = 0.0;
    for (const Param<T>* p : params) sq += static_cast<double>(p->grad.array().square().sum());
    double norm = std::sqrt(sq);

    if (cfg_.skip_norm > 0.0 && norm > cfg_.skip_norm) {
      for (Param<T>* p : params) p->grad.set_zero();
      ++skipped_;
      return StepOutcome::skipped;
    }
    double gscale = 1.0;
    if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) gscale = cfg_.clip_norm / norm;

    ++t_;
    double lr = cfg_.lr;
    if (cfg_.warmup_steps > 0 && t_ < cfg_.warmup_steps)
      lr *= static_cast<double>(t_) / cfg_.warmup_steps;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

    for (Param<T>* p : params) {
      auto g = (p->grad.array() * static_cast<T>(gscale)).eval();
      p->m.array() = static_cast<T>(cfg_.beta1) * p->m.array() +
                     static_cast<T>(1.0 - cfg_.beta1) * g;
      p->v.array() = static_cast<T>(cfg_.beta2) * p->v.array() +
                     static_cast<T>(1.0 - cfg_.beta2) * g.square();
      auto mhat = (p->m.array() / static_cast<T>(bc1)).eval();
      auto vhat = (p->v.array() / static_cast<T>(bc2)).eval();
      if (cfg_.weight_decay > 0.0)
        p->value.array() -= static_cast<T>(lr * cfg_.weight_decay) * p->value.array();
      p->value.array() -=
          static_cast<T>(lr) * mhat / (vhat.sqrt() + static_cast<T>(cfg_.eps));
      p->grad.set_zero();
    }
    return StepOutcome::applied;
  }

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
  int64_t skipped_ = 0;
};

}  // namespace cfbench::nn
