#pragma once

#include <Eigen/Core>
#include <memory>
#include <string>
#include <vector>

#include "cfbench/flow/flows.hpp"

namespace cfbench::flows {

// Categorical mechanism: context-conditioned logits sampled by Gumbel-max.
// Abduction recovers per-category Gumbel noise consistent with the observed
// class (the top noise exactly at the truncation point, the rest drawn from
// the truncated posterior); prediction replays that noise under new logits.
// The deterministic mode takes the median of every truncated posterior,
// which keeps argmax(logits + noise) equal to the observed class.
class CategoricalMechanism : public scm::Mechanism {
 public:
  CategoricalMechanism(int categories, scm::ParentCodec codec, int hidden, uint64_t seed);

  std::string family() const override { return "categorical"; }
  bool trained() const override { return trained_; }
  void mark_trained() { trained_ = true; }
  int categories() const { return categories_; }
  const scm::ParentCodec& codec() const { return codec_; }

  // Normalized log-probabilities for the given parents.
  Eigen::RowVectorXd log_probs(const std::vector<scm::Value>& parents) const;

  scm::NoisePayload abduct(const scm::Value& value, const std::vector<scm::Value>& parents,
                           const scm::AbductOptions& opts) const override;
  scm::Value predict(const scm::NoisePayload& noise,
                     const std::vector<scm::Value>& parents) const override;

  // Cross-entropy fit of the logits network.
  FitResult fit(const std::vector<int>& train_y, const TD& train_ctx,
                const std::vector<int>& val_y, const TD& val_ctx, const FitOptions& opts);

  void set_root_logits(const Eigen::RowVectorXd& logits);  // hand-built mechanisms

  void save(nn::Checkpoint& ck) const;
  static std::shared_ptr<CategoricalMechanism> load(const nn::Checkpoint& ck);

 private:
  bool conditional() const { return codec_.dim() > 0; }
  DVar logits_nodes(DGraph& g, DVar ctx, int rows);
  Eigen::MatrixXd logits_values(const TD& ctx, int rows) const;
  TD encode_ctx(const std::vector<scm::Value>& parents, int rows) const;

  int categories_ = 0;
  int hidden_ = 32;
  scm::ParentCodec codec_;
  nn::Dense<double> c1_, c2_, head_;
  nn::Param<double> root_logits_;
  bool trained_ = false;
};

}  // namespace cfbench::flows
