#include "cfbench/flow/gumbel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfbench/nn/layers.hpp"
#include "cfbench/nn/optim.hpp"
#include "cfbench/nn/rng.hpp"

namespace cfbench::flows {

CategoricalMechanism::CategoricalMechanism(int categories, scm::ParentCodec codec, int hidden,
                                           uint64_t seed)
    : categories_(categories), hidden_(hidden), codec_(std::move(codec)) {
  if (categories_ < 2) throw ValidationError("categorical mechanism needs at least 2 categories");
  nn::Rng rng(hash_str(seed, "categorical"));
  if (conditional()) {
    if (hidden_ <= 0) throw ValidationError("categorical mechanism: hidden size must be positive");
    c1_ = nn::Dense<double>("cat.c1", codec_.dim(), hidden_, rng);
    c2_ = nn::Dense<double>("cat.c2", hidden_, hidden_, rng);
    head_ = nn::Dense<double>("cat.head", hidden_, categories_, rng, 0.01);
  } else {
    root_logits_ = nn::Param<double>("cat.logits", TD({1, categories_}));
  }
}

TD CategoricalMechanism::encode_ctx(const std::vector<scm::Value>& parents, int rows) const {
  int d = codec_.dim();
  TD ctx({rows, std::max(1, d)});
  if (d > 0) {
    Eigen::VectorXd enc = codec_.encode(parents);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < d; ++c) ctx[static_cast<int64_t>(r) * d + c] = enc[c];
  }
  return ctx;
}

DVar CategoricalMechanism::logits_nodes(DGraph& g, DVar ctx, int rows) {
  if (conditional()) {
    DVar h = nn::leaky_relu(c1_(g, ctx), 0.1);
    h = nn::leaky_relu(c2_(g, h), 0.1);
    return head_(g, h);
  }
  TD ones({rows, 1});
  ones.array().setConstant(1.0);
  return nn::matmul(g.constant(ones), g.param(root_logits_));
}

Eigen::MatrixXd CategoricalMechanism::logits_values(const TD& ctx, int rows) const {
  if (!conditional()) {
    Eigen::MatrixXd out(rows, categories_);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < categories_; ++c) out(r, c) = root_logits_.value[c];
    return out;
  }
  auto dense = [](const nn::Dense<double>& d, const Eigen::MatrixXd& x) {
    Eigen::MatrixXd y = x * d.w.value.mat();
    y.rowwise() += d.b.value.mat().row(0);
    return y;
  };
  auto lrelu = [](Eigen::MatrixXd m) {
    return m.array().max(m.array() * 0.1).matrix().eval();
  };
  Eigen::MatrixXd h = lrelu(dense(c1_, ctx.mat()));
  h = lrelu(dense(c2_, h));
  return dense(head_, h);
}

Eigen::RowVectorXd CategoricalMechanism::log_probs(const std::vector<scm::Value>& parents) const {
  Eigen::RowVectorXd logits = logits_values(encode_ctx(parents, 1), 1).row(0);
  double mx = logits.maxCoeff();
  double lse = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - lse;
}

// Abduction inverts Gumbel-max sampling given the observed class k. With
// normalized log-probabilities phi, the winning score m = phi_k + g_k is a
// standard Gumbel (the max over categories), and each losing score is a
// Gumbel truncated at m. Inverse-CDF sampling of those gives
//   m    = -log(-log u_k)
//   g_k  = m - phi_k
//   g_i  = -log(exp(phi_i - m) - log u_i)   (i != k)
// so argmax(phi + g) = k for any u in (0,1); u = 0.5 is the per-coordinate
// median and serves as the deterministic mode.
scm::NoisePayload CategoricalMechanism::abduct(const scm::Value& value,
                                               const std::vector<scm::Value>& parents,
                                               const scm::AbductOptions& opts) const {
  int k = value.cat();
  if (k < 0 || k >= categories_)
    throw ValidationError("categorical abduct: observed class out of range");
  Eigen::RowVectorXd phi = log_probs(parents);

  Eigen::VectorXd u = Eigen::VectorXd::Constant(categories_, 0.5);
  if (opts.latent_mode == scm::AbductOptions::LatentMode::sample) {
    nn::Rng rng(hash_str(opts.seed, "categorical-abduct"));
    for (int i = 0; i < categories_; ++i) u[i] = rng.uniform();
  }

  double m = -std::log(-std::log(u[k]));
  Eigen::VectorXd g(categories_);
  for (int i = 0; i < categories_; ++i) {
    if (i == k)
      g[i] = m - phi[i];
    else
      g[i] = -std::log(std::exp(phi[i] - m) - std::log(u[i]));
  }

  scm::NoisePayload out;
  out.tag = scm::NoisePayload::Tag::gumbel;
  out.gumbels = std::move(g);
  return out;
}

scm::Value CategoricalMechanism::predict(const scm::NoisePayload& noise,
                                         const std::vector<scm::Value>& parents) const {
  if (noise.tag != scm::NoisePayload::Tag::gumbel)
    throw ValidationError("categorical mechanism got a non-gumbel noise payload");
  if (noise.gumbels.size() != categories_)
    throw ValidationError("categorical predict: noise size does not match category count");
  Eigen::RowVectorXd phi = log_probs(parents);
  int best = 0;
  double best_score = phi[0] + noise.gumbels[0];
  for (int i = 1; i < categories_; ++i) {
    double s = phi[i] + noise.gumbels[i];
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return scm::Value::category(best);
}

namespace {

double mean_ce(const Eigen::MatrixXd& logits, const std::vector<int>& y) {
  double total = 0.0;
  for (int r = 0; r < logits.rows(); ++r) {
    double mx = logits.row(r).maxCoeff();
    double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    total += lse - logits(r, y[r]);
  }
  return total / std::max<size_t>(1, y.size());
}

}  // namespace

FitResult CategoricalMechanism::fit(const std::vector<int>& train_y, const TD& train_ctx,
                                    const std::vector<int>& val_y, const TD& val_ctx,
                                    const FitOptions& opts) {
  const int n = static_cast<int>(train_y.size());
  if (n < 2) throw ValidationError("categorical fit: need at least 2 training rows");
  const int d = codec_.dim();
  if (d > 0 && (train_ctx.rows() != n || train_ctx.cols() != d))
    throw ValidationError("categorical fit: context shape mismatch");
  std::vector<int> counts(categories_, 0);
  for (int y : train_y) {
    if (y < 0 || y >= categories_) throw ValidationError("categorical fit: label out of range");
    ++counts[y];
  }
  if (std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; }) < 2)
    throw ValidationError("categorical fit: training labels are a single class");

  nn::ParamList<double> ps;
  if (conditional()) {
    c1_.collect(ps);
    c2_.collect(ps);
    head_.collect(ps);
  } else {
    ps.push_back(&root_logits_);
  }
  nn::AdamConfig acfg;
  acfg.lr = opts.lr;
  acfg.clip_norm = opts.grad_clip;
  acfg.skip_norm = opts.grad_skip;
  nn::Adam<double> adam(acfg);
  nn::Rng rng(hash_str(opts.seed, "categorical-fit"));

  auto val_ce = [&] {
    return mean_ce(logits_values(val_ctx, static_cast<int>(val_y.size())), val_y);
  };

  FitResult res;
  res.init_val_nll = val_ce();
  double best = res.init_val_nll;
  std::vector<TD> best_params;
  for (auto* p : ps) best_params.push_back(p->value);

  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  int since_best = 0;

  for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
    rng.shuffle(idx);
    for (int at = 0; at < n; at += opts.batch) {
      int bs = std::min(opts.batch, n - at);
      TD bc({bs, std::max(1, d)});
      std::vector<int> by(bs);
      for (int i = 0; i < bs; ++i) {
        by[i] = train_y[idx[at + i]];
        for (int c = 0; c < d; ++c)
          bc[static_cast<int64_t>(i) * d + c] =
              train_ctx[static_cast<int64_t>(idx[at + i]) * d + c];
      }
      DGraph g;
      DVar logits = logits_nodes(g, d > 0 ? g.constant(bc) : nullptr, bs);
      DVar loss = nn::mean_all(nn::softmax_ce(logits, by));
      g.backward(loss);
      adam.step(ps);
    }
    double ce = val_ce();
    res.curve.push_back(ce);
    res.epochs = epoch + 1;
    if (ce < best - 1e-9) {
      best = ce;
      for (size_t i = 0; i < ps.size(); ++i) best_params[i] = ps[i]->value;
      since_best = 0;
    } else if (++since_best >= opts.patience) {
      break;
    }
  }
  for (size_t i = 0; i < ps.size(); ++i) ps[i]->value = best_params[i];
  res.best_val_nll = best;
  trained_ = true;
  return res;
}

void CategoricalMechanism::set_root_logits(const Eigen::RowVectorXd& logits) {
  if (conditional())
    throw ValidationError("set_root_logits: mechanism is parent-conditioned");
  if (logits.size() != categories_)
    throw ValidationError("set_root_logits: size does not match category count");
  for (int i = 0; i < categories_; ++i) root_logits_.value[i] = logits[i];
}

void CategoricalMechanism::save(nn::Checkpoint& ck) const {
  ck.meta["kind"] = "mechanism";
  ck.meta["family"] = "categorical";
  ck.meta["categories"] = categories_;
  ck.meta["hidden"] = hidden_;
  ck.meta["trained"] = trained_;
  ck.meta["parent_codec"] = codec_.to_json();
  auto& self = const_cast<CategoricalMechanism&>(*this);
  nn::ParamList<double> ps;
  if (conditional()) {
    self.c1_.collect(ps);
    self.c2_.collect(ps);
    self.head_.collect(ps);
  } else {
    ps.push_back(&self.root_logits_);
  }
  for (auto* p : ps) ck.put(p->name, p->value);
}

std::shared_ptr<CategoricalMechanism> CategoricalMechanism::load(const nn::Checkpoint& ck) {
  if (ck.meta.value("family", "") != "categorical")
    throw IoError("checkpoint does not hold a categorical mechanism");
  auto mech = std::make_shared<CategoricalMechanism>(
      ck.meta.at("categories").get<int>(), scm::ParentCodec::from_json(ck.meta.at("parent_codec")),
      ck.meta.at("hidden").get<int>(), 0);
  mech->trained_ = ck.meta.value("trained", false);
  nn::ParamList<double> ps;
  if (mech->conditional()) {
    mech->c1_.collect(ps);
    mech->c2_.collect(ps);
    mech->head_.collect(ps);
  } else {
    ps.push_back(&mech->root_logits_);
  }
  for (auto* p : ps) {
    const auto* e = ck.find(p->name);
    if (!e) throw IoError("categorical checkpoint missing tensor '" + p->name + "'");
    if (!e->f64.same_shape(p->value))
      throw IoError("categorical checkpoint tensor '" + p->name + "' has wrong shape");
    p->value = e->f64;
  }
  return mech;
}

}  // namespace cfbench::flows
