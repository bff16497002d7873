#include "cfbench/pred/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfbench/nn/optim.hpp"

namespace cfbench::pred {

using nn::TensorF;
using nn::Var;
using FGraph = nn::Graph<float>;

std::string to_string(Role r) {
  return r == Role::evaluation ? "evaluation" : "finetune-guidance";
}

Role role_from_string(const std::string& s) {
  if (s == "evaluation") return Role::evaluation;
  if (s == "finetune-guidance") return Role::finetune_guidance;
  throw ValidationError("unknown predictor role '" + s + "'");
}

std::vector<std::vector<int>> balanced_batches(const std::vector<int>& labels, int categories,
                                               int batch, nn::Rng& rng) {
  std::vector<std::vector<int>> pools(categories);
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= categories)
      throw ValidationError("balanced sampler: label out of range");
    pools[labels[i]].push_back(static_cast<int>(i));
  }
  std::vector<int> present;
  for (int c = 0; c < categories; ++c)
    if (!pools[c].empty()) present.push_back(c);
  if (present.size() < 2)
    throw ValidationError("balanced sampler: need at least two classes present");

  std::vector<size_t> cursor(categories, 0);
  for (int c : present) rng.shuffle(pools[c]);
  auto draw = [&](int c) {
    if (cursor[c] >= pools[c].size()) {
      rng.shuffle(pools[c]);
      cursor[c] = 0;
    }
    return pools[c][cursor[c]++];
  };

  const int nbatches = static_cast<int>((labels.size() + batch - 1) / batch);
  std::vector<std::vector<int>> out(nbatches);
  for (auto& b : out) {
    b.reserve(batch);
    for (int i = 0; i < batch; ++i) b.push_back(draw(present[i % present.size()]));
  }
  return out;
}

// ---- ConvTrunk ---------------------------------------------------------------------

ConvTrunk::ConvTrunk(const std::string& name, int height, int width, int in_channels,
                     int feature_dim, nn::Rng& rng)
    : height_(height), width_(width), feature_dim_(feature_dim) {
  if (height % 16 || width % 16)
    throw ValidationError("conv trunk: image sides must be divisible by 16");
  int widths[4] = {feature_dim / 4, feature_dim / 2, (3 * feature_dim) / 4, feature_dim};
  int c = in_channels, h = height, w = width;
  for (int i = 0; i < 4; ++i) {
    nn::Conv2dSpec s;
    s.in_c = c;
    s.h = h;
    s.w = w;
    s.out_c = widths[i];
    s.k = 3;
    s.stride = 2;
    s.pad = 1;
    convs_.emplace_back(name + ".c" + std::to_string(i), s, rng);
    c = widths[i];
    h /= 2;
    w /= 2;
  }
}

Var<float> ConvTrunk::features(FGraph& g, Var<float> images) const {
  auto& self = const_cast<ConvTrunk&>(*this);
  Var<float> h = images;
  for (auto& conv : self.convs_) h = nn::leaky_relu(conv(g, h));
  const auto& last = convs_.back().spec;
  if (last.out_h() == 1 && last.out_w() == 1) return h;
  return nn::avg_pool2(h, last.out_c, last.out_h(), last.out_w());
}

void ConvTrunk::collect(nn::ParamList<float>& ps) {
  for (auto& c : convs_) c.collect(ps);
}

// ---- shared fit helpers ------------------------------------------------------------

namespace {

struct Columns {
  TensorF images;               // [n, h*w]
  std::vector<int> labels;      // categorical target
  std::vector<double> values;   // continuous target
  std::vector<std::vector<scm::Value>> children;
};

Columns gather(const data::Dataset& ds, const std::vector<int>& rows,
               const std::string& target, scm::VarKind kind,
               const std::vector<std::string>& children) {
  Columns out;
  const int64_t d = ds.images.cols();
  out.images = TensorF({static_cast<int>(rows.size()), static_cast<int>(d)});
  for (size_t i = 0; i < rows.size(); ++i)
    for (int64_t c = 0; c < d; ++c)
      out.images[static_cast<int64_t>(i) * d + c] = ds.images[rows[i] * d + c];
  if (!target.empty()) {
    const auto& col = ds.attr(target);
    for (int r : rows) {
      if (kind == scm::VarKind::categorical)
        out.labels.push_back(col.cat[r]);
      else
        out.values.push_back(col.num[r]);
    }
  }
  out.children.resize(rows.size());
  for (const auto& name : children) {
    const auto& col = ds.attr(name);
    for (size_t i = 0; i < rows.size(); ++i)
      out.children[i].push_back(col.kind == scm::VarKind::categorical
                                    ? scm::Value::category(col.cat[rows[i]])
                                    : scm::Value::number(col.num[rows[i]]));
  }
  return out;
}

scm::ParentCodec fit_codec(const data::Dataset& ds, const std::vector<int>& train_rows,
                           const std::vector<std::string>& names) {
  scm::ParentCodec codec;
  for (const auto& name : names) {
    const auto& col = ds.attr(name);
    scm::ParentCodec::Entry e;
    e.name = name;
    e.kind = col.kind;
    if (col.kind == scm::VarKind::categorical) {
      e.categories = col.categories;
    } else {
      double mean = 0.0;
      for (int r : train_rows) mean += col.num[r];
      mean /= static_cast<double>(train_rows.size());
      double var = 0.0;
      for (int r : train_rows) var += (col.num[r] - mean) * (col.num[r] - mean);
      var /= std::max<size_t>(1, train_rows.size() - 1);
      e.mean = mean;
      e.stddev = var < 1e-16 ? 1.0 : std::sqrt(var);
    }
    codec.entries.push_back(std::move(e));
  }
  return codec;
}

}  // namespace

// ---- Predictor ---------------------------------------------------------------------

Predictor::Predictor(PredictorSpec spec, uint64_t seed) : spec_(std::move(spec)) {
  if (spec_.target.empty()) throw ValidationError("predictor: empty target name");
  if (spec_.target_kind == scm::VarKind::categorical && spec_.categories < 2)
    throw ValidationError("predictor: categorical target needs at least 2 categories");
  if (spec_.target_kind == scm::VarKind::image)
    throw ValidationError("predictor: image targets are not supported");
  nn::Rng rng(hash_str(seed, "predictor:" + spec_.target + ":" + to_string(spec_.role)));
  trunk_ = ConvTrunk("trunk", spec_.height, spec_.width, 1, spec_.feature_dim, rng);
  for (const auto& c : spec_.children) {
    scm::ParentCodec::Entry e;
    e.name = c;
    child_codec_.entries.push_back(std::move(e));  // kinds/stats fitted in fit()
  }
  int out = spec_.target_kind == scm::VarKind::categorical ? spec_.categories : 1;
  head_ = nn::Dense<float>("head", spec_.feature_dim + child_codec_.dim(), out, rng, 1.0);
}

TensorF Predictor::encode_children(const std::vector<std::vector<scm::Value>>& children,
                                   int64_t n) const {
  const int d = child_codec_.dim();
  TensorF out({static_cast<int>(n), std::max(1, d)});
  if (d == 0) return out;
  if (static_cast<int64_t>(children.size()) != n)
    throw ValidationError("predictor: child rows do not match image rows");
  for (int64_t i = 0; i < n; ++i) {
    Eigen::VectorXd enc = child_codec_.encode(children[i]);
    for (int c = 0; c < d; ++c) out[i * d + c] = static_cast<float>(enc[c]);
  }
  return out;
}

Var<float> Predictor::head_logits(FGraph& g, const TensorF& images,
                                  const std::vector<std::vector<scm::Value>>& children,
                                  bool needs_image_grad, Var<float>* image_var) const {
  if (images.cols() != static_cast<int64_t>(spec_.height) * spec_.width)
    throw ValidationError("predictor: image size does not match spec");
  auto& self = const_cast<Predictor&>(*this);
  Var<float> x = g.make(images, needs_image_grad);
  if (image_var) *image_var = x;
  Var<float> f = trunk_.features(g, x);
  if (child_codec_.dim() > 0)
    f = nn::concat_cols(f, g.constant(encode_children(children, images.rows())));
  return self.head_(g, f);
}

FitReport Predictor::fit(const data::Dataset& ds, const PredictorConfig& cfg) {
  if (ds.height != spec_.height || ds.width != spec_.width)
    throw ValidationError("predictor fit: dataset image size does not match spec");
  auto train_rows = ds.indices_of(data::Split::train);
  auto val_rows = ds.indices_of(data::Split::val);
  if (train_rows.empty() || val_rows.empty())
    throw ValidationError("predictor fit: empty train or val split");

  child_codec_ = fit_codec(ds, train_rows, spec_.children);
  {
    // The head input width depends on fitted child kinds; rebuild if needed.
    int want = spec_.feature_dim + child_codec_.dim();
    if (head_.in != want) {
      nn::Rng rng(hash_str(cfg.seed, "predictor-head:" + spec_.target));
      int out = spec_.target_kind == scm::VarKind::categorical ? spec_.categories : 1;
      head_ = nn::Dense<float>("head", want, out, rng, 1.0);
    }
  }

  Columns train = gather(ds, train_rows, spec_.target, spec_.target_kind, spec_.children);
  Columns val = gather(ds, val_rows, spec_.target, spec_.target_kind, spec_.children);

  if (spec_.target_kind == scm::VarKind::categorical) {
    std::vector<int> seen(spec_.categories, 0);
    for (int c : train.labels) seen[c] = 1;
    if (std::accumulate(seen.begin(), seen.end(), 0) < 2)
      throw ValidationError("predictor fit: target '" + spec_.target +
                            "' has fewer than two classes in the training split");
  } else {
    double mean = 0.0;
    for (double v : train.values) mean += v;
    mean /= static_cast<double>(train.values.size());
    double var = 0.0;
    for (double v : train.values) var += (v - mean) * (v - mean);
    var /= std::max<size_t>(1, train.values.size() - 1);
    if (var < 1e-16)
      throw ValidationError("predictor fit: target '" + spec_.target + "' is constant");
    target_mean_ = mean;
    target_std_ = std::sqrt(var);
  }

  nn::ParamList<float> ps;
  trunk_.collect(ps);
  head_.collect(ps);
  nn::AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.weight_decay = cfg.weight_decay;
  nn::Adam<float> adam(acfg);
  nn::Rng rng(hash_str(cfg.seed, "predictor-fit:" + spec_.target));

  const int n = static_cast<int>(train_rows.size());
  const int64_t d = train.images.cols();

  auto batch_loss = [&](const std::vector<int>& pick, bool grad) {
    const int bs = static_cast<int>(pick.size());
    TensorF imgs({bs, static_cast<int>(d)});
    std::vector<std::vector<scm::Value>> children(bs);
    std::vector<int> labels(bs);
    TensorF targets({bs, 1});
    for (int i = 0; i < bs; ++i) {
      int r = pick[i];
      for (int64_t c = 0; c < d; ++c) imgs[static_cast<int64_t>(i) * d + c] = train.images[r * d + c];
      children[i] = train.children[r];
      if (spec_.target_kind == scm::VarKind::categorical)
        labels[i] = train.labels[r];
      else
        targets[i] = static_cast<float>((train.values[r] - target_mean_) / target_std_);
    }
    FGraph g;
    Var<float> out = head_logits(g, imgs, children, false, nullptr);
    Var<float> loss;
    if (spec_.target_kind == scm::VarKind::categorical)
      loss = nn::mean_all(nn::softmax_ce(out, labels));
    else
      loss = nn::mean_all(nn::square(nn::sub(out, g.constant(targets))));
    double v = loss->val[0];
    if (grad) {
      g.backward(loss);
      adam.step(ps);
    }
    return v;
  };

  auto eval_loss = [&](const Columns& cols) {
    const int total = static_cast<int>(cols.images.rows());
    double sum = 0.0;
    for (int at = 0; at < total; at += 512) {
      int bs = std::min(512, total - at);
      TensorF imgs({bs, static_cast<int>(d)});
      std::vector<std::vector<scm::Value>> children(bs);
      std::vector<int> labels(bs);
      TensorF targets({bs, 1});
      for (int i = 0; i < bs; ++i) {
        for (int64_t c = 0; c < d; ++c)
          imgs[static_cast<int64_t>(i) * d + c] = cols.images[(at + i) * d + c];
        children[i] = cols.children[at + i];
        if (spec_.target_kind == scm::VarKind::categorical)
          labels[i] = cols.labels[at + i];
        else
          targets[i] = static_cast<float>((cols.values[at + i] - target_mean_) / target_std_);
      }
      FGraph g;
      Var<float> out = head_logits(g, imgs, children, false, nullptr);
      Var<float> loss;
      if (spec_.target_kind == scm::VarKind::categorical)
        loss = nn::mean_all(nn::softmax_ce(out, labels));
      else
        loss = nn::mean_all(nn::square(nn::sub(out, g.constant(targets))));
      sum += loss->val[0] * bs;
    }
    return sum / total;
  };

  FitReport rep;
  rep.init_val_loss = eval_loss(val);
  double best = rep.init_val_loss;
  std::vector<TensorF> best_params;
  for (auto* p : ps) best_params.push_back(p->value);
  int since_best = 0;

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    if (spec_.target_kind == scm::VarKind::categorical && cfg.balanced_sampler) {
      for (const auto& b : balanced_batches(train.labels, spec_.categories, cfg.batch, rng))
        batch_loss(b, true);
    } else {
      rng.shuffle(order);
      for (int at = 0; at < n; at += cfg.batch) {
        std::vector<int> pick(order.begin() + at,
                              order.begin() + std::min(n, at + cfg.batch));
        batch_loss(pick, true);
      }
    }
    double v = eval_loss(val);
    rep.curve.push_back(v);
    rep.epochs = epoch + 1;
    if (v < best - 1e-9) {
      best = v;
      for (size_t i = 0; i < ps.size(); ++i) best_params[i] = ps[i]->value;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  for (size_t i = 0; i < ps.size(); ++i) ps[i]->value = best_params[i];
  rep.best_val_loss = best;
  trained_ = true;

  if (spec_.target_kind == scm::VarKind::categorical) {
    Prediction p = predict(val.images, val.children);
    int hits = 0;
    for (int i = 0; i < p.cls.size(); ++i)
      if (p.cls[i] == val.labels[i]) ++hits;
    rep.val_accuracy = static_cast<double>(hits) / std::max<int>(1, p.cls.size());
  }
  return rep;
}

Prediction Predictor::predict(const TensorF& images,
                              const std::vector<std::vector<scm::Value>>& children) const {
  if (!trained_) throw ValidationError("predictor: not trained");
  const int total = static_cast<int>(images.rows());
  Prediction out;
  if (spec_.target_kind == scm::VarKind::categorical) {
    out.cls.resize(total);
    out.probs.resize(total, spec_.categories);
  } else {
    out.num.resize(total);
  }
  const int64_t d = images.cols();
  for (int at = 0; at < total; at += 512) {
    int bs = std::min(512, total - at);
    TensorF imgs({bs, static_cast<int>(d)});
    std::copy(images.data() + static_cast<int64_t>(at) * d,
              images.data() + static_cast<int64_t>(at + bs) * d, imgs.data());
    std::vector<std::vector<scm::Value>> kids;
    if (!children.empty())
      kids.assign(children.begin() + at, children.begin() + at + bs);
    else
      kids.resize(bs);
    FGraph g;
    Var<float> logits = head_logits(g, imgs, kids, false, nullptr);
    if (spec_.target_kind == scm::VarKind::categorical) {
      Var<float> probs = nn::softmax_rows(logits);
      for (int i = 0; i < bs; ++i) {
        int arg = 0;
        double pb = -1.0;
        for (int c = 0; c < spec_.categories; ++c) {
          double pv = probs->val[static_cast<int64_t>(i) * spec_.categories + c];
          out.probs(at + i, c) = pv;
          if (pv > pb) {
            pb = pv;
            arg = c;
          }
        }
        out.cls[at + i] = arg;
      }
    } else {
      for (int i = 0; i < bs; ++i)
        out.num[at + i] = logits->val[i] * target_std_ + target_mean_;
    }
  }
  return out;
}

std::pair<double, TensorF> Predictor::loss_and_image_grad(
    const TensorF& images, const std::vector<scm::Value>& targets,
    const std::vector<std::vector<scm::Value>>& children) const {
  if (!trained_) throw ValidationError("predictor: not trained");
  const int n = static_cast<int>(images.rows());
  if (static_cast<int>(targets.size()) != n)
    throw ValidationError("predictor: target count does not match image rows");
  FGraph g;
  Var<float> image_var;
  std::vector<std::vector<scm::Value>> kids = children;
  if (kids.empty()) kids.resize(n);
  Var<float> logits = head_logits(g, images, kids, true, &image_var);
  Var<float> loss;
  if (spec_.target_kind == scm::VarKind::categorical) {
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = targets[i].cat();
    loss = nn::mean_all(nn::softmax_ce(logits, labels));
  } else {
    TensorF t({n, 1});
    for (int i = 0; i < n; ++i)
      t[i] = static_cast<float>((targets[i].num() - target_mean_) / target_std_);
    loss = nn::mean_all(nn::square(nn::sub(logits, g.constant(t))));
  }
  g.backward(loss);
  TensorF grad = image_var->grad;
  return {static_cast<double>(loss->val[0]), grad};
}

TensorF Predictor::features(const TensorF& images) const {
  const int total = static_cast<int>(images.rows());
  const int64_t d = images.cols();
  TensorF out({total, spec_.feature_dim});
  for (int at = 0; at < total; at += 512) {
    int bs = std::min(512, total - at);
    TensorF imgs({bs, static_cast<int>(d)});
    std::copy(images.data() + static_cast<int64_t>(at) * d,
              images.data() + static_cast<int64_t>(at + bs) * d, imgs.data());
    FGraph g;
    Var<float> f = trunk_.features(g, g.constant(imgs));
    std::copy(f->val.data(), f->val.data() + f->val.numel(),
              out.data() + static_cast<int64_t>(at) * spec_.feature_dim);
  }
  return out;
}

void Predictor::save(nn::Checkpoint& ck) const {
  nn::Json meta;
  meta["kind"] = "predictor";
  meta["target"] = spec_.target;
  meta["target_kind"] = scm::to_string(spec_.target_kind);
  meta["categories"] = spec_.categories;
  meta["children"] = spec_.children;
  meta["role"] = to_string(spec_.role);
  meta["height"] = spec_.height;
  meta["width"] = spec_.width;
  meta["feature_dim"] = spec_.feature_dim;
  meta["target_mean"] = target_mean_;
  meta["target_std"] = target_std_;
  meta["trained"] = trained_;
  meta["child_codec"] = child_codec_.to_json();
  ck.meta["predictor"] = std::move(meta);
  auto& self = const_cast<Predictor&>(*this);
  nn::ParamList<float> ps;
  self.trunk_.collect(ps);
  self.head_.collect(ps);
  nn::put_params(ck, ps);
}

Predictor Predictor::load(const nn::Checkpoint& ck) {
  const nn::Json& meta = ck.meta.at("predictor");
  PredictorSpec spec;
  spec.target = meta.at("target").get<std::string>();
  spec.target_kind = scm::var_kind_from_string(meta.at("target_kind").get<std::string>());
  spec.categories = meta.at("categories").get<int>();
  spec.children = meta.at("children").get<std::vector<std::string>>();
  spec.role = role_from_string(meta.at("role").get<std::string>());
  spec.height = meta.at("height").get<int>();
  spec.width = meta.at("width").get<int>();
  spec.feature_dim = meta.at("feature_dim").get<int>();
  Predictor p(spec, 0);
  p.child_codec_ = scm::ParentCodec::from_json(meta.at("child_codec"));
  if (p.head_.in != spec.feature_dim + p.child_codec_.dim()) {
    nn::Rng rng(0);
    int out = spec.target_kind == scm::VarKind::categorical ? spec.categories : 1;
    p.head_ = nn::Dense<float>("head", spec.feature_dim + p.child_codec_.dim(), out, rng, 1.0);
  }
  p.target_mean_ = meta.at("target_mean").get<double>();
  p.target_std_ = meta.at("target_std").get<double>();
  p.trained_ = meta.value("trained", false);
  nn::ParamList<float> ps;
  p.trunk_.collect(ps);
  p.head_.collect(ps);
  nn::load_params(ck, ps);
  return p;
}

// ---- FeatureExtractor --------------------------------------------------------------

FeatureExtractor::FeatureExtractor(const data::Dataset& ds, int feature_dim, uint64_t seed)
    : height_(ds.height), width_(ds.width) {
  nn::Rng rng(hash_str(seed, "extractor:" + ds.name));
  trunk_ = ConvTrunk("trunk", ds.height, ds.width, 1, feature_dim, rng);
  for (const auto& col : ds.attrs) {
    Head h;
    h.attr = col.name;
    h.kind = col.kind;
    h.categories = col.categories;
    int out = col.kind == scm::VarKind::categorical ? col.categories : 1;
    h.dense = nn::Dense<float>("head." + col.name, feature_dim, out, rng, 1.0);
    heads_.push_back(std::move(h));
  }
  if (heads_.empty()) throw ValidationError("feature extractor: dataset has no attributes");
  id_ = "extractor-" + ds.name + "-f" + std::to_string(feature_dim) + "-s" +
        std::to_string(seed);
}

FitReport FeatureExtractor::fit(const data::Dataset& ds, const PredictorConfig& cfg) {
  auto train_rows = ds.indices_of(data::Split::train);
  auto val_rows = ds.indices_of(data::Split::val);
  if (train_rows.empty() || val_rows.empty())
    throw ValidationError("feature extractor fit: empty train or val split");

  for (auto& h : heads_) {
    if (h.kind != scm::VarKind::continuous) continue;
    const auto& col = ds.attr(h.attr);
    double mean = 0.0;
    for (int r : train_rows) mean += col.num[r];
    mean /= static_cast<double>(train_rows.size());
    double var = 0.0;
    for (int r : train_rows) var += (col.num[r] - mean) * (col.num[r] - mean);
    var /= std::max<size_t>(1, train_rows.size() - 1);
    h.mean = mean;
    h.stddev = var < 1e-16 ? 1.0 : std::sqrt(var);
  }

  nn::ParamList<float> ps;
  trunk_.collect(ps);
  for (auto& h : heads_) h.dense.collect(ps);
  nn::AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.weight_decay = cfg.weight_decay;
  nn::Adam<float> adam(acfg);
  nn::Rng rng(hash_str(cfg.seed, "extractor-fit"));

  const int64_t d = ds.images.cols();
  auto multitask_loss = [&](const std::vector<int>& rows, bool grad) {
    const int bs = static_cast<int>(rows.size());
    TensorF imgs({bs, static_cast<int>(d)});
    for (int i = 0; i < bs; ++i)
      for (int64_t c = 0; c < d; ++c)
        imgs[static_cast<int64_t>(i) * d + c] = ds.images[static_cast<int64_t>(rows[i]) * d + c];
    FGraph g;
    Var<float> f = trunk_.features(g, g.constant(imgs));
    Var<float> loss = nullptr;
    for (auto& h : heads_) {
      Var<float> out = h.dense(g, f);
      const auto& col = ds.attr(h.attr);
      Var<float> term;
      if (h.kind == scm::VarKind::categorical) {
        std::vector<int> labels(bs);
        for (int i = 0; i < bs; ++i) labels[i] = col.cat[rows[i]];
        term = nn::mean_all(nn::softmax_ce(out, labels));
      } else {
        TensorF t({bs, 1});
        for (int i = 0; i < bs; ++i)
          t[i] = static_cast<float>((col.num[rows[i]] - h.mean) / h.stddev);
        term = nn::mean_all(nn::square(nn::sub(out, g.constant(t))));
      }
      loss = loss ? nn::add(loss, term) : term;
    }
    double v = loss->val[0];
    if (grad) {
      g.backward(loss);
      adam.step(ps);
    }
    return v;
  };

  auto eval_loss = [&](const std::vector<int>& rows) {
    double sum = 0.0;
    for (size_t at = 0; at < rows.size(); at += 512) {
      size_t bs = std::min<size_t>(512, rows.size() - at);
      std::vector<int> pick(rows.begin() + at, rows.begin() + at + bs);
      sum += multitask_loss(pick, false) * static_cast<double>(bs);
    }
    return sum / static_cast<double>(rows.size());
  };

  FitReport rep;
  rep.init_val_loss = eval_loss(val_rows);
  double best = rep.init_val_loss;
  std::vector<TensorF> best_params;
  for (auto* p : ps) best_params.push_back(p->value);
  int since_best = 0;

  std::vector<int> order = train_rows;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t at = 0; at < order.size(); at += cfg.batch) {
      size_t bs = std::min<size_t>(cfg.batch, order.size() - at);
      std::vector<int> pick(order.begin() + at, order.begin() + at + bs);
      multitask_loss(pick, true);
    }
    double v = eval_loss(val_rows);
    rep.curve.push_back(v);
    rep.epochs = epoch + 1;
    if (v < best - 1e-9) {
      best = v;
      for (size_t i = 0; i < ps.size(); ++i) best_params[i] = ps[i]->value;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  for (size_t i = 0; i < ps.size(); ++i) ps[i]->value = best_params[i];
  rep.best_val_loss = best;
  trained_ = true;
  return rep;
}

TensorF FeatureExtractor::features(const TensorF& images) const {
  if (!trained_) throw ValidationError("feature extractor: not trained");
  const int total = static_cast<int>(images.rows());
  const int64_t d = images.cols();
  if (d != static_cast<int64_t>(height_) * width_)
    throw ValidationError("feature extractor: image size mismatch");
  TensorF out({total, trunk_.feature_dim()});
  for (int at = 0; at < total; at += 512) {
    int bs = std::min(512, total - at);
    TensorF imgs({bs, static_cast<int>(d)});
    std::copy(images.data() + static_cast<int64_t>(at) * d,
              images.data() + static_cast<int64_t>(at + bs) * d, imgs.data());
    FGraph g;
    Var<float> f = trunk_.features(g, g.constant(imgs));
    std::copy(f->val.data(), f->val.data() + f->val.numel(),
              out.data() + static_cast<int64_t>(at) * trunk_.feature_dim());
  }
  return out;
}

void FeatureExtractor::save(nn::Checkpoint& ck) const {
  nn::Json meta;
  meta["kind"] = "feature-extractor";
  meta["id"] = id_;
  meta["height"] = height_;
  meta["width"] = width_;
  meta["feature_dim"] = trunk_.feature_dim();
  meta["trained"] = trained_;
  nn::Json hs = nn::Json::array();
  for (const auto& h : heads_) {
    nn::Json row;
    row["attr"] = h.attr;
    row["kind"] = scm::to_string(h.kind);
    row["categories"] = h.categories;
    row["mean"] = h.mean;
    row["stddev"] = h.stddev;
    hs.push_back(std::move(row));
  }
  meta["heads"] = std::move(hs);
  ck.meta["extractor"] = std::move(meta);
  auto& self = const_cast<FeatureExtractor&>(*this);
  nn::ParamList<float> ps;
  self.trunk_.collect(ps);
  for (auto& h : self.heads_) h.dense.collect(ps);
  nn::put_params(ck, ps);
}

FeatureExtractor FeatureExtractor::load(const nn::Checkpoint& ck) {
  const nn::Json& meta = ck.meta.at("extractor");
  FeatureExtractor fx;
  fx.height_ = meta.at("height").get<int>();
  fx.width_ = meta.at("width").get<int>();
  fx.id_ = meta.at("id").get<std::string>();
  fx.trained_ = meta.value("trained", false);
  int fdim = meta.at("feature_dim").get<int>();
  nn::Rng rng(0);
  fx.trunk_ = ConvTrunk("trunk", fx.height_, fx.width_, 1, fdim, rng);
  for (const auto& row : meta.at("heads")) {
    Head h;
    h.attr = row.at("attr").get<std::string>();
    h.kind = scm::var_kind_from_string(row.at("kind").get<std::string>());
    h.categories = row.at("categories").get<int>();
    h.mean = row.at("mean").get<double>();
    h.stddev = row.at("stddev").get<double>();
    int out = h.kind == scm::VarKind::categorical ? h.categories : 1;
    h.dense = nn::Dense<float>("head." + h.attr, fdim, out, rng, 1.0);
    fx.heads_.push_back(std::move(h));
  }
  nn::ParamList<float> ps;
  fx.trunk_.collect(ps);
  for (auto& h : fx.heads_) h.dense.collect(ps);
  nn::load_params(ck, ps);
  return fx;
}

}  // namespace cfbench::pred
