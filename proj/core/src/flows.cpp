#include "cfbench/flow/flows.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cfbench::flows {

namespace {
constexpr double kLogTwoPi = 1.8378770664093453;
constexpr double kScaleClamp = 6.0;   // |log scale| soft bound
constexpr double kDensityFloor = 1e-3;
}  // namespace

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::scale_shift: return "scale_shift";
    case LayerKind::affine: return "affine";
    case LayerKind::spline: return "spline";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "scale_shift") return LayerKind::scale_shift;
  if (s == "affine") return LayerKind::affine;
  if (s == "spline") return LayerKind::spline;
  throw ConfigError("unknown flow layer kind '" + s + "'");
}

FlowConfig FlowConfig::default_stack(int ctx_dim) {
  FlowConfig cfg;
  cfg.ctx_dim = ctx_dim;
  cfg.layers = {{LayerKind::scale_shift, 0, 0, 0.0},
                {LayerKind::affine, 32, 0, 0.0},
                {LayerKind::spline, 32, 8, 4.0}};
  return cfg;
}

Json FlowConfig::to_json() const {
  Json j;
  j["ctx_dim"] = ctx_dim;
  Json arr = Json::array();
  for (const auto& l : layers) {
    Json row;
    row["kind"] = to_string(l.kind);
    row["hidden"] = l.hidden;
    row["bins"] = l.bins;
    row["bound"] = l.bound;
    arr.push_back(std::move(row));
  }
  j["layers"] = std::move(arr);
  return j;
}

FlowConfig FlowConfig::from_json(const Json& j) {
  FlowConfig cfg;
  cfg.ctx_dim = j.at("ctx_dim").get<int>();
  for (const auto& row : j.at("layers")) {
    LayerConfig l;
    l.kind = layer_kind_from_string(row.at("kind").get<std::string>());
    l.hidden = row.at("hidden").get<int>();
    l.bins = row.at("bins").get<int>();
    l.bound = row.at("bound").get<double>();
    cfg.layers.push_back(l);
  }
  return cfg;
}

// ---- spline primitives -------------------------------------------------------

namespace detail {

SplineTable spline_table(const Eigen::Ref<const Eigen::RowVectorXd>& wl,
                         const Eigen::Ref<const Eigen::RowVectorXd>& vl, double bound) {
  const int k = static_cast<int>(wl.size());
  SplineTable t;
  t.bound = bound;
  Eigen::ArrayXd e = (wl.array() - wl.maxCoeff()).exp();
  t.w = e / e.sum() * (2.0 * bound);
  t.p = Eigen::ArrayXd(k + 1);
  for (int i = 0; i <= k; ++i) {
    double x = vl[i];
    t.p[i] = (x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x))) + kDensityFloor;
  }
  t.xk = Eigen::ArrayXd(k + 1);
  t.cum = Eigen::ArrayXd(k + 1);
  t.xk[0] = -bound;
  t.cum[0] = 0.0;
  for (int i = 0; i < k; ++i) {
    t.xk[i + 1] = t.xk[i] + t.w[i];
    t.cum[i + 1] = t.cum[i] + t.w[i] * 0.5 * (t.p[i] + t.p[i + 1]);
  }
  t.z = t.cum[k];
  return t;
}

int spline_bin(const SplineTable& t, double x) {
  const int k = static_cast<int>(t.w.size());
  if (x <= t.xk[0]) return 0;
  int lo = 0, hi = k - 1;
  while (lo < hi) {
    int mid = (lo + hi + 1) / 2;
    if (x >= t.xk[mid]) lo = mid;
    else hi = mid - 1;
  }
  return lo;
}

double spline_value(const SplineTable& t, double x, double* dydx) {
  if (x < -t.bound || x > t.bound) {
    if (dydx) *dydx = 1.0;
    return x;
  }
  int b = spline_bin(t, x);
  double r = (x - t.xk[b]) / t.w[b];
  double integ = t.w[b] * (t.p[b] * r + 0.5 * (t.p[b + 1] - t.p[b]) * r * r);
  double pdf = t.p[b] + (t.p[b + 1] - t.p[b]) * r;
  if (dydx) *dydx = 2.0 * t.bound * pdf / t.z;
  return -t.bound + 2.0 * t.bound * (t.cum[b] + integ) / t.z;
}

double spline_invert(const SplineTable& t, double y) {
  if (y <= -t.bound || y >= t.bound) return y;
  double lo = -t.bound, hi = t.bound;
  for (int it = 0; it < 200 && hi - lo > 1e-14; ++it) {
    double mid = 0.5 * (lo + hi);
    if (spline_value(t, mid, nullptr) < y) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

// ---- FlowLayer -----------------------------------------------------------------

FlowLayer::FlowLayer(const std::string& name, LayerConfig cfg, int ctx_dim, nn::Rng& rng)
    : cfg_(cfg), ctx_dim_(ctx_dim) {
  if (cfg_.kind == LayerKind::spline && cfg_.bins < 2)
    throw ConfigError("spline layer needs >= 2 bins");
  if (cfg_.kind == LayerKind::spline && cfg_.bound <= 0)
    throw ConfigError("spline layer needs positive bound");
  if (conditional()) {
    if (cfg_.hidden > 0) {
      c1_ = nn::Dense<double>(name + ".c1", ctx_dim_, cfg_.hidden, rng);
      c2_ = nn::Dense<double>(name + ".c2", cfg_.hidden, cfg_.hidden, rng);
      chead_ = nn::Dense<double>(name + ".head", cfg_.hidden, head_dim(), rng, 0.01);
    } else {
      chead_ = nn::Dense<double>(name + ".head", ctx_dim_, head_dim(), rng, 0.01);
    }
  } else {
    head_row_ = nn::Param<double>(name + ".row", TD({1, head_dim()}));
  }
}

void FlowLayer::collect(nn::ParamList<double>& ps) {
  if (conditional()) {
    if (cfg_.hidden > 0) {
      c1_.collect(ps);
      c2_.collect(ps);
    }
    chead_.collect(ps);
  } else {
    ps.push_back(&head_row_);
  }
}

DVar FlowLayer::head_nodes(DGraph& g, DVar ctx, int rows) {
  if (conditional()) {
    if (!ctx) throw ValidationError("flow layer expects a context");
    if (cfg_.hidden > 0) {
      DVar h = nn::leaky_relu(c1_(g, ctx));
      h = nn::leaky_relu(c2_(g, h));
      return chead_(g, h);
    }
    return chead_(g, ctx);
  }
  TD ones({rows, 1});
  ones.array().setConstant(1.0);
  return nn::matmul(g.constant(ones), g.param(head_row_));
}

Eigen::MatrixXd FlowLayer::head_values(const TD& ctx, int rows) const {
  if (conditional()) {
    Eigen::MatrixXd h = ctx.mat();
    auto lrelu = [](Eigen::MatrixXd m) {
      return m.array().max(0.0).matrix() + (m.array().min(0.0) * 0.1).matrix();
    };
    if (cfg_.hidden > 0) {
      h = lrelu((h * c1_.w.value.mat()).rowwise() +
                Eigen::RowVectorXd::Map(c1_.b.value.data(), c1_.b.value.numel()));
      h = lrelu((h * c2_.w.value.mat()).rowwise() +
                Eigen::RowVectorXd::Map(c2_.b.value.data(), c2_.b.value.numel()));
    }
    return (h * chead_.w.value.mat()).rowwise() +
           Eigen::RowVectorXd::Map(chead_.b.value.data(), chead_.b.value.numel());
  }
  return Eigen::RowVectorXd::Map(head_row_.value.data(), head_dim()).replicate(rows, 1);
}

std::pair<DVar, DVar> FlowLayer::normalize(DGraph& g, DVar v, DVar ctx) {
  const int n = v->val.rows();
  DVar head = head_nodes(g, ctx, n);

  if (cfg_.kind != LayerKind::spline) {
    DVar t = nn::slice_cols(head, 0, 1);
    DVar sraw = nn::slice_cols(head, 1, 1);
    DVar s = nn::scale(nn::tanh_fn(nn::scale(sraw, 1.0 / kScaleClamp)), kScaleClamp);
    DVar u = nn::mul(nn::sub(v, t), nn::exp_fn(nn::neg(s)));
    return {u, nn::neg(s)};
  }

  const int k = cfg_.bins;
  const double bound = cfg_.bound;

  // Bin membership from current values; the graph below recomputes the same
  // quantities differentiably.
  TD sel({n, k});
  TD sel1({n, k + 1});   // node p_b
  TD sel2({n, k + 1});   // node p_{b+1}
  TD inside({n, 1});
  for (int r = 0; r < n; ++r) {
    auto table = detail::spline_table(head->val.mat().row(r).leftCols(k),
                                      head->val.mat().row(r).rightCols(k + 1), bound);
    double x = v->val[r];
    bool in = x >= -bound && x <= bound;
    inside[r] = in ? 1.0 : 0.0;
    // Out-of-range rows take the identity tail; their graph path below is
    // evaluated at 0 (always in range) so no log sees a bad argument.
    int b = detail::spline_bin(table, in ? x : 0.0);
    sel[static_cast<int64_t>(r) * k + b] = 1.0;
    sel1[static_cast<int64_t>(r) * (k + 1) + b] = 1.0;
    sel2[static_cast<int64_t>(r) * (k + 1) + b + 1] = 1.0;
  }

  DVar wl = nn::slice_cols(head, 0, k);
  DVar vl = nn::slice_cols(head, k, k + 1);
  DVar w = nn::scale(nn::softmax_rows(wl), 2.0 * bound);
  DVar p = nn::add_const(nn::softplus(vl), kDensityFloor);

  // knots and cumulative integral by prefix sums
  TD strict({k, k});
  for (int i = 0; i < k; ++i)
    for (int j = i + 1; j < k; ++j) strict[static_cast<int64_t>(i) * k + j] = 1.0;
  DVar x_left_all = nn::add_const(nn::matmul(w, g.constant(strict)), -bound);
  DVar p_lo_all = nn::slice_cols(p, 0, k);
  DVar p_hi_all = nn::slice_cols(p, 1, k);
  DVar seg = nn::scale(nn::mul(w, nn::add(p_lo_all, p_hi_all)), 0.5);
  DVar cum_left = nn::matmul(seg, g.constant(strict));
  DVar z = nn::row_sum(seg);

  auto pick = [&](DVar m, const TD& s_) { return nn::row_sum(nn::mul(m, g.constant(s_))); };
  DVar w_b = pick(w, sel);
  DVar x_b = pick(x_left_all, sel);
  DVar c_b = pick(cum_left, sel);
  DVar p_b = pick(p, sel1);
  DVar p_b1 = pick(p, sel2);

  DVar mask = g.constant(inside);
  DVar v_used = nn::mul(v, mask);  // out-of-range rows evaluate at 0
  DVar r = nn::div(nn::sub(v_used, x_b), w_b);
  DVar dp = nn::sub(p_b1, p_b);
  DVar integ = nn::mul(w_b, nn::add(nn::mul(p_b, r), nn::scale(nn::mul(dp, nn::square(r)), 0.5)));
  DVar y_in = nn::add_const(nn::scale(nn::div(nn::add(c_b, integ), z), 2.0 * bound), -bound);
  DVar pdf = nn::add(p_b, nn::mul(dp, r));
  DVar ld_in = nn::add_const(nn::sub(nn::log_fn(pdf), nn::log_fn(z)), std::log(2.0 * bound));

  TD outv({n, 1});
  outv.array() = 1.0 - inside.array();
  DVar inv_mask = g.constant(outv);
  DVar y = nn::add(nn::mul(y_in, mask), nn::mul(v, inv_mask));
  DVar ld = nn::mul(ld_in, mask);
  return {y, ld};
}

TD FlowLayer::invert(const TD& v, const TD& ctx, TD* logdet) const {
  const int n = v.rows();
  Eigen::MatrixXd head = head_values(ctx, n);
  TD out({n, 1});
  if (logdet) *logdet = TD({n, 1});

  if (cfg_.kind != LayerKind::spline) {
    for (int r = 0; r < n; ++r) {
      double t = head(r, 0);
      double s = kScaleClamp * std::tanh(head(r, 1) / kScaleClamp);
      out[r] = (v[r] - t) * std::exp(-s);
      if (logdet) (*logdet)[r] = -s;
    }
    return out;
  }
  const int k = cfg_.bins;
  for (int r = 0; r < n; ++r) {
    auto table = detail::spline_table(head.row(r).leftCols(k), head.row(r).rightCols(k + 1),
                                      cfg_.bound);
    double dydx = 1.0;
    out[r] = detail::spline_value(table, v[r], &dydx);
    if (logdet) (*logdet)[r] = std::log(dydx);
  }
  return out;
}

TD FlowLayer::generate(const TD& u, const TD& ctx) const {
  const int n = u.rows();
  Eigen::MatrixXd head = head_values(ctx, n);
  TD out({n, 1});

  if (cfg_.kind != LayerKind::spline) {
    for (int r = 0; r < n; ++r) {
      double t = head(r, 0);
      double s = kScaleClamp * std::tanh(head(r, 1) / kScaleClamp);
      out[r] = u[r] * std::exp(s) + t;
    }
    return out;
  }
  const int k = cfg_.bins;
  for (int r = 0; r < n; ++r) {
    auto table = detail::spline_table(head.row(r).leftCols(k), head.row(r).rightCols(k + 1),
                                      cfg_.bound);
    out[r] = detail::spline_invert(table, u[r]);
  }
  return out;
}

// ---- FlowStack -------------------------------------------------------------------

FlowStack::FlowStack(FlowConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  nn::Rng rng(hash_str(seed, "flow-init"));
  for (size_t i = 0; i < cfg_.layers.size(); ++i)
    layers_.emplace_back("f.l" + std::to_string(i), cfg_.layers[i], cfg_.ctx_dim, rng);
}

void FlowStack::set_value_stats(double mean, double stddev) {
  if (stddev <= 0) throw ValidationError("flow value stddev must be positive");
  vmean_ = mean;
  vstd_ = stddev;
}

void FlowStack::collect(nn::ParamList<double>& ps) {
  for (auto& l : layers_) l.collect(ps);
}

DVar FlowStack::log_prob_nodes(DGraph& g, DVar v_raw, DVar ctx) {
  DVar x = nn::scale(nn::add_const(v_raw, -vmean_), 1.0 / vstd_);
  DVar ld_total = nullptr;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    auto [u, ld] = it->normalize(g, x, ctx);
    x = u;
    ld_total = ld_total ? nn::add(ld_total, ld) : ld;
  }
  DVar lp = nn::add_const(nn::scale(nn::square(x), -0.5), -0.5 * kLogTwoPi - std::log(vstd_));
  return ld_total ? nn::add(lp, ld_total) : lp;
}

TD FlowStack::log_prob(const TD& v, const TD& ctx) const {
  const int n = v.rows();
  TD x({n, 1});
  x.array() = (v.array() - vmean_) / vstd_;
  TD ld_total({n, 1});
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    TD ld;
    x = it->invert(x, ctx, &ld);
    ld_total.array() += ld.array();
  }
  TD lp({n, 1});
  lp.array() = -0.5 * x.array().square() - 0.5 * kLogTwoPi - std::log(vstd_) + ld_total.array();
  return lp;
}

TD FlowStack::forward(const TD& noise, const TD& ctx) const {
  TD x = noise;
  for (const auto& l : layers_) x = l.generate(x, ctx);
  TD out({x.rows(), 1});
  out.array() = x.array() * vstd_ + vmean_;
  return out;
}

TD FlowStack::inverse(const TD& value, const TD& ctx) const {
  TD x({value.rows(), 1});
  x.array() = (value.array() - vmean_) / vstd_;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) x = it->invert(x, ctx, nullptr);
  return x;
}

double FlowStack::val_nll(const TD& v, const TD& ctx) const {
  TD lp = log_prob(v, ctx);
  return -lp.array().mean();
}

FitResult FlowStack::fit(const TD& train_v, const TD& train_ctx, const TD& val_v,
                         const TD& val_ctx, const FitOptions& opts) {
  const int n = train_v.rows();
  if (n < 2) throw ValidationError("flow fit: need at least 2 training rows");
  if (cfg_.ctx_dim > 0 &&
      (train_ctx.rows() != n || train_ctx.cols() != cfg_.ctx_dim))
    throw ValidationError("flow fit: context shape mismatch");

  double mean = train_v.array().mean();
  double var = (train_v.array() - mean).square().sum() / (n - 1);
  if (var < 1e-16) throw ValidationError("flow fit: degenerate value column");
  set_value_stats(mean, std::sqrt(var));

  nn::ParamList<double> ps;
  collect(ps);
  nn::AdamConfig acfg;
  acfg.lr = opts.lr;
  acfg.clip_norm = opts.grad_clip;
  acfg.skip_norm = opts.grad_skip;
  nn::Adam<double> adam(acfg);
  nn::Rng rng(hash_str(opts.seed, "flow-fit"));

  FitResult res;
  res.init_val_nll = val_nll(val_v, val_ctx);
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
      TD bv({bs, 1});
      TD bc({bs, std::max(1, cfg_.ctx_dim)});
      for (int i = 0; i < bs; ++i) {
        bv[i] = train_v[idx[at + i]];
        for (int c = 0; c < cfg_.ctx_dim; ++c)
          bc[static_cast<int64_t>(i) * cfg_.ctx_dim + c] =
              train_ctx[static_cast<int64_t>(idx[at + i]) * cfg_.ctx_dim + c];
      }
      DGraph g;
      DVar ctx = cfg_.ctx_dim > 0 ? g.constant(bc) : nullptr;
      DVar lp = log_prob_nodes(g, g.constant(bv), ctx);
      DVar loss = nn::scale(nn::mean_all(lp), -1.0);
      g.backward(loss);
      adam.step(ps);
    }
    double nll = val_nll(val_v, val_ctx);
    res.curve.push_back(nll);
    res.epochs = epoch + 1;
    if (nll < best - 1e-9) {
      best = nll;
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

void FlowStack::save(nn::Checkpoint& ck, const std::string& prefix) const {
  Json meta = cfg_.to_json();
  meta["value_mean"] = vmean_;
  meta["value_std"] = vstd_;
  meta["trained"] = trained_;
  ck.meta[prefix.empty() ? "flow" : prefix] = std::move(meta);
  auto& self = const_cast<FlowStack&>(*this);
  nn::ParamList<double> ps;
  self.collect(ps);
  for (auto* p : ps) ck.put((prefix.empty() ? "" : prefix + ".") + p->name, p->value);
}

FlowStack FlowStack::load(const nn::Checkpoint& ck, const std::string& prefix) {
  const Json& meta = ck.meta.at(prefix.empty() ? "flow" : prefix);
  FlowStack st(FlowConfig::from_json(meta), 0);
  st.set_value_stats(meta.at("value_mean").get<double>(), meta.at("value_std").get<double>());
  st.trained_ = meta.value("trained", false);
  nn::ParamList<double> ps;
  st.collect(ps);
  for (auto* p : ps) {
    std::string name = (prefix.empty() ? "" : prefix + ".") + p->name;
    const auto* e = ck.find(name);
    if (!e) throw IoError("flow checkpoint missing tensor '" + name + "'");
    if (!e->f64.same_shape(p->value))
      throw IoError("flow checkpoint tensor '" + name + "' has wrong shape");
    p->value = e->f64;
  }
  return st;
}

// ---- FlowMechanism -----------------------------------------------------------------

TD FlowMechanism::encode_ctx(const std::vector<scm::Value>& parents, int rows) const {
  int d = codec_.dim();
  TD ctx({rows, std::max(1, d)});
  if (d > 0) {
    Eigen::VectorXd enc = codec_.encode(parents);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < d; ++c) ctx[static_cast<int64_t>(r) * d + c] = enc[c];
  }
  return ctx;
}

scm::NoisePayload FlowMechanism::abduct(const scm::Value& value,
                                        const std::vector<scm::Value>& parents,
                                        const scm::AbductOptions&) const {
  TD v({1, 1});
  v[0] = value.num();
  TD u = stack_.inverse(v, encode_ctx(parents, 1));
  scm::NoisePayload out;
  out.tag = scm::NoisePayload::Tag::scalar;
  out.eps = u[0];
  return out;
}

scm::Value FlowMechanism::predict(const scm::NoisePayload& noise,
                                  const std::vector<scm::Value>& parents) const {
  if (noise.tag != scm::NoisePayload::Tag::scalar)
    throw ValidationError("flow mechanism got a non-scalar noise payload");
  TD u({1, 1});
  u[0] = noise.eps;
  TD v = stack_.forward(u, encode_ctx(parents, 1));
  return scm::Value::number(v[0]);
}

double FlowMechanism::log_prob(double value, const std::vector<scm::Value>& parents) const {
  TD v({1, 1});
  v[0] = value;
  return stack_.log_prob(v, encode_ctx(parents, 1))[0];
}

void FlowMechanism::save(nn::Checkpoint& ck) const {
  ck.meta["kind"] = "mechanism";
  ck.meta["family"] = "flow";
  ck.meta["parent_codec"] = codec_.to_json();
  stack_.save(ck, "flow");
}

std::shared_ptr<FlowMechanism> FlowMechanism::load(const nn::Checkpoint& ck) {
  if (ck.meta.value("family", "") != "flow")
    throw IoError("checkpoint does not hold a flow mechanism");
  scm::ParentCodec codec = scm::ParentCodec::from_json(ck.meta.at("parent_codec"));
  return std::make_shared<FlowMechanism>(FlowStack::load(ck, "flow"), std::move(codec));
}

}  // namespace cfbench::flows
