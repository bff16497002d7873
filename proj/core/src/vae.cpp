#include "cfbench/vae/vae.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "cfbench/common.hpp"

namespace cfbench::vae {

using nn::TensorF;
using nn::Var;
using FGraph = nn::Graph<float>;
using LatentMode = scm::AbductOptions::LatentMode;

namespace {

constexpr double kLogTwoPi = 1.8378770664093453;

int int_log2(int v) {
  int l = 0;
  while ((1 << l) < v) ++l;
  return l;
}

std::vector<int> default_encoder_widths(int height) {
  static const int ramp[] = {16, 24, 32, 48, 64, 96, 128, 160};
  int levels = int_log2(height) + 1;
  std::vector<int> w(levels);
  for (int i = 0; i < levels; ++i) w[i] = ramp[std::min(i, 7)];
  return w;
}

int preset_width(int resolution) {
  switch (resolution) {
    case 1: return 96;
    case 4: return 64;
    case 8: return 48;
    case 16: return 32;
    default: return 16;
  }
}

TensorF normal_tensor(nn::Rng& rng, int rows, int cols) {
  TensorF t({rows, cols});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal());
  return t;
}

TensorF ones_column(int n) {
  TensorF t({n, 1});
  for (int i = 0; i < n; ++i) t[i] = 1.0f;
  return t;
}

TensorF gather_rows(const TensorF& src, const std::vector<int>& idx) {
  TensorF out({static_cast<int>(idx.size()), static_cast<int>(src.cols())});
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(src.data() + static_cast<int64_t>(idx[i]) * src.cols(), src.cols(),
                out.data() + static_cast<int64_t>(i) * src.cols());
  return out;
}

TensorF slice_rows(const TensorF& src, int begin, int len) {
  TensorF out({len, static_cast<int>(src.cols())});
  std::copy_n(src.data() + static_cast<int64_t>(begin) * src.cols(),
              static_cast<int64_t>(len) * src.cols(), out.data());
  return out;
}

// Mean over rows of the per-row Gaussian log density sum.
Var<float> gaussian_ll(FGraph& g, const TensorF& x, Var<float> mu, Var<float> sigma) {
  Var<float> diff = nn::sub(g.constant(x), mu);
  Var<float> zr = nn::div(diff, sigma);
  Var<float> pen = nn::add(nn::scale(nn::square(zr), 0.5f),
                           nn::add_const(nn::log_fn(sigma), static_cast<float>(0.5 * kLogTwoPi)));
  return nn::neg(nn::mean_all(nn::row_sum(pen)));
}

std::string components_text(double recon_ll, const std::vector<double>& kl) {
  std::ostringstream os;
  os << "recon_ll=" << recon_ll << " kl=[";
  for (size_t i = 0; i < kl.size(); ++i) os << (i ? " " : "") << kl[i];
  os << "]";
  return os.str();
}

}  // namespace

double ElboComponents::kl_total() const {
  double s = 0.0;
  for (double k : kl) s += k;
  return s;
}

VaeSpec vae_spec(const std::string& dataset, std::vector<std::string> parents, int height,
                 int width) {
  VaeSpec s;
  s.family = "vae";
  s.dataset = dataset;
  s.parents = std::move(parents);
  s.height = height;
  s.width = width;
  s.resolutions = {1};
  s.widths = {96};
  s.blocks_per_resolution = 1;
  s.latent_channels = 16;
  s.encoder_widths = default_encoder_widths(height);
  return s;
}

VaeSpec hvae_spec(const std::string& dataset, std::vector<std::string> parents, int height,
                  int width) {
  VaeSpec s;
  s.family = "hvae";
  s.dataset = dataset;
  s.parents = std::move(parents);
  s.height = height;
  s.width = width;
  s.resolutions.clear();
  s.widths.clear();
  for (int r : {1, 4, 8, 16, 32}) {
    if (r > height) break;
    s.resolutions.push_back(r);
    s.widths.push_back(preset_width(r));
  }
  s.blocks_per_resolution = 2;
  s.latent_channels = 16;
  s.encoder_widths = default_encoder_widths(height);
  return s;
}

TrainConfig vae_train_defaults() {
  TrainConfig c;
  c.lr = 5e-4;
  c.batch = 128;
  c.max_epochs = 50;
  c.patience = 10;
  c.beta = 1.0;
  return c;
}

TrainConfig hvae_train_defaults() {
  TrainConfig c;
  c.lr = 1e-3;
  c.weight_decay = 1e-2;
  c.batch = 128;
  c.max_epochs = 40;
  c.patience = 10;
  c.beta = 1.0;
  c.clip_norm = 350.0;
  c.skip_norm = 500.0;
  return c;
}

void TopDownVae::validate_spec() const {
  if (spec_.height != spec_.width) throw ConfigError("latent model: images must be square");
  if (spec_.height < 2 || (spec_.height & (spec_.height - 1)) != 0)
    throw ConfigError("latent model: image side must be a power of two");
  if (spec_.resolutions.empty()) throw ConfigError("latent model: needs at least one resolution");
  if (spec_.widths.size() != spec_.resolutions.size())
    throw ConfigError("latent model: widths must align with resolutions");
  for (size_t i = 0; i < spec_.resolutions.size(); ++i) {
    int r = spec_.resolutions[i];
    if (r < 1 || r > spec_.height || (r & (r - 1)) != 0)
      throw ConfigError("latent model: bad resolution " + std::to_string(r));
    if (i > 0) {
      int ratio = r / spec_.resolutions[i - 1];
      if (ratio != 2 && ratio != 4)
        throw ConfigError("latent model: resolutions must ascend by 2x or 4x");
    }
  }
  if (spec_.blocks_per_resolution < 1 || spec_.latent_channels < 1)
    throw ConfigError("latent model: blocks and latent channels must be positive");
  int levels = int_log2(spec_.height) + 1;
  if (static_cast<int>(spec_.encoder_widths.size()) != levels)
    throw ConfigError("latent model: encoder widths must cover every halving down to 1x1");
}

TopDownVae::TopDownVae(VaeSpec spec, const data::Dataset& schema_source, uint64_t seed)
    : spec_(std::move(spec)) {
  for (const std::string& name : spec_.parents) {
    const data::AttrColumn& col = schema_source.attr(name);
    scm::ParentCodec::Entry e;
    e.name = name;
    e.kind = col.kind;
    e.categories = col.categories;
    codec_.entries.push_back(std::move(e));
  }
  if (spec_.encoder_widths.empty()) spec_.encoder_widths = default_encoder_widths(spec_.height);
  validate_spec();
  build(seed);
}

TopDownVae::TopDownVae(VaeSpec spec, scm::ParentCodec codec, uint64_t seed)
    : spec_(std::move(spec)), codec_(std::move(codec)) {
  if (spec_.encoder_widths.empty()) spec_.encoder_widths = default_encoder_widths(spec_.height);
  validate_spec();
  build(seed);
}

void TopDownVae::build(uint64_t seed) {
  nn::Rng rng(hash_str(seed, "latent-init:" + spec_.family + ":" + spec_.dataset));
  const int P = codec_.dim();
  const int C = spec_.latent_channels;
  const int H = spec_.height;
  const int levels = int_log2(H) + 1;

  enc_.clear();
  int prev = 1 + P;
  for (int i = 0; i < levels; ++i) {
    int w = spec_.encoder_widths[i];
    int r = H >> i;
    std::string base = "vae.enc" + std::to_string(i);
    enc_.push_back({nn::Conv2d<float>(base + ".a", {prev, r, r, w}, rng),
                    nn::Conv2d<float>(base + ".b", {w, r, r, w}, rng)});
    prev = w;
  }

  int r0 = spec_.resolutions.front();
  int w0 = spec_.widths.front();
  h0p_ = nn::Param<float>("vae.h0p", nn::random_normal<float>(rng, {1, w0 * r0 * r0}, 0.1));
  h0c_ = nn::Param<float>("vae.h0c", nn::random_normal<float>(rng, {1, w0 * r0 * r0}, 0.1));

  blocks_.clear();
  ups_.clear();
  const int R = static_cast<int>(spec_.resolutions.size());
  for (int ri = 0; ri < R; ++ri) {
    int r = spec_.resolutions[ri];
    int w = spec_.widths[ri];
    int ew = encoder_width(r);
    std::vector<Block> row;
    for (int b = 0; b < spec_.blocks_per_resolution; ++b) {
      std::string base = "vae.td" + std::to_string(ri) + ".b" + std::to_string(b) + ".";
      Block blk{nn::Conv2d<float>(base + "prior", {w, r, r, 2 * C}, rng, 1.0),
                nn::Conv2d<float>(base + "post", {ew + w, r, r, 2 * C}, rng, 1.0),
                nn::Conv2d<float>(base + "fc1", {C + P, r, r, w}, rng),
                nn::Conv2d<float>(base + "fc2", {w, r, r, w}, rng, 0.25),
                nn::Conv2d<float>(base + "fp1", {C, r, r, w}, rng),
                nn::Conv2d<float>(base + "fp2", {w, r, r, w}, rng, 0.25)};
      row.push_back(std::move(blk));
    }
    blocks_.push_back(std::move(row));
    if (ri + 1 < R) {
      int rn = spec_.resolutions[ri + 1];
      int wn = spec_.widths[ri + 1];
      std::string base = "vae.up" + std::to_string(ri);
      Transition tr{int_log2(rn / r),
                    nn::Conv2d<float>(base + ".p", {w, rn, rn, wn}, rng),
                    nn::Conv2d<float>(base + ".c", {w, rn, rn, wn}, rng)};
      ups_.push_back(std::move(tr));
    }
  }

  tail_.clear();
  tail_widths_.clear();
  {
    int r = spec_.resolutions.back();
    int w = spec_.widths.back();
    int k = 0;
    while (r < H) {
      r *= 2;
      int wn = std::max(w / 2, 16);
      tail_.emplace_back("vae.tail" + std::to_string(k), nn::Conv2dSpec{w, r, r, wn}, rng, 2.0);
      tail_widths_.push_back(wn);
      w = wn;
      ++k;
    }
    pixel_head_ = nn::Conv2d<float>("vae.pix", {w, H, H, 2}, rng, 1.0);
  }
}

int TopDownVae::encoder_width(int resolution) const {
  return spec_.encoder_widths[int_log2(spec_.height / resolution)];
}

nn::ParamList<float> TopDownVae::params() {
  nn::ParamList<float> ps;
  ps.push_back(&h0p_);
  ps.push_back(&h0c_);
  for (auto& lvl : enc_) {
    lvl.a.collect(ps);
    lvl.b.collect(ps);
  }
  for (auto& row : blocks_)
    for (auto& b : row) {
      b.prior_head.collect(ps);
      b.post_head.collect(ps);
      b.fc1.collect(ps);
      b.fc2.collect(ps);
      b.fp1.collect(ps);
      b.fp2.collect(ps);
    }
  for (auto& u : ups_) {
    u.prior_adapt.collect(ps);
    u.cond_adapt.collect(ps);
  }
  for (auto& t : tail_) t.collect(ps);
  pixel_head_.collect(ps);
  return ps;
}

Var<float> TopDownVae::encoder_level(FGraph& g, Var<float> x, int level) const {
  auto& self = const_cast<TopDownVae&>(*this);
  x = nn::leaky_relu(self.enc_[level].a(g, x));
  return nn::leaky_relu(self.enc_[level].b(g, x));
}

TopDownVae::PassOut TopDownVae::run(FGraph& g, const TensorF* images, const TensorF* parents,
                                    const LatentStack* given, LatentMode mode, nn::Rng* rng,
                                    bool want_pixels) const {
  auto& self = const_cast<TopDownVae&>(*this);
  const int H = spec_.height, W = spec_.width;
  const int P = codec_.dim();
  const int C = spec_.latent_channels;
  const int R = static_cast<int>(spec_.resolutions.size());
  const bool posterior = images != nullptr;
  if (posterior && given != nullptr)
    throw ValidationError("latent model: pass either images or latents, not both");
  if (!posterior && given == nullptr)
    throw ValidationError("latent model: prior sampling goes through sample_prior");

  const int n = posterior ? static_cast<int>(images->rows())
                          : static_cast<int>(given->groups.at(0).z.rows());
  if (parents == nullptr) throw ValidationError("latent model: parents required");
  if (parents->rows() != n || parents->cols() != P)
    throw ValidationError("latent model: parent rows must be [n, " + std::to_string(P) + "]");
  if (posterior && images->cols() != static_cast<int64_t>(H) * W)
    throw ValidationError("latent model: images must be [n, " + std::to_string(H * W) + "]");

  // Encoder features per stochastic resolution.
  std::vector<Var<float>> feats(R);
  if (posterior) {
    Var<float> x = g.constant(*images);
    if (P > 0) x = nn::concat_cols(x, g.constant(nn::broadcast_channels(*parents, H, W)));
    int r = H;
    for (int level = 0;; ++level) {
      x = encoder_level(g, x, level);
      for (int i = 0; i < R; ++i)
        if (spec_.resolutions[i] == r) feats[i] = x;
      if (r == 1) break;
      x = nn::avg_pool2(x, spec_.encoder_widths[level], r, r);
      r /= 2;
    }
  }

  std::map<int, Var<float>> pmap;
  auto pa_at = [&](int r) {
    auto it = pmap.find(r);
    if (it != pmap.end()) return it->second;
    Var<float> v = g.constant(nn::broadcast_channels(*parents, r, r));
    pmap.emplace(r, v);
    return v;
  };

  Var<float> ones = g.constant(ones_column(n));
  Var<float> hp = nullptr;
  if (posterior) hp = nn::matmul(ones, g.param(self.h0p_));
  Var<float> hc = nn::matmul(ones, g.param(self.h0c_));

  PassOut out;
  int gi = 0;
  for (int ri = 0; ri < R; ++ri) {
    int r = spec_.resolutions[ri];
    int w = spec_.widths[ri];
    int zdim = C * r * r;
    for (int b = 0; b < spec_.blocks_per_resolution; ++b) {
      Block& blk = self.blocks_[ri][b];
      Var<float> z;
      if (posterior) {
        Var<float> pr = blk.prior_head(g, hp);
        Var<float> mu_p = nn::slice_cols(pr, 0, zdim);
        Var<float> sg_p = nn::add_const(nn::softplus(nn::slice_cols(pr, zdim, zdim)), kSigmaMin);
        Var<float> po = blk.post_head(g, nn::concat_cols(feats[ri], hc));
        Var<float> mu_q = nn::slice_cols(po, 0, zdim);
        Var<float> sg_q = nn::add_const(nn::softplus(nn::slice_cols(po, zdim, zdim)), kSigmaMin);
        if (mode == LatentMode::sample) {
          if (rng == nullptr) throw ValidationError("latent model: sampling needs an rng");
          z = nn::add(mu_q, nn::mul(sg_q, g.constant(normal_tensor(*rng, n, zdim))));
        } else {
          z = mu_q;
        }
        Var<float> t1 = nn::sub(nn::log_fn(sg_p), nn::log_fn(sg_q));
        Var<float> num = nn::add(nn::square(sg_q), nn::square(nn::sub(mu_q, mu_p)));
        Var<float> kle = nn::add_const(
            nn::add(t1, nn::div(num, nn::scale(nn::square(sg_p), 2.0f))), -0.5f);
        out.kl.push_back(nn::mean_all(nn::row_sum(kle)));
        hp = nn::add(hp, blk.fp2(g, nn::leaky_relu(blk.fp1(g, z))));
      } else {
        const LatentGroup& grp = given->groups.at(gi);
        if (grp.resolution != r || grp.channels != C || grp.z.rows() != n ||
            grp.z.cols() != zdim)
          throw ValidationError("latent model: latent group " + std::to_string(gi) +
                                " does not match the architecture");
        z = g.constant(grp.z);
      }
      out.z.push_back(z);
      Var<float> zin = P > 0 ? nn::concat_cols(z, pa_at(r)) : z;
      hc = nn::add(hc, blk.fc2(g, nn::leaky_relu(blk.fc1(g, zin))));
      ++gi;
    }
    if (ri + 1 < R) {
      Transition& tr = self.ups_[ri];
      int rr = r;
      for (int d = 0; d < tr.doublings; ++d) {
        if (posterior) hp = nn::upsample2(hp, w, rr, rr);
        hc = nn::upsample2(hc, w, rr, rr);
        rr *= 2;
      }
      if (posterior) hp = nn::leaky_relu(tr.prior_adapt(g, hp));
      hc = nn::leaky_relu(tr.cond_adapt(g, hc));
    }
  }

  if (want_pixels) {
    int r = spec_.resolutions.back();
    int w = spec_.widths.back();
    for (size_t k = 0; k < tail_.size(); ++k) {
      hc = nn::upsample2(hc, w, r, r);
      r *= 2;
      hc = nn::leaky_relu(self.tail_[k](g, hc));
      w = tail_widths_[k];
    }
    Var<float> px = self.pixel_head_(g, hc);
    out.mu = nn::sigmoid(nn::slice_cols(px, 0, H * W));
    out.sigma = nn::add_const(nn::softplus(nn::slice_cols(px, H * W, H * W)), kSigmaMin);
  }
  return out;
}

nn::TensorF TopDownVae::parent_rows(const data::Dataset& ds, const std::vector<int>& idx) const {
  return data::encode_parent_rows(codec_, ds, idx);
}

nn::TensorF TopDownVae::encode_parents(const std::vector<std::vector<scm::Value>>& rows) const {
  const int P = codec_.dim();
  TensorF out({static_cast<int>(rows.size()), P});
  for (size_t i = 0; i < rows.size(); ++i) {
    Eigen::VectorXd enc = codec_.encode(rows[i]);
    for (int j = 0; j < P; ++j) out[static_cast<int64_t>(i) * P + j] = static_cast<float>(enc[j]);
  }
  return out;
}

LatentStack TopDownVae::encode(const TensorF& images, const TensorF& parents, LatentMode mode,
                               uint64_t seed) const {
  if (!trained_) throw ValidationError("latent model: encode before training");
  const int n = static_cast<int>(images.rows());
  const int C = spec_.latent_channels;
  nn::Rng rng(hash_str(seed, "latent-encode"));
  LatentStack st;
  for (int r : spec_.resolutions)
    for (int b = 0; b < spec_.blocks_per_resolution; ++b) {
      (void)b;
      LatentGroup grp;
      grp.resolution = r;
      grp.channels = C;
      grp.z = TensorF({n, C * r * r});
      st.groups.push_back(std::move(grp));
    }
  for (int at = 0; at < n; at += 256) {
    int bsz = std::min(256, n - at);
    TensorF xb = slice_rows(images, at, bsz);
    TensorF pb = slice_rows(parents, at, bsz);
    FGraph g;
    PassOut po = run(g, &xb, &pb, nullptr, mode, &rng, false);
    for (size_t k = 0; k < st.groups.size(); ++k) {
      const TensorF& zv = po.z[k]->val;
      std::copy_n(zv.data(), zv.numel(),
                  st.groups[k].z.data() + static_cast<int64_t>(at) * zv.cols());
    }
  }
  return st;
}

GaussianHead TopDownVae::decode(const LatentStack& latents, const TensorF& parents) const {
  if (!trained_) throw ValidationError("latent model: decode before training");
  if (latents.groups.size() !=
      spec_.resolutions.size() * static_cast<size_t>(spec_.blocks_per_resolution))
    throw ValidationError("latent model: latent stack has the wrong number of groups");
  const int n = static_cast<int>(latents.groups.at(0).z.rows());
  const int HW = spec_.height * spec_.width;
  GaussianHead head{TensorF({n, HW}), TensorF({n, HW})};
  for (int at = 0; at < n; at += 256) {
    int bsz = std::min(256, n - at);
    LatentStack chunk;
    for (const auto& grp : latents.groups) {
      LatentGroup cg;
      cg.resolution = grp.resolution;
      cg.channels = grp.channels;
      cg.z = slice_rows(grp.z, at, bsz);
      chunk.groups.push_back(std::move(cg));
    }
    TensorF pb = slice_rows(parents, at, bsz);
    FGraph g;
    PassOut po = run(g, nullptr, &pb, &chunk, LatentMode::mean, nullptr, true);
    std::copy_n(po.mu->val.data(), po.mu->val.numel(),
                head.mu.data() + static_cast<int64_t>(at) * HW);
    std::copy_n(po.sigma->val.data(), po.sigma->val.numel(),
                head.sigma.data() + static_cast<int64_t>(at) * HW);
  }
  return head;
}

LatentStack TopDownVae::sample_prior(int n, uint64_t seed) const {
  if (!trained_) throw ValidationError("latent model: sample before training");
  auto& self = const_cast<TopDownVae&>(*this);
  const int C = spec_.latent_channels;
  const int R = static_cast<int>(spec_.resolutions.size());
  nn::Rng rng(hash_str(seed, "latent-prior"));
  LatentStack st;
  FGraph g;
  Var<float> ones = g.constant(ones_column(n));
  Var<float> hp = nn::matmul(ones, g.param(self.h0p_));
  for (int ri = 0; ri < R; ++ri) {
    int r = spec_.resolutions[ri];
    int w = spec_.widths[ri];
    int zdim = C * r * r;
    for (int b = 0; b < spec_.blocks_per_resolution; ++b) {
      Block& blk = self.blocks_[ri][b];
      Var<float> pr = blk.prior_head(g, hp);
      Var<float> mu_p = nn::slice_cols(pr, 0, zdim);
      Var<float> sg_p = nn::add_const(nn::softplus(nn::slice_cols(pr, zdim, zdim)), kSigmaMin);
      Var<float> z = nn::add(mu_p, nn::mul(sg_p, g.constant(normal_tensor(rng, n, zdim))));
      hp = nn::add(hp, blk.fp2(g, nn::leaky_relu(blk.fp1(g, z))));
      LatentGroup grp;
      grp.resolution = r;
      grp.channels = C;
      grp.z = z->val;
      st.groups.push_back(std::move(grp));
    }
    if (ri + 1 < R) {
      Transition& tr = self.ups_[ri];
      int rr = r;
      for (int d = 0; d < tr.doublings; ++d) {
        hp = nn::upsample2(hp, w, rr, rr);
        rr *= 2;
      }
      hp = nn::leaky_relu(tr.prior_adapt(g, hp));
    }
  }
  return st;
}

nn::TensorF TopDownVae::abduct_pixel_noise(const GaussianHead& head, const TensorF& images) {
  if (!head.mu.same_shape(images) || !head.sigma.same_shape(images))
    throw ValidationError("latent model: head and image shapes differ");
  TensorF eps(images.shape());
  for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = (images[i] - head.mu[i]) / head.sigma[i];
  return eps;
}

nn::TensorF TopDownVae::counterfactual(const TensorF& images, const TensorF& parents,
                                       const TensorF& parents_cf, bool clamp) const {
  LatentStack z = encode(images, parents, LatentMode::mean);
  GaussianHead fact = decode(z, parents);
  TensorF eps = abduct_pixel_noise(fact, images);
  GaussianHead cf = decode(z, parents_cf);
  TensorF out(images.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    float v = cf.mu[i] + cf.sigma[i] * eps[i];
    out[i] = clamp ? std::min(1.0f, std::max(0.0f, v)) : v;
  }
  return out;
}

nn::TensorF TopDownVae::reconstruct(const TensorF& images, const TensorF& parents) const {
  LatentStack z = encode(images, parents, LatentMode::mean);
  return decode(z, parents).mu;
}

ElboComponents TopDownVae::elbo(const TensorF& images, const TensorF& parents,
                                double beta) const {
  const int n = static_cast<int>(images.rows());
  if (n == 0) throw ValidationError("latent model: empty batch");
  ElboComponents acc;
  acc.kl.assign(spec_.resolutions.size() * spec_.blocks_per_resolution, 0.0);
  for (int at = 0; at < n; at += 256) {
    int bsz = std::min(256, n - at);
    TensorF xb = slice_rows(images, at, bsz);
    TensorF pb = slice_rows(parents, at, bsz);
    FGraph g;
    PassOut po = run(g, &xb, &pb, nullptr, LatentMode::mean, nullptr, true);
    Var<float> rec = gaussian_ll(g, xb, po.mu, po.sigma);
    acc.recon_ll += static_cast<double>(rec->val[0]) * bsz;
    for (size_t k = 0; k < po.kl.size(); ++k)
      acc.kl[k] += static_cast<double>(po.kl[k]->val[0]) * bsz;
  }
  acc.recon_ll /= n;
  for (double& k : acc.kl) k /= n;
  acc.elbo = acc.recon_ll - beta * acc.kl_total();
  if (!std::isfinite(acc.elbo))
    throw TrainingAbort("latent model: non-finite bound, " +
                        components_text(acc.recon_ll, acc.kl));
  return acc;
}

FitReport TopDownVae::fit(const data::Dataset& ds, const TrainConfig& cfg) {
  if (ds.height != spec_.height || ds.width != spec_.width)
    throw ValidationError("latent model: dataset image size mismatch");
  std::vector<int> tr = ds.indices_of(data::Split::train);
  std::vector<int> va = ds.indices_of(data::Split::val);
  if (tr.empty() || va.empty()) throw ValidationError("latent model: empty split");

  // Parent standardization statistics come from the training split; the
  // schema shape itself was fixed at construction.
  data::fit_parent_stats(codec_, ds, data::Split::train);

  TensorF pa_tr = parent_rows(ds, tr);
  TensorF pa_va = parent_rows(ds, va);
  TensorF x_va = data::gather_images(ds, va);

  nn::Rng rng(hash_str(cfg.seed, "latent-fit:" + spec_.family + ":" + spec_.dataset));
  nn::AdamConfig ac;
  ac.lr = cfg.lr;
  ac.weight_decay = cfg.weight_decay;
  ac.warmup_steps = cfg.warmup_steps;
  ac.clip_norm = cfg.clip_norm;
  ac.skip_norm = cfg.skip_norm;
  nn::ParamList<float> ps = params();
  nn::Adam<float> opt(ac);

  FitReport rep;
  auto eval = [&]() { return elbo(x_va, pa_va, cfg.beta).elbo; };
  rep.init_val_elbo = eval();
  rep.best_val_elbo = rep.init_val_elbo;
  std::vector<TensorF> best;
  best.reserve(ps.size());
  for (auto* p : ps) best.push_back(p->value);
  int stale = 0;

  std::vector<int> order = tr;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.below(i)]);
    for (size_t at = 0; at < order.size(); at += cfg.batch) {
      size_t bsz = std::min<size_t>(cfg.batch, order.size() - at);
      std::vector<int> rows(order.begin() + at, order.begin() + at + bsz);
      TensorF xb = data::gather_images(ds, rows);
      std::vector<int> rel(bsz);
      for (size_t i = 0; i < bsz; ++i)
        rel[i] = static_cast<int>(std::lower_bound(tr.begin(), tr.end(), rows[i]) - tr.begin());
      TensorF pb = gather_rows(pa_tr, rel);

      FGraph g;
      PassOut po = run(g, &xb, &pb, nullptr, LatentMode::sample, &rng, true);
      Var<float> rec = gaussian_ll(g, xb, po.mu, po.sigma);
      Var<float> kl = nullptr;
      for (auto& k : po.kl) kl = kl ? nn::add(kl, k) : k;
      Var<float> loss = nn::sub(nn::scale(kl, static_cast<float>(cfg.beta)), rec);
      if (!std::isfinite(loss->val[0])) {
        std::vector<double> kls;
        for (auto& k : po.kl) kls.push_back(k->val[0]);
        throw TrainingAbort("latent model: non-finite training loss, " +
                            components_text(rec->val[0], kls));
      }
      g.backward(loss);
      if (opt.step(ps) == nn::StepOutcome::skipped) ++rep.skipped_updates;
    }
    double val = eval();
    rep.curve.push_back(val);
    rep.epochs = epoch + 1;
    if (val > rep.best_val_elbo) {
      rep.best_val_elbo = val;
      for (size_t i = 0; i < ps.size(); ++i) best[i] = ps[i]->value;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  for (size_t i = 0; i < ps.size(); ++i) ps[i]->value = best[i];
  trained_ = true;
  pretrain_elbo_ = rep.best_val_elbo;
  beta_used_ = cfg.beta;
  return rep;
}

void TopDownVae::save(nn::Checkpoint& ck) const {
  nn::Json meta;
  meta["family"] = spec_.family;
  meta["dataset"] = spec_.dataset;
  meta["height"] = spec_.height;
  meta["width"] = spec_.width;
  meta["parents"] = spec_.parents;
  meta["resolutions"] = spec_.resolutions;
  meta["widths"] = spec_.widths;
  meta["blocks_per_resolution"] = spec_.blocks_per_resolution;
  meta["latent_channels"] = spec_.latent_channels;
  meta["encoder_widths"] = spec_.encoder_widths;
  meta["parent_codec"] = codec_.to_json();
  meta["trained"] = trained_;
  meta["pretrain_elbo"] = pretrain_elbo_;
  meta["beta"] = beta_used_;
  ck.meta["latent_model"] = std::move(meta);
  auto ps = const_cast<TopDownVae&>(*this).params();
  nn::put_params(ck, ps);
}

TopDownVae TopDownVae::load(const nn::Checkpoint& ck) {
  if (!ck.meta.contains("latent_model"))
    throw IoError("checkpoint does not hold a latent image model");
  const nn::Json& meta = ck.meta.at("latent_model");
  VaeSpec spec;
  spec.family = meta.at("family").get<std::string>();
  spec.dataset = meta.at("dataset").get<std::string>();
  spec.height = meta.at("height").get<int>();
  spec.width = meta.at("width").get<int>();
  spec.parents = meta.at("parents").get<std::vector<std::string>>();
  spec.resolutions = meta.at("resolutions").get<std::vector<int>>();
  spec.widths = meta.at("widths").get<std::vector<int>>();
  spec.blocks_per_resolution = meta.at("blocks_per_resolution").get<int>();
  spec.latent_channels = meta.at("latent_channels").get<int>();
  spec.encoder_widths = meta.at("encoder_widths").get<std::vector<int>>();
  scm::ParentCodec codec = scm::ParentCodec::from_json(meta.at("parent_codec"));
  TopDownVae model(std::move(spec), std::move(codec), 0);
  auto ps = model.params();
  nn::load_params(ck, ps);
  model.trained_ = meta.value("trained", false);
  model.pretrain_elbo_ = meta.value("pretrain_elbo", 0.0);
  model.beta_used_ = meta.value("beta", 1.0);
  return model;
}

scm::NoisePayload VaeMechanism::abduct(const scm::Value& value,
                                       const std::vector<scm::Value>& parents,
                                       const scm::AbductOptions& opts) const {
  const TensorF& img = value.img();
  TensorF pa = model_->encode_parents({parents});
  scm::NoisePayload np;
  np.tag = scm::NoisePayload::Tag::latent_stack;
  LatentStack st = model_->encode(img, pa, opts.latent_mode, opts.seed);
  for (auto& grp : st.groups) np.latents.push_back(grp.z);
  if (opts.pixel_noise == scm::AbductOptions::PixelNoise::carry) {
    GaussianHead head = model_->decode(st, pa);
    np.pixel_eps = TopDownVae::abduct_pixel_noise(head, img);
    np.has_pixel_eps = true;
  }
  return np;
}

scm::Value VaeMechanism::predict(const scm::NoisePayload& noise,
                                 const std::vector<scm::Value>& parents) const {
  if (noise.tag != scm::NoisePayload::Tag::latent_stack)
    throw ValidationError("latent mechanism: wrong noise payload");
  const VaeSpec& spec = model_->spec();
  LatentStack st;
  size_t k = 0;
  for (int r : spec.resolutions)
    for (int b = 0; b < spec.blocks_per_resolution; ++b) {
      (void)b;
      if (k >= noise.latents.size())
        throw ValidationError("latent mechanism: payload is missing latent groups");
      LatentGroup grp;
      grp.resolution = r;
      grp.channels = spec.latent_channels;
      grp.z = noise.latents[k++];
      st.groups.push_back(std::move(grp));
    }
  TensorF pa = model_->encode_parents({parents});
  GaussianHead head = model_->decode(st, pa);
  TensorF out(head.mu.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    float v = head.mu[i];
    if (noise.has_pixel_eps) v += head.sigma[i] * noise.pixel_eps[i];
    out[i] = std::min(1.0f, std::max(0.0f, v));
  }
  return scm::Value::image(std::move(out));
}

void TopDownVae::finetune_graph(FGraph& g, const TensorF& images, const TensorF& parents,
                                const TensorF& parents_cf, double beta, Var<float>* xstar,
                                Var<float>* elbo_loss) {
  const int P = codec_.dim();
  const int H = spec_.height, W = spec_.width;
  const int R = static_cast<int>(spec_.resolutions.size());
  const int n = static_cast<int>(images.rows());

  PassOut fact = run(g, &images, &parents, nullptr, LatentMode::mean, nullptr, true);

  // Conditioned replay under the intervened parents, sharing the latent
  // nodes so gradients reach the encoder through both decodes.
  std::map<int, Var<float>> pmap;
  auto pa_at = [&](int r) {
    auto it = pmap.find(r);
    if (it != pmap.end()) return it->second;
    Var<float> v = g.constant(nn::broadcast_channels(parents_cf, r, r));
    pmap.emplace(r, v);
    return v;
  };
  Var<float> ones = g.constant(ones_column(n));
  Var<float> hc = nn::matmul(ones, g.param(h0c_));
  int gi = 0;
  for (int ri = 0; ri < R; ++ri) {
    int r = spec_.resolutions[ri];
    int w = spec_.widths[ri];
    for (int b = 0; b < spec_.blocks_per_resolution; ++b) {
      Block& blk = blocks_[ri][b];
      Var<float> z = fact.z[gi++];
      Var<float> zin = P > 0 ? nn::concat_cols(z, pa_at(r)) : z;
      hc = nn::add(hc, blk.fc2(g, nn::leaky_relu(blk.fc1(g, zin))));
    }
    if (ri + 1 < R) {
      Transition& tr = ups_[ri];
      int rr = r;
      for (int d = 0; d < tr.doublings; ++d) {
        hc = nn::upsample2(hc, w, rr, rr);
        rr *= 2;
      }
      hc = nn::leaky_relu(tr.cond_adapt(g, hc));
    }
  }
  {
    int r = spec_.resolutions.back();
    int w = spec_.widths.back();
    for (size_t k = 0; k < tail_.size(); ++k) {
      hc = nn::upsample2(hc, w, r, r);
      r *= 2;
      hc = nn::leaky_relu(tail_[k](g, hc));
      w = tail_widths_[k];
    }
  }
  Var<float> px = pixel_head_(g, hc);
  Var<float> mu_cf = nn::sigmoid(nn::slice_cols(px, 0, H * W));
  Var<float> sg_cf = nn::add_const(nn::softplus(nn::slice_cols(px, H * W, H * W)), kSigmaMin);

  Var<float> eps = nn::div(nn::sub(g.constant(images), fact.mu), fact.sigma);
  *xstar = nn::add(mu_cf, nn::mul(sg_cf, eps));

  Var<float> rec = gaussian_ll(g, images, fact.mu, fact.sigma);
  Var<float> kl = nullptr;
  for (auto& k : fact.kl) kl = kl ? nn::add(kl, k) : k;
  *elbo_loss = nn::sub(nn::scale(kl, static_cast<float>(beta)), rec);
}

FinetuneReport counterfactual_finetune(TopDownVae& model,
                                       const std::vector<const pred::Predictor*>& guides,
                                       const data::Dataset& ds, const LagrangeConfig& cfg) {
  if (!model.trained()) throw ValidationError("fine-tune: model is untrained");
  if (guides.empty()) throw ValidationError("fine-tune: no guide classifiers");
  const scm::ParentCodec& codec = model.codec();
  std::vector<size_t> target_entry(guides.size());
  for (size_t k = 0; k < guides.size(); ++k) {
    const pred::Predictor* gd = guides[k];
    if (gd->spec().role != pred::Role::finetune_guidance)
      throw ValidationError("fine-tune: guide '" + gd->spec().target +
                            "' is not tagged for fine-tuning guidance");
    if (!gd->spec().children.empty())
      throw ValidationError("fine-tune: guides must be image-only predictors");
    size_t e = 0;
    while (e < codec.entries.size() && codec.entries[e].name != gd->spec().target) ++e;
    if (e == codec.entries.size())
      throw ValidationError("fine-tune: guide target '" + gd->spec().target +
                            "' is not a parent of the image");
    if (!gd->trained()) throw ValidationError("fine-tune: untrained guide");
    target_entry[k] = e;
  }

  FinetuneReport rep;
  rep.lambda = cfg.lambda_init;
  const std::vector<int> tr = ds.indices_of(data::Split::train);
  const std::vector<int> va = ds.indices_of(data::Split::val);
  const int64_t hw = static_cast<int64_t>(ds.height) * ds.width;
  const double npix = static_cast<double>(hw);
  const double c = cfg.c != 0.0 ? cfg.c : -model.pretrain_elbo() / npix;

  nn::ParamList<float> ps = model.params();
  std::vector<TensorF> entry;
  entry.reserve(ps.size());
  for (auto* p : ps) entry.push_back(p->value);
  auto restore = [&]() {
    for (size_t i = 0; i < ps.size(); ++i) ps[i]->value = entry[i];
  };

  nn::AdamConfig ac;
  ac.lr = cfg.lr;
  ac.clip_norm = cfg.clip_norm;
  nn::Adam<float> opt(ac);
  nn::Rng rng(hash_str(cfg.seed, "latent-finetune"));

  for (int step = 0; step < cfg.steps; ++step) {
    size_t k = step % guides.size();
    const pred::Predictor& guide = *guides[k];
    const data::AttrColumn& col = ds.attr(guide.spec().target);

    int bsz = std::min<int>(cfg.batch, static_cast<int>(tr.size()));
    std::vector<int> idx(bsz);
    for (int i = 0; i < bsz; ++i) idx[i] = tr[rng.below(tr.size())];
    TensorF xb = data::gather_images(ds, idx);
    TensorF pb = model.parent_rows(ds, idx);

    // Intervened parent rows: the guide's target resampled from the
    // training marginal, everything else kept factual.
    TensorF pb_cf = pb;
    std::vector<scm::Value> targets(bsz, scm::Value::number(0.0));
    std::vector<scm::Value> row(codec.entries.size(), scm::Value::number(0.0));
    for (int i = 0; i < bsz; ++i) {
      int src = tr[rng.below(tr.size())];
      scm::Value v = col.kind == scm::VarKind::categorical ? scm::Value::category(col.cat[src])
                                                           : scm::Value::number(col.num[src]);
      targets[i] = v;
      for (size_t e = 0; e < codec.entries.size(); ++e) {
        const data::AttrColumn& ec = ds.attr(codec.entries[e].name);
        row[e] = codec.entries[e].kind == scm::VarKind::categorical
                     ? scm::Value::category(ec.cat[idx[i]])
                     : scm::Value::number(ec.num[idx[i]]);
      }
      row[target_entry[k]] = v;
      Eigen::VectorXd enc = codec.encode(row);
      for (int j = 0; j < static_cast<int>(enc.size()); ++j)
        pb_cf[static_cast<int64_t>(i) * enc.size() + j] = static_cast<float>(enc[j]);
    }

    // One graph: abduct under factual parents, decode under intervened ones,
    // recompose the counterfactual, and read the bound off the factual pass.
    FGraph g;
    Var<float> xstar, elbo_loss;
    model.finetune_graph(g, xb, pb, pb_cf, cfg.beta, &xstar, &elbo_loss);

    auto [cls_loss, grad_img] = guide.loss_and_image_grad(xstar->val, targets, {});
    Var<float> steer = nn::sum_all(nn::mul(xstar, g.constant(grad_img)));
    Var<float> total =
        nn::add(steer, nn::scale(elbo_loss, static_cast<float>(rep.lambda / npix)));
    double elbo_loss_pp = static_cast<double>(elbo_loss->val[0]) / npix;
    if (!std::isfinite(cls_loss) || !std::isfinite(elbo_loss_pp)) {
      restore();
      rep.aborted = true;
      rep.abort_reason = "non-finite fine-tuning loss";
      break;
    }
    g.backward(total);
    opt.step(ps);

    rep.lambda = std::max(0.0, rep.lambda + cfg.lambda_lr * (elbo_loss_pp - c));
    rep.steps_done = step + 1;
    if (rep.lambda > cfg.lambda_max) {
      restore();
      rep.aborted = true;
      rep.abort_reason = "lagrange multiplier exploded; the classifier gradients cannot steer "
                         "this model while holding the bound";
      break;
    }
  }

  if (!rep.aborted && cfg.steps > 0) {
    rep.final_val_elbo =
        model.elbo(data::gather_images(ds, va), model.parent_rows(ds, va), cfg.beta).elbo;
  } else {
    rep.final_val_elbo = model.pretrain_elbo();
  }
  return rep;
}

}  // namespace cfbench::vae
