#include "cfbench/data/facelike.hpp"

#include <algorithm>
#include <cmath>

#include "cfbench/nn/rng.hpp"

namespace cfbench::data {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

double beard_logit(int gender, double age) {
  return -1.0 + 3.2 * gender + 0.03 * (age - 50.0);
}

double bald_logit(int gender, double age) {
  return -3.4 + 1.8 * gender + 0.06 * (age - 50.0);
}

nn::TensorF render_face(const FaceParams& p, int h, int w) {
  if (p.age < 20.0 || p.age > 80.0) throw ValidationError("face age out of range");
  const double cx = 0.5 * w + p.jx;
  const double cy = 0.5 * h + 1.5 + p.jy;
  const double rx = (7.8 + 2.2 * p.gender) * (w / 32.0);
  const double ry = 11.5 * (h / 32.0);
  const double aging = (p.age - 20.0) / 60.0;
  const double fill = 0.60 - 0.10 * aging;
  const double wrinkle = 0.16 * aging;

  const double ex = 0.38 * rx, ey = 0.30 * ry, er = 1.3 * (w / 32.0);
  const double mouth_y = 0.45 * ry, mouth_hw = 0.30 * rx, mouth_ht = 0.9 * (h / 32.0);

  nn::Rng noise(hash_str(p.texture_seed, "face-texture"));
  nn::TensorF img({1, h * w});

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      // 2x2 supersampling for smooth edges.
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          double px = x + 0.25 + 0.5 * sx, py = y + 0.25 + 0.5 * sy;
          double dx = px - cx, dy = py - cy;
          double e = (dx / rx) * (dx / rx) + (dy / ry) * (dy / ry);
          if (e > 1.0) continue;

          double v = fill + wrinkle * 0.5 * std::sin(6.0 * M_PI * e);
          // Hair cap across the crown; missing when bald.
          if (dy < -0.62 * ry && !p.bald) v = 0.88;
          // Beard band over the chin.
          if (dy > 0.55 * ry && p.beard) v = 0.22;
          // Eyes.
          double exl = dx + ex, exr = dx - ex, eyd = dy + ey;
          if (exl * exl + eyd * eyd <= er * er) v = 0.12;
          if (exr * exr + eyd * eyd <= er * er) v = 0.12;
          // Mouth.
          if (std::abs(dy - mouth_y) <= 0.5 * mouth_ht && std::abs(dx) <= mouth_hw) v = 0.25;
          acc += v;
        }
      }
      double v = acc / 4.0;
      if (v > 0.0) v += 0.01 * noise.normal();
      img[static_cast<int64_t>(y) * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

Dataset generate_facelike(const FaceConfig& cfg) {
  if (cfg.n < 4) throw ValidationError("facelike dataset needs at least 4 samples");
  Dataset ds;
  ds.name = "facelike";
  ds.seed = cfg.seed;
  ds.n = cfg.n;
  ds.height = cfg.height;
  ds.width = cfg.width;
  ds.channels = 1;
  ds.images = nn::TensorF({cfg.n, cfg.height * cfg.width});

  AttrColumn age{"age", scm::VarKind::continuous, 0, {}, {}};
  AttrColumn gender{"gender", scm::VarKind::categorical, 2, {}, {}};
  AttrColumn beard{"beard", scm::VarKind::categorical, 2, {}, {}};
  AttrColumn bald{"bald", scm::VarKind::categorical, 2, {}, {}};
  age.num.resize(cfg.n);
  gender.cat.resize(cfg.n);
  beard.cat.resize(cfg.n);
  bald.cat.resize(cfg.n);

  const int64_t d = static_cast<int64_t>(cfg.height) * cfg.width;
  for (int i = 0; i < cfg.n; ++i) {
    nn::Rng rng(hash_str(cfg.seed, "face:" + std::to_string(i)));
    FaceParams p;
    p.gender = rng.uniform() < 0.5 ? 0 : 1;
    do {
      p.age = 50.0 + 12.0 * rng.normal();
    } while (p.age < 20.0 || p.age > 80.0);
    p.beard = rng.uniform() < sigmoid(beard_logit(p.gender, p.age)) ? 1 : 0;
    p.bald = rng.uniform() < sigmoid(bald_logit(p.gender, p.age)) ? 1 : 0;
    p.jx = rng.uniform(-0.75, 0.75);
    p.jy = rng.uniform(-0.75, 0.75);
    p.texture_seed = hash_str(cfg.seed, "face-noise:" + std::to_string(i));

    nn::TensorF img = render_face(p, cfg.height, cfg.width);
    std::copy(img.data(), img.data() + d, ds.images.data() + i * d);
    age.num[i] = p.age;
    gender.cat[i] = p.gender;
    beard.cat[i] = p.beard;
    bald.cat[i] = p.bald;
  }

  ds.attrs = {std::move(age), std::move(gender), std::move(beard), std::move(bald)};
  ds.split = assign_splits(cfg.n, cfg.seed);
  ds.validate();
  return ds;
}

}  // namespace cfbench::data
