#include "cfbench/data/glyphs.hpp"

#include <algorithm>
#include <cmath>

#include "cfbench/nn/rng.hpp"

namespace cfbench::data {

namespace {

struct Pt {
  double x, y;
};

// Seven-segment endpoints in a unit box, y pointing down.
constexpr Pt kTL{0.15, 0.05}, kTR{0.85, 0.05};
constexpr Pt kML{0.15, 0.50}, kMR{0.85, 0.50};
constexpr Pt kBL{0.15, 0.95}, kBR{0.85, 0.95};

struct Seg {
  Pt a, b;
};

const Seg kSegs[7] = {
    {kTL, kTR},  // top
    {kTL, kML},  // upper left
    {kTR, kMR},  // upper right
    {kML, kMR},  // middle
    {kML, kBL},  // lower left
    {kMR, kBR},  // lower right
    {kBL, kBR},  // bottom
};

// Active segments per digit: top, upper-left, upper-right, middle,
// lower-left, lower-right, bottom.
constexpr uint8_t kDigitMask[10] = {
    0b1110111,  // 0
    0b0100100,  // 1
    0b1011101,  // 2
    0b1101101,  // 3
    0b0101110,  // 4
    0b1101011,  // 5
    0b1111011,  // 6
    0b0100101,  // 7
    0b1111111,  // 8
    0b1101111,  // 9
};

double seg_distance(double px, double py, const Seg& s) {
  double vx = s.b.x - s.a.x, vy = s.b.y - s.a.y;
  double wx = px - s.a.x, wy = py - s.a.y;
  double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? std::clamp((wx * vx + wy * vy) / len2, 0.0, 1.0) : 0.0;
  double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

double glyph_intensity(double thickness, double eps) {
  double z = 2.0 * thickness - 5.0 + 0.5 * eps;
  return 0.25 + 0.7 / (1.0 + std::exp(-z));
}

nn::TensorF render_glyph(const GlyphParams& p, int h, int w) {
  if (p.digit < 0 || p.digit > 9) throw ValidationError("glyph digit out of range");
  const double box = 0.75 * std::min(h, w);
  const double mx = 0.5 * (w - box), my = 0.5 * (h - box);

  // Segment endpoints in pixel coordinates.
  Seg segs[7];
  int nseg = 0;
  for (int s = 0; s < 7; ++s) {
    if (!(kDigitMask[p.digit] >> (6 - s) & 1)) continue;
    segs[nseg].a = {mx + box * kSegs[s].a.x + p.jx, my + box * kSegs[s].a.y + p.jy};
    segs[nseg].b = {mx + box * kSegs[s].b.x + p.jx, my + box * kSegs[s].b.y + p.jy};
    ++nseg;
  }

  nn::TensorF img({1, h * w});
  const double r = 0.5 * p.thickness;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double cx = x + 0.5, cy = y + 0.5;
      double d = 1e30;
      for (int s = 0; s < nseg; ++s) d = std::min(d, seg_distance(cx, cy, segs[s]));
      double alpha = std::clamp(r + 0.5 - d, 0.0, 1.0);
      img[static_cast<int64_t>(y) * w + x] = static_cast<float>(p.intensity * alpha);
    }
  }
  return img;
}

Dataset generate_glyphs(const GlyphConfig& cfg) {
  if (cfg.n < 4) throw ValidationError("glyph dataset needs at least 4 samples");
  Dataset ds;
  ds.name = "glyphs";
  ds.seed = cfg.seed;
  ds.n = cfg.n;
  ds.height = cfg.height;
  ds.width = cfg.width;
  ds.channels = 1;
  ds.images = nn::TensorF({cfg.n, cfg.height * cfg.width});

  AttrColumn thick{"thickness", scm::VarKind::continuous, 0, {}, {}};
  AttrColumn inten{"intensity", scm::VarKind::continuous, 0, {}, {}};
  AttrColumn digit{"digit", scm::VarKind::categorical, 10, {}, {}};
  thick.num.resize(cfg.n);
  inten.num.resize(cfg.n);
  digit.cat.resize(cfg.n);

  const int64_t d = static_cast<int64_t>(cfg.height) * cfg.width;
  for (int i = 0; i < cfg.n; ++i) {
    nn::Rng rng(hash_str(cfg.seed, "glyph:" + std::to_string(i)));
    GlyphParams p;
    p.digit = static_cast<int>(rng.below(10));
    do {
      p.thickness = 0.5 + rng.gamma(10.0, 0.25);
    } while (p.thickness < 1.8 || p.thickness > 5.0);
    p.intensity = glyph_intensity(p.thickness, rng.normal());
    p.jx = rng.uniform(-1.0, 1.0);
    p.jy = rng.uniform(-1.0, 1.0);

    nn::TensorF img = render_glyph(p, cfg.height, cfg.width);
    std::copy(img.data(), img.data() + d, ds.images.data() + i * d);
    thick.num[i] = p.thickness;
    inten.num[i] = p.intensity;
    digit.cat[i] = p.digit;
  }

  ds.attrs = {std::move(thick), std::move(inten), std::move(digit)};
  ds.split = assign_splits(cfg.n, cfg.seed);
  ds.validate();
  return ds;
}

}  // namespace cfbench::data
