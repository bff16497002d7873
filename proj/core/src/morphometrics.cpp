#include "cfbench/data/morphometrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cfbench/common.hpp"

namespace cfbench::data {

namespace {

constexpr int kUpsample = 4;

// One-dimensional squared distance transform by lower parabola envelope.
void dt1d(const std::vector<double>& f, std::vector<double>& d, int n) {
  static thread_local std::vector<int> v;
  static thread_local std::vector<double> z;
  v.assign(static_cast<size_t>(n), 0);
  z.assign(static_cast<size_t>(n) + 1, 0.0);
  const double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      s = ((f[q] + static_cast<double>(q) * q) - (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
          (2.0 * (q - v[k]));
      if (s <= z[k] && k > 0)
        --k;
      else
        break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

// Bilinear upsampling by an integer factor; coarse pixel centers sit at
// integer coordinates and edge samples clamp to the border pixel.
std::vector<float> upsample_bilinear(const nn::TensorF& image, int h, int w, int k) {
  const int fh = h * k, fw = w * k;
  std::vector<float> fine(static_cast<size_t>(fh) * fw, 0.0f);
  for (int yf = 0; yf < fh; ++yf) {
    double v = (yf + 0.5) / k - 0.5;
    int y0 = static_cast<int>(std::floor(v));
    double ty = v - y0;
    int ya = std::clamp(y0, 0, h - 1), yb = std::clamp(y0 + 1, 0, h - 1);
    for (int xf = 0; xf < fw; ++xf) {
      double u = (xf + 0.5) / k - 0.5;
      int x0 = static_cast<int>(std::floor(u));
      double tx = u - x0;
      int xa = std::clamp(x0, 0, w - 1), xb = std::clamp(x0 + 1, 0, w - 1);
      double top = (1.0 - tx) * image[static_cast<int64_t>(ya) * w + xa] +
                   tx * image[static_cast<int64_t>(ya) * w + xb];
      double bot = (1.0 - tx) * image[static_cast<int64_t>(yb) * w + xa] +
                   tx * image[static_cast<int64_t>(yb) * w + xb];
      fine[static_cast<size_t>(yf) * fw + xf] = static_cast<float>((1.0 - ty) * top + ty * bot);
    }
  }
  return fine;
}

}  // namespace

std::vector<uint8_t> binarize_half_max(const nn::TensorF& image, int h, int w) {
  if (image.numel() != static_cast<int64_t>(h) * w)
    throw ValidationError("binarize: image size does not match h*w");
  float mx = 0.0f;
  for (int64_t i = 0; i < image.numel(); ++i) mx = std::max(mx, image[i]);
  std::vector<uint8_t> bin(static_cast<size_t>(h) * w, 0);
  if (mx <= 0.0f) return bin;
  const float thr = 0.5f * mx;
  for (int64_t i = 0; i < image.numel(); ++i) bin[i] = image[i] >= thr ? 1 : 0;
  return bin;
}

void thin_zhang_suen(std::vector<uint8_t>& bin, int h, int w) {
  auto at = [&](int y, int x) -> int {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0;
    return bin[static_cast<size_t>(y) * w + x];
  };
  std::vector<size_t> kill;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int phase = 0; phase < 2; ++phase) {
      kill.clear();
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          if (!at(y, x)) continue;
          // Clockwise neighbors starting north.
          int p[8] = {at(y - 1, x), at(y - 1, x + 1), at(y, x + 1), at(y + 1, x + 1),
                      at(y + 1, x), at(y + 1, x - 1), at(y, x - 1), at(y - 1, x - 1)};
          int b = 0, a = 0;
          for (int i = 0; i < 8; ++i) {
            b += p[i];
            if (!p[i] && p[(i + 1) % 8]) ++a;
          }
          if (b < 2 || b > 6 || a != 1) continue;
          bool cond1 = phase == 0 ? !(p[0] && p[2] && p[4]) : !(p[0] && p[2] && p[6]);
          bool cond2 = phase == 0 ? !(p[2] && p[4] && p[6]) : !(p[0] && p[4] && p[6]);
          if (cond1 && cond2) kill.push_back(static_cast<size_t>(y) * w + x);
        }
      }
      for (size_t i : kill) bin[i] = 0;
      if (!kill.empty()) changed = true;
    }
  }
}

std::vector<double> distance_to_background(const std::vector<uint8_t>& bin, int h, int w) {
  const double big = 1e18;
  std::vector<double> sq(static_cast<size_t>(h) * w);
  for (size_t i = 0; i < sq.size(); ++i) sq[i] = bin[i] ? big : 0.0;

  // Exact squared transform: one pass over rows, one over columns.
  std::vector<double> f(std::max(h, w)), d(std::max(h, w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) f[x] = sq[static_cast<size_t>(y) * w + x];
    dt1d(f, d, w);
    for (int x = 0; x < w; ++x) sq[static_cast<size_t>(y) * w + x] = d[x];
  }
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = sq[static_cast<size_t>(y) * w + x];
    dt1d(f, d, h);
    for (int y = 0; y < h; ++y) sq[static_cast<size_t>(y) * w + x] = d[y];
  }

  std::vector<double> dist(static_cast<size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      size_t i = static_cast<size_t>(y) * w + x;
      if (!bin[i]) continue;
      // Implicit background frame just outside the image.
      double frame = std::min(std::min(y + 1, h - y), std::min(x + 1, w - x));
      dist[i] = std::min(std::sqrt(sq[i]), frame);
    }
  }
  return dist;
}

GlyphMeasure measure_glyph(const nn::TensorF& image, int h, int w) {
  if (image.numel() != static_cast<int64_t>(h) * w)
    throw ValidationError("glyph measurement: image size does not match h*w");
  float mx = 0.0f;
  for (int64_t i = 0; i < image.numel(); ++i) mx = std::max(mx, image[i]);
  if (mx <= 0.0f) throw ValidationError("glyph measurement: no stroke found");

  // The stroke profile ramps linearly across the boundary, so bilinear
  // upsampling recovers the sub-pixel location of the half-max contour and
  // shrinks the skeleton quantization error by the same factor.
  const int k = kUpsample;
  const int fh = h * k, fw = w * k;
  std::vector<float> fine = upsample_bilinear(image, h, w, k);

  const float thr = 0.5f * mx;
  std::vector<uint8_t> bin(static_cast<size_t>(fh) * fw, 0);
  for (size_t i = 0; i < bin.size(); ++i) bin[i] = fine[i] >= thr ? 1 : 0;

  std::vector<double> edt = distance_to_background(bin, fh, fw);
  std::vector<uint8_t> skel = bin;
  thin_zhang_suen(skel, fh, fw);

  // Thinning can leave the skeleton a pixel off the distance ridge; read
  // each skeleton pixel as the ridge value in its 8-neighborhood.
  double tsum = 0.0;
  int64_t tcount = 0;
  for (int y = 0; y < fh; ++y) {
    for (int x = 0; x < fw; ++x) {
      if (!skel[static_cast<size_t>(y) * fw + x]) continue;
      double ridge = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= fh || xx < 0 || xx >= fw) continue;
          ridge = std::max(ridge, edt[static_cast<size_t>(yy) * fw + xx]);
        }
      tsum += 2.0 * ridge;
      ++tcount;
    }
  }
  if (tcount == 0) throw ValidationError("glyph measurement: empty skeleton");

  const float core = 0.95f * mx;
  double isum = 0.0;
  int64_t icount = 0;
  for (int64_t i = 0; i < image.numel(); ++i) {
    if (image[i] >= core) {
      isum += image[i];
      ++icount;
    }
  }

  GlyphMeasure m;
  m.thickness = tsum / static_cast<double>(tcount) / k;
  m.intensity = isum / icount;
  return m;
}

}  // namespace cfbench::data
