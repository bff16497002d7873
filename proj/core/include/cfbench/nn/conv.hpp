#pragma once

#include "cfbench/nn/autodiff.hpp"

namespace cfbench::nn {

struct Conv2dSpec {
  int in_c = 1, h = 0, w = 0;
  int out_c = 1, k = 3, stride = 1, pad = 1;
  int out_h() const { return (h + 2 * pad - k) / stride + 1; }
  int out_w() const { return (w + 2 * pad - k) / stride + 1; }
};

namespace detail {

// Patch matrix for one sample: rows = in_c*k*k, cols = out_h*out_w (row-major
// so each patch row is filled contiguously).
template <typename T>
void im2col(const T* x, const Conv2dSpec& s,
            Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& col) {
  const int oh = s.out_h(), ow = s.out_w();
  col.resize(s.in_c * s.k * s.k, oh * ow);
  for (int c = 0; c < s.in_c; ++c) {
    const T* plane = x + static_cast<int64_t>(c) * s.h * s.w;
    for (int ky = 0; ky < s.k; ++ky) {
      for (int kx = 0; kx < s.k; ++kx) {
        int row = (c * s.k + ky) * s.k + kx;
        T* dst = col.data() + static_cast<int64_t>(row) * (oh * ow);
        for (int oy = 0; oy < oh; ++oy) {
          int y = oy * s.stride - s.pad + ky;
          if (y < 0 || y >= s.h) {
            for (int ox = 0; ox < ow; ++ox) dst[oy * ow + ox] = T(0);
            continue;
          }
          const T* src = plane + static_cast<int64_t>(y) * s.w;
          for (int ox = 0; ox < ow; ++ox) {
            int xx = ox * s.stride - s.pad + kx;
            dst[oy * ow + ox] = (xx >= 0 && xx < s.w) ? src[xx] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& col,
                const Conv2dSpec& s, T* dx) {
  const int oh = s.out_h(), ow = s.out_w();
  for (int c = 0; c < s.in_c; ++c) {
    T* plane = dx + static_cast<int64_t>(c) * s.h * s.w;
    for (int ky = 0; ky < s.k; ++ky) {
      for (int kx = 0; kx < s.k; ++kx) {
        int row = (c * s.k + ky) * s.k + kx;
        const T* src = col.data() + static_cast<int64_t>(row) * (oh * ow);
        for (int oy = 0; oy < oh; ++oy) {
          int y = oy * s.stride - s.pad + ky;
          if (y < 0 || y >= s.h) continue;
          T* drow = plane + static_cast<int64_t>(y) * s.w;
          for (int ox = 0; ox < ow; ++ox) {
            int xx = ox * s.stride - s.pad + kx;
            if (xx >= 0 && xx < s.w) drow[xx] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: [N, in_c*h*w], w: [out_c, in_c*k*k], b: [out_c] -> [N, out_c*out_h*out_w].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, const Conv2dSpec& s) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  auto& g = detail::same_graph(x, w);
  detail::same_graph(w, b);
  const int n = x->val.rows();
  const int oh = s.out_h(), ow = s.out_w();
  if (x->val.cols() != s.in_c * s.h * s.w) throw ValidationError("conv2d: input size mismatch");
  if (w->val.rows() != s.out_c || w->val.cols() != s.in_c * s.k * s.k)
    throw ValidationError("conv2d: weight shape mismatch");
  if (b->val.numel() != s.out_c) throw ValidationError("conv2d: bias shape mismatch");

  Tensor<T> out({n, s.out_c * oh * ow});
  {
    Mat col;
    Eigen::Map<const Mat> wm(w->val.data(), s.out_c, s.in_c * s.k * s.k);
    for (int i = 0; i < n; ++i) {
      detail::im2col(x->val.data() + static_cast<int64_t>(i) * x->val.cols(), s, col);
      Eigen::Map<Mat> om(out.data() + static_cast<int64_t>(i) * out.cols(), s.out_c, oh * ow);
      om.noalias() = wm * col;
      for (int c = 0; c < s.out_c; ++c) om.row(c).array() += b->val[c];
    }
  }
  Var<T> o = g.make(std::move(out), x->needs_grad || w->needs_grad || b->needs_grad);
  if (o->needs_grad)
    o->backprop = [x, w, b, s, n, oh, ow](Node<T>& nd) {
      Mat col;
      Eigen::Map<const Mat> wm(w->val.data(), s.out_c, s.in_c * s.k * s.k);
      if (x->needs_grad) x->graph->ensure_grad(x);
      if (w->needs_grad) w->graph->ensure_grad(w);
      if (b->needs_grad) b->graph->ensure_grad(b);
      for (int i = 0; i < n; ++i) {
        Eigen::Map<const Mat> gm(nd.grad.data() + static_cast<int64_t>(i) * nd.grad.cols(),
                                 s.out_c, oh * ow);
        if (w->needs_grad || x->needs_grad)
          detail::im2col(x->val.data() + static_cast<int64_t>(i) * x->val.cols(), s, col);
        if (w->needs_grad)
          Eigen::Map<Mat>(w->grad.data(), s.out_c, s.in_c * s.k * s.k).noalias() +=
              gm * col.transpose();
        if (b->needs_grad)
          for (int c = 0; c < s.out_c; ++c) b->grad[c] += gm.row(c).sum();
        if (x->needs_grad) {
          Mat dcol = wm.transpose() * gm;
          detail::col2im_add(dcol, s,
                             x->grad.data() + static_cast<int64_t>(i) * x->grad.cols());
        }
      }
    };
  return o;
}

// 2x2 average pooling, stride 2. Requires even h and w.
template <typename T>
Var<T> avg_pool2(Var<T> x, int c, int h, int w) {
  if (h % 2 || w % 2) throw ValidationError("avg_pool2: odd spatial size");
  const int n = x->val.rows(), oh = h / 2, ow = w / 2;
  if (x->val.cols() != c * h * w) throw ValidationError("avg_pool2: input size mismatch");
  Tensor<T> out({n, c * oh * ow});
  for (int i = 0; i < n; ++i) {
    const T* src = x->val.data() + static_cast<int64_t>(i) * x->val.cols();
    T* dst = out.data() + static_cast<int64_t>(i) * out.cols();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const T* p = src + (static_cast<int64_t>(ch) * h + 2 * y) * w + 2 * xx;
          dst[(static_cast<int64_t>(ch) * oh + y) * ow + xx] =
              (p[0] + p[1] + p[w] + p[w + 1]) * T(0.25);
        }
  }
  Var<T> o = x->graph->make(std::move(out), x->needs_grad);
  if (o->needs_grad)
    o->backprop = [x, c, h, w, n, oh, ow](Node<T>& nd) {
      if (!x->needs_grad) return;
      x->graph->ensure_grad(x);
      for (int i = 0; i < n; ++i) {
        const T* gsrc = nd.grad.data() + static_cast<int64_t>(i) * nd.grad.cols();
        T* gdst = x->grad.data() + static_cast<int64_t>(i) * x->grad.cols();
        for (int ch = 0; ch < c; ++ch)
          for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx) {
              T gq = gsrc[(static_cast<int64_t>(ch) * oh + y) * ow + xx] * T(0.25);
              T* p = gdst + (static_cast<int64_t>(ch) * h + 2 * y) * w + 2 * xx;
              p[0] += gq;
              p[1] += gq;
              p[w] += gq;
              p[w + 1] += gq;
            }
      }
    };
  return o;
}

// Nearest-neighbour 2x upsampling.
template <typename T>
Var<T> upsample2(Var<T> x, int c, int h, int w) {
  const int n = x->val.rows(), oh = 2 * h, ow = 2 * w;
  if (x->val.cols() != c * h * w) throw ValidationError("upsample2: input size mismatch");
  Tensor<T> out({n, c * oh * ow});
  for (int i = 0; i < n; ++i) {
    const T* src = x->val.data() + static_cast<int64_t>(i) * x->val.cols();
    T* dst = out.data() + static_cast<int64_t>(i) * out.cols();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          T v = src[(static_cast<int64_t>(ch) * h + y) * w + xx];
          T* p = dst + (static_cast<int64_t>(ch) * oh + 2 * y) * ow + 2 * xx;
          p[0] = v;
          p[1] = v;
          p[ow] = v;
          p[ow + 1] = v;
        }
  }
  Var<T> o = x->graph->make(std::move(out), x->needs_grad);
  if (o->needs_grad)
    o->backprop = [x, c, h, w, n, oh, ow](Node<T>& nd) {
      if (!x->needs_grad) return;
      x->graph->ensure_grad(x);
      for (int i = 0; i < n; ++i) {
        const T* gsrc = nd.grad.data() + static_cast<int64_t>(i) * nd.grad.cols();
        T* gdst = x->grad.data() + static_cast<int64_t>(i) * x->grad.cols();
        for (int ch = 0; ch < c; ++ch)
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
              const T* p = gsrc + (static_cast<int64_t>(ch) * oh + 2 * y) * ow + 2 * xx;
              gdst[(static_cast<int64_t>(ch) * h + y) * w + xx] +=
                  p[0] + p[1] + p[ow] + p[ow + 1];
            }
      }
    };
  return o;
}

}  // namespace cfbench::nn
