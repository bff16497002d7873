#pragma once

#include <string>
#include <vector>

#include "cfbench/nn/autodiff.hpp"
#include "cfbench/nn/conv.hpp"
#include "cfbench/nn/rng.hpp"

namespace cfbench::nn {

template <typename T>
Tensor<T> random_normal(Rng& rng, std::vector<int> shape, double stddev) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T>
struct Dense {
  Param<T> w, b;
  int in = 0, out = 0;

  Dense() = default;
  Dense(const std::string& name, int in_dim, int out_dim, Rng& rng, double gain = 2.0)
      : in(in_dim), out(out_dim) {
    double stddev = std::sqrt(gain / static_cast<double>(in_dim));
    w = Param<T>(name + ".w", random_normal<T>(rng, {in_dim, out_dim}, stddev));
    b = Param<T>(name + ".b", Tensor<T>({out_dim}));
  }

  Var<T> operator()(Graph<T>& g, Var<T> x) {
    return add_rowvec(matmul(x, g.param(w)), g.param(b));
  }

  void collect(ParamList<T>& ps) {
    ps.push_back(&w);
    ps.push_back(&b);
  }
};

template <typename T>
struct Conv2d {
  Param<T> w, b;
  Conv2dSpec spec;

  Conv2d() = default;
  Conv2d(const std::string& name, Conv2dSpec s, Rng& rng, double gain = 2.0) : spec(s) {
    int fan_in = s.in_c * s.k * s.k;
    double stddev = std::sqrt(gain / static_cast<double>(fan_in));
    w = Param<T>(name + ".w", random_normal<T>(rng, {s.out_c, fan_in}, stddev));
    b = Param<T>(name + ".b", Tensor<T>({s.out_c}));
  }

  Var<T> operator()(Graph<T>& g, Var<T> x) {
    return conv2d(x, g.param(w), g.param(b), spec);
  }

  void collect(ParamList<T>& ps) {
    ps.push_back(&w);
    ps.push_back(&b);
  }
};

// Per-sample constant feature columns repeated across a spatial grid, i.e. a
// context vector broadcast to image channels. ctx: [N, P] -> [N, P*h*w].
template <typename T>
Tensor<T> broadcast_channels(const Tensor<T>& ctx, int h, int w) {
  int n = ctx.rows(), p = ctx.cols();
  Tensor<T> out({n, p * h * w});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < p; ++c) {
      T v = ctx[static_cast<int64_t>(i) * p + c];
      T* dst = out.data() + (static_cast<int64_t>(i) * p + c) * h * w;
      std::fill(dst, dst + h * w, v);
    }
  return out;
}

}  // namespace cfbench::nn
