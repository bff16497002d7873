#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "cfbench/nn/tensor.hpp"

namespace cfbench::nn {

template <typename T>
class Graph;

// Trainable tensor plus its persistent gradient and Adam state. Modules own
// these; a Graph only borrows them for the duration of one forward/backward.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> m;
  Tensor<T> v;

  Param() = default;
  Param(std::string n, Tensor<T> val) : name(std::move(n)), value(std::move(val)) {
    grad = Tensor<T>(value.shape());
    m = Tensor<T>(value.shape());
    v = Tensor<T>(value.shape());
  }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

template <typename T>
struct Node {
  Tensor<T> val;
  Tensor<T> grad;
  uint64_t grad_epoch = 0;
  bool needs_grad = false;
  std::function<void(Node<T>&)> backprop;
  Graph<T>* graph = nullptr;
};

template <typename T>
using Var = Node<T>*;

// Dynamic tape. Build one per training step, call backward once, drop it.
template <typename T>
class Graph {
 public:
  Var<T> make(Tensor<T> val, bool needs_grad) {
    nodes_.emplace_back();
    Node<T>& n = nodes_.back();
    n.val = std::move(val);
    n.needs_grad = needs_grad;
    n.graph = this;
    return &n;
  }

  Var<T> constant(Tensor<T> val) { return make(std::move(val), false); }

  Var<T> param(Param<T>& p) {
    Var<T> n = make(p.value, true);
    leaves_.emplace_back(&p, n);
    return n;
  }

  void ensure_grad(Var<T> n) {
    if (n->grad_epoch != epoch_) {
      if (!n->grad.same_shape(n->val)) n->grad = Tensor<T>(n->val.shape());
      else n->grad.set_zero();
      n->grad_epoch = epoch_;
    }
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse creation order.
  // Parameter gradients are accumulated into their Param::grad buffers.
  void backward(Var<T> loss) {
    if (loss->graph != this) throw ValidationError("backward: node from another graph");
    if (loss->val.numel() != 1) throw ValidationError("backward: loss must be scalar");
    ++epoch_;
    ensure_grad(loss);
    loss->grad[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = *it;
      if (n.needs_grad && n.backprop && n.grad_epoch == epoch_) n.backprop(n);
    }
    for (auto& [p, n] : leaves_) {
      if (n->grad_epoch == epoch_) p->grad.array() += n->grad.array();
    }
  }

  size_t size() const { return nodes_.size(); }
  uint64_t epoch() const { return epoch_; }

 private:
  std::deque<Node<T>> nodes_;
  std::vector<std::pair<Param<T>*, Node<T>*>> leaves_;
  uint64_t epoch_ = 0;
};

namespace detail {

template <typename T>
inline void acc(Var<T> n, const typename Tensor<T>::ArrayX& g) {
  if (!n->needs_grad) return;
  n->graph->ensure_grad(n);
  n->grad.array() += g;
}

template <typename T>
inline Graph<T>& same_graph(Var<T> a, Var<T> b) {
  if (a->graph != b->graph) throw ValidationError("op mixes nodes from different graphs");
  return *a->graph;
}

template <typename T>
inline void check_same_shape(Var<T> a, Var<T> b, const char* op) {
  if (!a->val.same_shape(b->val))
    throw ValidationError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---- elementwise binary --------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  detail::check_same_shape(a, b, "add");
  Tensor<T> out = a->val;
  out.array() += b->val.array();
  Var<T> o = g.make(std::move(out), a->needs_grad || b->needs_grad);
  if (o->needs_grad)
    o->backprop = [a, b](Node<T>& n) {
      detail::acc(a, n.grad.array());
      detail::acc(b, n.grad.array());
    };
  return o;
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  detail::check_same_shape(a, b, "sub");
  Tensor<T> out = a->val;
  out.array() -= b->val.array();
  Var<T> o = g.make(std::move(out), a->needs_grad || b->needs_grad);
  if (o->needs_grad)
    o->backprop = [a, b](Node<T>& n) {
      detail::acc(a, n.grad.array());
      detail::acc(b, (-n.grad.array()).eval());
    };
  return o;
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  detail::check_same_shape(a, b, "mul");
  Tensor<T> out = a->val;
  out.array() *= b->val.array();
  Var<T> o = g.make(std::move(out), a->needs_grad || b->needs_grad);
  if (o->needs_grad)
    o->backprop = [a, b](Node<T>& n) {
      detail::acc(a, (n.grad.array() * b->val.array()).eval());
      detail::acc(b, (n.grad.array() * a->val.array()).eval());
    };
  return o;
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  detail::check_same_shape(a, b, "div");
  Tensor<T> out = a->val;
  out.array() /= b->val.array();
  Var<T> o = g.make(std::move(out), a->needs_grad || b->needs_grad);
  if (o->needs_grad)
    o->backprop = [a, b](Node<T>& n) {
      detail::acc(a, (n.grad.array() / b->val.array()).eval());
      detail::acc(b, (-n.grad.array() * a->val.array() / b->val.array().square()).eval());
    };
  return o;
}

// b broadcast across rows of a: a is [N, D], b holds D values.
template <typename T>
Var<T> add_rowvec(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  if (a->val.cols() != static_cast<int>(b->val.numel()))
    throw ValidationError("add_rowvec: width mismatch");
  Tensor<T> out = a->val;
  auto m = out.mat();
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(b->val.data(), b->val.numel());
  m.rowwise() += bv;
  Var<T> o = g.make(std::move(out), a->needs_grad || b->needs_grad);
  if (o->needs_grad)
    o->backprop = [a, b](Node<T>& n) {
      detail::acc(a, n.grad.array());
      if (b->needs_grad) {
        b->graph->ensure_grad(b);
        auto gm = n.grad.mat();
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> bg(b->grad.data(), b->grad.numel());
        bg += gm.colwise().sum();
      }
    };
  return o;
}

template <typename T>
Var<T> mul_rowvec(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  if (a->val.cols() != static_cast<int>(b->val.numel()))
    throw ValidationError("mul_rowvec: width mismatch");
  Tensor<T> out = a->val;
  {
    auto m = out.mat();
    Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>> bv(b->val.data(), b->val.numel());
    for (int r = 0; r < m.rows(); ++r) m.row(r).array() *= bv;
  }
  Var<T> o = g.make(std::move(out), a->needs_grad || b->needs_grad);
  if (o->needs_grad)
    o->backprop = [a, b](Node<T>& n) {
      if (a->needs_grad) {
        a->graph->ensure_grad(a);
        auto ag = a->grad.mat();
        auto gm = n.grad.mat();
        Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>> bv(b->val.data(), b->val.numel());
        for (int r = 0; r < gm.rows(); ++r) ag.row(r).array() += gm.row(r).array() * bv;
      }
      if (b->needs_grad) {
        b->graph->ensure_grad(b);
        auto gm = n.grad.mat();
        auto am = a->val.mat();
        Eigen::Map<Eigen::Array<T, 1, Eigen::Dynamic>> bg(b->grad.data(), b->grad.numel());
        bg += (gm.array() * am.array()).colwise().sum();
      }
    };
  return o;
}

// b broadcast across columns of a: a is [N, D], b is [N, 1].
template <typename T>
Var<T> mul_colvec(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  if (b->val.cols() != 1 || b->val.rows() != a->val.rows())
    throw ValidationError("mul_colvec: b must be [rows(a), 1]");
  Tensor<T> out = a->val;
  {
    auto m = out.mat();
    for (int r = 0; r < m.rows(); ++r) m.row(r) *= b->val[r];
  }
  Var<T> o = g.make(std::move(out), a->needs_grad || b->needs_grad);
  if (o->needs_grad)
    o->backprop = [a, b](Node<T>& n) {
      auto gm = n.grad.mat();
      if (a->needs_grad) {
        a->graph->ensure_grad(a);
        auto ag = a->grad.mat();
        for (int r = 0; r < gm.rows(); ++r) ag.row(r) += gm.row(r) * b->val[r];
      }
      if (b->needs_grad) {
        b->graph->ensure_grad(b);
        auto am = a->val.mat();
        for (int r = 0; r < gm.rows(); ++r) b->grad[r] += gm.row(r).dot(am.row(r));
      }
    };
  return o;
}

template <typename T>
Var<T> div_colvec(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  if (b->val.cols() != 1 || b->val.rows() != a->val.rows())
    throw ValidationError("div_colvec: b must be [rows(a), 1]");
  Tensor<T> out = a->val;
  {
    auto m = out.mat();
    for (int r = 0; r < m.rows(); ++r) m.row(r) /= b->val[r];
  }
  Var<T> o = g.make(std::move(out), a->needs_grad || b->needs_grad);
  if (o->needs_grad)
    o->backprop = [a, b](Node<T>& n) {
      auto gm = n.grad.mat();
      auto ym = n.val.mat();
      if (a->needs_grad) {
        a->graph->ensure_grad(a);
        auto ag = a->grad.mat();
        for (int r = 0; r < gm.rows(); ++r) ag.row(r) += gm.row(r) / b->val[r];
      }
      if (b->needs_grad) {
        b->graph->ensure_grad(b);
        for (int r = 0; r < gm.rows(); ++r)
          b->grad[r] -= gm.row(r).dot(ym.row(r)) / b->val[r];
      }
    };
  return o;
}

// ---- elementwise unary ----------------------------------------------------

// fwd maps x -> y; dfd maps (x, y) -> dy/dx, both elementwise.
template <typename T, typename FwdFn, typename BwdFn>
Var<T> unary_op(Var<T> a, FwdFn fwd, BwdFn dfd) {
  using ArrayX = typename Tensor<T>::ArrayX;
  Tensor<T> out = a->val;
  out.array() = fwd(a->val.array());
  Var<T> o = a->graph->make(std::move(out), a->needs_grad);
  if (o->needs_grad)
    o->backprop = [a, dfd](Node<T>& n) {
      ArrayX d = dfd(a->val.array(), n.val.array());
      detail::acc(a, (n.grad.array() * d).eval());
    };
  return o;
}

template <typename T>
Var<T> neg(Var<T> a) {
  using ArrayX = typename Tensor<T>::ArrayX;
  return unary_op(
      a, [](const ArrayX& x) -> ArrayX { return -x; },
      [](const ArrayX& x, const ArrayX&) -> ArrayX {
        return ArrayX::Constant(x.size(), T(-1));
      });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  using ArrayX = typename Tensor<T>::ArrayX;
  return unary_op(
      a, [c](const ArrayX& x) -> ArrayX { return x * c; },
      [c](const ArrayX& x, const ArrayX&) -> ArrayX { return ArrayX::Constant(x.size(), c); });
}

template <typename T>
Var<T> add_const(Var<T> a, T c) {
  using ArrayX = typename Tensor<T>::ArrayX;
  return unary_op(
      a, [c](const ArrayX& x) -> ArrayX { return x + c; },
      [](const ArrayX& x, const ArrayX&) -> ArrayX {
        return ArrayX::Constant(x.size(), T(1));
      });
}

template <typename T>
Var<T> leaky_relu(Var<T> a, T slope = T(0.1)) {
  using ArrayX = typename Tensor<T>::ArrayX;
  return unary_op(
      a,
      [slope](const ArrayX& x) -> ArrayX { return (x >= T(0)).select(x, x * slope); },
      [slope](const ArrayX& x, const ArrayX&) -> ArrayX {
        return (x >= T(0)).select(ArrayX::Constant(x.size(), T(1)),
                                  ArrayX::Constant(x.size(), slope));
      });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  using ArrayX = typename Tensor<T>::ArrayX;
  return unary_op(
      a, [](const ArrayX& x) -> ArrayX { return T(1) / (T(1) + (-x).exp()); },
      [](const ArrayX&, const ArrayX& y) -> ArrayX { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh_fn(Var<T> a) {
  using ArrayX = typename Tensor<T>::ArrayX;
  return unary_op(
      a, [](const ArrayX& x) -> ArrayX { return x.tanh(); },
      [](const ArrayX&, const ArrayX& y) -> ArrayX { return T(1) - y.square(); });
}

template <typename T>
Var<T> exp_fn(Var<T> a) {
  using ArrayX = typename Tensor<T>::ArrayX;
  return unary_op(
      a, [](const ArrayX& x) -> ArrayX { return x.exp(); },
      [](const ArrayX&, const ArrayX& y) -> ArrayX { return y; });
}

template <typename T>
Var<T> log_fn(Var<T> a) {
  using ArrayX = typename Tensor<T>::ArrayX;
  return unary_op(
      a, [](const ArrayX& x) -> ArrayX { return x.log(); },
      [](const ArrayX& x, const ArrayX&) -> ArrayX { return x.inverse(); });
}

template <typename T>
Var<T> softplus(Var<T> a) {
  using ArrayX = typename Tensor<T>::ArrayX;
  return unary_op(
      a,
      [](const ArrayX& x) -> ArrayX { return x.max(T(0)) + (-x.abs()).exp().log1p(); },
      [](const ArrayX& x, const ArrayX&) -> ArrayX { return T(1) / (T(1) + (-x).exp()); });
}

template <typename T>
Var<T> square(Var<T> a) {
  using ArrayX = typename Tensor<T>::ArrayX;
  return unary_op(
      a, [](const ArrayX& x) -> ArrayX { return x.square(); },
      [](const ArrayX& x, const ArrayX&) -> ArrayX { return x * T(2); });
}

template <typename T>
Var<T> stop_grad(Var<T> a) {
  return a->graph->constant(a->val);
}

// ---- reductions ------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> a) {
  Tensor<T> out = Tensor<T>::scalar(a->val.array().sum());
  Var<T> o = a->graph->make(std::move(out), a->needs_grad);
  if (o->needs_grad)
    o->backprop = [a](Node<T>& n) {
      using ArrayX = typename Tensor<T>::ArrayX;
      detail::acc(a, ArrayX::Constant(a->val.numel(), n.grad[0]).eval());
    };
  return o;
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  T inv = T(1) / static_cast<T>(a->val.numel());
  return scale(sum_all(a), inv);
}

// Row sums: [N, D] -> [N, 1]; the per-sample reduction for losses.
template <typename T>
Var<T> row_sum(Var<T> a) {
  int n = a->val.rows();
  Tensor<T> out({n, 1});
  out.mat() = a->val.mat().rowwise().sum();
  Var<T> o = a->graph->make(std::move(out), a->needs_grad);
  if (o->needs_grad)
    o->backprop = [a](Node<T>& nd) {
      if (!a->needs_grad) return;
      a->graph->ensure_grad(a);
      auto ag = a->grad.mat();
      auto gm = nd.grad.mat();
      for (int r = 0; r < ag.rows(); ++r) ag.row(r).array() += gm(r, 0);
    };
  return o;
}

// ---- shape ops --------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> a, std::vector<int> shape) {
  Tensor<T> out = a->val.reshaped(shape);
  Var<T> o = a->graph->make(std::move(out), a->needs_grad);
  if (o->needs_grad)
    o->backprop = [a](Node<T>& n) { detail::acc(a, n.grad.array()); };
  return o;
}

template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  if (a->val.rows() != b->val.rows()) throw ValidationError("concat_cols: row mismatch");
  int n = a->val.rows(), da = a->val.cols(), db = b->val.cols();
  Tensor<T> out({n, da + db});
  out.mat().leftCols(da) = a->val.mat();
  out.mat().rightCols(db) = b->val.mat();
  Var<T> o = g.make(std::move(out), a->needs_grad || b->needs_grad);
  if (o->needs_grad)
    o->backprop = [a, b, da, db](Node<T>& nd) {
      auto gm = nd.grad.mat();
      if (a->needs_grad) {
        a->graph->ensure_grad(a);
        a->grad.mat() += gm.leftCols(da);
      }
      if (b->needs_grad) {
        b->graph->ensure_grad(b);
        b->grad.mat() += gm.rightCols(db);
      }
    };
  return o;
}

template <typename T>
Var<T> slice_cols(Var<T> a, int begin, int len) {
  if (begin < 0 || len < 0 || begin + len > a->val.cols())
    throw ValidationError("slice_cols: out of range");
  int n = a->val.rows();
  Tensor<T> out({n, len});
  out.mat() = a->val.mat().middleCols(begin, len);
  Var<T> o = a->graph->make(std::move(out), a->needs_grad);
  if (o->needs_grad)
    o->backprop = [a, begin, len](Node<T>& nd) {
      if (!a->needs_grad) return;
      a->graph->ensure_grad(a);
      a->grad.mat().middleCols(begin, len) += nd.grad.mat();
    };
  return o;
}

// ---- linear algebra ----------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  if (a->val.cols() != b->val.rows()) throw ValidationError("matmul: inner dim mismatch");
  int n = a->val.rows(), m = b->val.cols();
  Tensor<T> out({n, m});
  out.mat().noalias() = a->val.mat() * b->val.mat();
  Var<T> o = g.make(std::move(out), a->needs_grad || b->needs_grad);
  if (o->needs_grad)
    o->backprop = [a, b](Node<T>& nd) {
      auto gm = nd.grad.mat();
      if (a->needs_grad) {
        a->graph->ensure_grad(a);
        a->grad.mat().noalias() += gm * b->val.mat().transpose();
      }
      if (b->needs_grad) {
        b->graph->ensure_grad(b);
        b->grad.mat().noalias() += a->val.mat().transpose() * gm;
      }
    };
  return o;
}

// Row-wise softmax. The per-row max is subtracted as a constant, which keeps
// the computation stable without changing the derivative.
template <typename T>
Var<T> softmax_rows(Var<T> a) {
  int n = a->val.rows(), k = a->val.cols();
  Tensor<T> shift({n, k});
  auto am = a->val.mat();
  auto sm = shift.mat();
  for (int r = 0; r < n; ++r) sm.row(r).setConstant(am.row(r).maxCoeff());
  Var<T> centered = sub(a, a->graph->constant(shift));
  Var<T> e = exp_fn(centered);
  return div_colvec(e, row_sum(e));
}

// ---- fused losses --------------------------------------------------------------

// Stable log-softmax cross-entropy; returns per-sample loss column [N, 1].
template <typename T>
Var<T> softmax_ce(Var<T> logits, const std::vector<int>& labels) {
  int n = logits->val.rows(), k = logits->val.cols();
  if (static_cast<int>(labels.size()) != n)
    throw ValidationError("softmax_ce: label count mismatch");
  for (int lbl : labels)
    if (lbl < 0 || lbl >= k) throw ValidationError("softmax_ce: label out of range");
  Tensor<T> out({n, 1});
  auto lm = logits->val.mat();
  for (int r = 0; r < n; ++r) {
    T mx = lm.row(r).maxCoeff();
    T lse = mx + std::log((lm.row(r).array() - mx).exp().sum());
    out[r] = lse - lm(r, labels[r]);
  }
  Var<T> o = logits->graph->make(std::move(out), logits->needs_grad);
  if (o->needs_grad)
    o->backprop = [logits, labels](Node<T>& nd) {
      if (!logits->needs_grad) return;
      logits->graph->ensure_grad(logits);
      auto lm = logits->val.mat();
      auto gm = logits->grad.mat();
      for (int r = 0; r < lm.rows(); ++r) {
        T mx = lm.row(r).maxCoeff();
        Eigen::Array<T, 1, Eigen::Dynamic> p = (lm.row(r).array() - mx).exp();
        p /= p.sum();
        T gr = nd.grad[r];
        gm.row(r).array() += gr * p;
        gm(r, labels[r]) -= gr;
      }
    };
  return o;
}

}  // namespace cfbench::nn
