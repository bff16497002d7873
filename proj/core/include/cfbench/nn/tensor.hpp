#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "cfbench/common.hpp"

namespace cfbench::nn {

// Dense row-major tensor. Activations follow the [batch, feature...] layout
// with sample n occupying row n of mat(); images use CHW feature order.
template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using ArrayX = Eigen::Array<T, Eigen::Dynamic, 1>;
  using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatMap =
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_ = ArrayX::Zero(numel_of(shape_));
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, T v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }
  static Tensor scalar(T v) { return full({1}, v); }
  static Tensor from(std::vector<int> shape, std::vector<T> values) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (static_cast<int64_t>(values.size()) != numel_of(t.shape_))
      throw ValidationError("tensor literal size does not match shape");
    t.data_ = Eigen::Map<const ArrayX>(values.data(), values.size());
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(i); }
  int64_t numel() const { return data_.size(); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Rows = leading dim, cols = product of the rest.
  int rows() const { return shape_.empty() ? 1 : shape_[0]; }
  int cols() const {
    int64_t c = shape_.empty() ? 1 : numel() / std::max(1, shape_[0]);
    return static_cast<int>(c);
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  ArrayX& array() { return data_; }
  const ArrayX& array() const { return data_; }
  MatMap mat() { return MatMap(data_.data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(data_.data(), rows(), cols()); }

  T& operator[](int64_t i) { return data_[i]; }
  T operator[](int64_t i) const { return data_[i]; }

  Tensor reshaped(std::vector<int> shape) const {
    if (numel_of(shape) != numel()) throw ValidationError("reshape changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  void set_zero() { data_.setZero(); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out = Tensor<U>(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  static int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ValidationError("negative tensor dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  ArrayX data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace cfbench::nn
