#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "storyviz/common.hpp"
#include "storyviz/rng.hpp"

namespace storyviz {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    SV_CHECK(d >= 0, "negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major tensor. Deliberately minimal: a shape plus a contiguous
// buffer; all layout-aware work is done by the ops that use it.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(numel_of(shape_), T{}) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    SV_CHECK(static_cast<int64_t>(data_.size()) == numel_of(shape_),
             "data size ", data_.size(), " does not match shape ", shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor from_normal(Shape shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = mean + stddev * static_cast<T>(rng.normal());
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t dim(size_t i) const {
    SV_CHECK(i < shape_.size(), "dim index ", i, " out of range for ", shape_str(shape_));
    return shape_[i];
  }
  size_t rank() const { return shape_.size(); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T& at(std::initializer_list<int64_t> idx) { return data_[flat_index(idx)]; }
  const T& at(std::initializer_list<int64_t> idx) const { return data_[flat_index(idx)]; }

  // Reinterprets the buffer under a new shape with the same element count.
  Tensor reshaped(Shape new_shape) const {
    SV_CHECK(numel_of(new_shape) == numel(), "reshape ", shape_str(shape_), " -> ",
             shape_str(new_shape), " changes element count");
    return Tensor(std::move(new_shape), data_);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  size_t flat_index(std::initializer_list<int64_t> idx) const {
    SV_CHECK(idx.size() == shape_.size(), "index rank ", idx.size(),
             " does not match tensor rank ", shape_.size());
    int64_t flat = 0;
    size_t d = 0;
    for (int64_t i : idx) {
      SV_CHECK(i >= 0 && i < shape_[d], "index ", i, " out of range for dim ", d,
               " of ", shape_str(shape_));
      flat = flat * shape_[d] + i;
      ++d;
    }
    return static_cast<size_t>(flat);
  }

  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace storyviz
