#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fgss::nn {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense NCHW tensor. A tensor built with `allocate = false` carries only its
/// shape; models built that way are used for analytic audits of huge configs.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T(0), bool allocate = true) : shape_{n, c, h, w} {
    if (n < 0 || c < 0 || h < 0 || w < 0) throw ShapeError("tensor: negative dimension");
    if (allocate) data_.assign(numel(), fill);
  }

  const std::array<int, 4>& shape() const { return shape_; }
  int n() const { return shape_[0]; }
  int c() const { return shape_[1]; }
  int h() const { return shape_[2]; }
  int w() const { return shape_[3]; }

  std::size_t numel() const {
    return static_cast<std::size_t>(shape_[0]) * shape_[1] * shape_[2] * shape_[3];
  }
  std::size_t plane() const { return static_cast<std::size_t>(shape_[2]) * shape_[3]; }
  std::size_t sample_size() const { return plane() * static_cast<std::size_t>(shape_[1]); }
  bool allocated() const { return data_.size() == numel() && numel() > 0; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T* sample(int i) { return data_.data() + static_cast<std::size_t>(i) * sample_size(); }
  const T* sample(int i) const { return data_.data() + static_cast<std::size_t>(i) * sample_size(); }
  T* channel(int i, int ch) { return sample(i) + static_cast<std::size_t>(ch) * plane(); }
  const T* channel(int i, int ch) const { return sample(i) + static_cast<std::size_t>(ch) * plane(); }

  T& at(int i, int ch, int y, int x) {
    return data_[((static_cast<std::size_t>(i) * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x];
  }
  T at(int i, int ch, int y, int x) const {
    return data_[((static_cast<std::size_t>(i) * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  std::array<int, 4> shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

std::string shape_string(const std::array<int, 4>& s);

template <typename T>
void require_shape(const Tensor<T>& t, int c, int h, int w, const char* what) {
  if (t.c() != c || t.h() != h || t.w() != w) {
    throw ShapeError(std::string(what) + ": expected [N," + std::to_string(c) + "," + std::to_string(h) + "," +
                     std::to_string(w) + "], got " + shape_string(t.shape()));
  }
}

/// Channel concatenation of two tensors with equal N, H, W.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Inverse of concat_channels: splits channels [0, ca) and [ca, C).
template <typename T>
void split_channels(const Tensor<T>& t, int ca, Tensor<T>& a, Tensor<T>& b);

}  // namespace fgss::nn
