#pragma once

// Layers with explicit forward/backward. `forward` caches what `backward`
// needs and is used for training; `infer` is const and cache-free so several
// threads may run it on one set of weights. T is float for training and
// inference, double for finite-difference gradient checks.

#include <cstdint>
#include <string>
#include <vector>

#include "fgss/nn/tensor.hpp"
#include "fgss/rng.hpp"

namespace fgss::nn {

template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
};

template <typename T>
struct ParamRef {
  std::string name;
  Param<T>* param;
};

template <typename T>
struct BufferRef {
  std::string name;
  Tensor<T>* tensor;
};

/// Registration sink for parameters and non-trainable buffers.
template <typename T>
struct ParamList {
  std::vector<ParamRef<T>> params;
  std::vector<BufferRef<T>> buffers;

  void add(const std::string& name, Param<T>& p) { params.push_back({name, &p}); }
  void add_buffer(const std::string& name, Tensor<T>& t) { buffers.push_back({name, &t}); }
  std::size_t count() const;
  void zero_grad();
};

enum class Mode { train, eval };

/// Kaiming-uniform style initialisation shared by all weight layers.
template <typename T>
void init_uniform(Tensor<T>& t, double bound, Rng& rng);

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, bool allocate = true);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }
  std::size_t param_count() const;
  /// Multiply-accumulates for one sample at the given input size.
  double macs(int in_h, int in_w) const;

  void init(Rng& rng);
  void collect(ParamList<T>& list, const std::string& prefix);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& dy);

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

 private:
  Tensor<T> run(const Tensor<T>& x) const;

  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Param<T> weight_;  // [out, in, k, k]
  Param<T> bias_;    // [1, out, 1, 1]
  Tensor<T> x_;
};

/// Transposed convolution; with kernel 3, stride 2, pad 1, output_padding 1
/// it exactly doubles the spatial size.
template <typename T>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(int in_ch, int out_ch, int kernel, int stride, int pad, int output_pad, bool allocate = true);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int out_size(int in) const { return (in - 1) * stride_ - 2 * pad_ + k_ + opad_; }
  std::size_t param_count() const;
  double macs(int in_h, int in_w) const;

  void init(Rng& rng);
  void collect(ParamList<T>& list, const std::string& prefix);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  Tensor<T> run(const Tensor<T>& x) const;

  int in_ = 0, out_ = 0, k_ = 3, stride_ = 2, pad_ = 1, opad_ = 1;
  Param<T> weight_;  // [in, out, k, k]
  Param<T> bias_;
  Tensor<T> x_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels, bool allocate = true);

  std::size_t param_count() const { return 2 * static_cast<std::size_t>(c_); }
  void init(Rng& rng);
  void collect(ParamList<T>& list, const std::string& prefix);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& dy);

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

 private:
  int c_ = 0;
  Param<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
};

/// conv3×3 (or strided) → batchnorm → ReLU, the workhorse block.
template <typename T>
class ConvBnRelu {
 public:
  ConvBnRelu() = default;
  ConvBnRelu(int in_ch, int out_ch, int stride, bool allocate = true);

  std::size_t param_count() const { return conv_.param_count() + bn_.param_count(); }
  double macs(int in_h, int in_w) const { return conv_.macs(in_h, in_w); }
  int out_size(int in) const { return conv_.out_size(in); }
  int out_channels() const { return conv_.out_channels(); }
  void init(Rng& rng);
  void collect(ParamList<T>& list, const std::string& prefix);

  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  Tensor<T> out_;
};

template <typename T>
class MaxPool2x2 {
 public:
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  std::array<int, 4> in_shape_{};
  std::vector<std::uint32_t> argmax_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, bool allocate = true);

  std::size_t param_count() const { return static_cast<std::size_t>(in_) * out_ + out_; }
  void init(Rng& rng);
  void collect(ParamList<T>& list, const std::string& prefix);

  // Inputs/outputs are [N, features, 1, 1].
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  int in_ = 0, out_ = 0;
  Param<T> weight_;  // [out, in, 1, 1]
  Param<T> bias_;
  Tensor<T> x_;
};

/// Inverted dropout; the mask comes from the caller's generator.
template <typename T>
class Dropout {
 public:
  explicit Dropout(double p = 0.5) : p_(p) {}
  Tensor<T> forward(const Tensor<T>& x, Rng& rng);
  Tensor<T> backward(const Tensor<T>& dy) const;
  double p() const { return p_; }

 private:
  double p_;
  std::vector<T> scale_;
};

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& out, const Tensor<T>& dy);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
/// Mean over H×W: [N,C,H,W] → [N,C,1,1].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, int h, int w);

}  // namespace fgss::nn
