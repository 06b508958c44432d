#include "fgss/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>

#include "fgss/simd/kernels.hpp"
#include "fgss/simd/reference.hpp"

namespace fgss::nn {

std::string shape_string(const std::array<int, 4>& s) {
  return "[" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]) + "," +
         std::to_string(s[3]) + "]";
}

namespace {

// float routes through the dispatch table; double uses the shared reference loops.
template <typename T>
struct Ops;

template <>
struct Ops<float> {
  static void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda, const float* b,
                   int ldb, float beta, float* c, int ldc) {
    simd::active().gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
  static void relu(std::size_t n, const float* x, float* y) { simd::active().relu_forward(n, x, y); }
  static void relu_bwd(std::size_t n, const float* x, const float* dy, float* dx) {
    simd::active().relu_backward(n, x, dy, dx);
  }
  static void scale_shift(std::size_t n, const float* x, float s, float b, float* y) {
    simd::active().scale_shift(n, x, s, b, y);
  }
  static void sum_sumsq(std::size_t n, const float* x, double* s, double* q) { simd::active().sum_sumsq(n, x, s, q); }
  static double dot(std::size_t n, const float* x, const float* y) { return simd::active().dot(n, x, y); }
  static void axpy(std::size_t n, float a, const float* x, float* y) { simd::active().axpy(n, a, x, y); }
};

template <>
struct Ops<double> {
  static void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda, const double* b,
                   int ldb, double beta, double* c, int ldc) {
    simd::reference::gemm<double>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
  static void relu(std::size_t n, const double* x, double* y) { simd::reference::relu_forward(n, x, y); }
  static void relu_bwd(std::size_t n, const double* x, const double* dy, double* dx) {
    simd::reference::relu_backward(n, x, dy, dx);
  }
  static void scale_shift(std::size_t n, const double* x, double s, double b, double* y) {
    simd::reference::scale_shift(n, x, s, b, y);
  }
  static void sum_sumsq(std::size_t n, const double* x, double* s, double* q) {
    simd::reference::sum_sumsq(n, x, s, q);
  }
  static double dot(std::size_t n, const double* x, const double* y) { return simd::reference::dot(n, x, y); }
  static void axpy(std::size_t n, double a, const double* x, double* y) { simd::reference::axpy(n, a, x, y); }
};

// Elements allowed in one im2col buffer before samples are processed in smaller groups.
constexpr std::size_t kColBudget = std::size_t{24} << 20;

// Scratch that im2col/gemm fully overwrite; skips the zero fill of std::vector.
template <typename T>
struct Scratch {
  std::unique_ptr<T[]> p;
  explicit Scratch(std::size_t n) : p(n ? new T[n] : nullptr) {}
  T* data() { return p.get(); }
};

int group_size(int n, std::size_t per_sample) {
  if (per_sample == 0) return std::max(1, n);
  const std::size_t g = std::max<std::size_t>(1, kColBudget / per_sample);
  return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(n), g));
}

struct Geometry {
  int c, h, w, k, stride, pad, oh, ow;
};

// Unfolds one sample [c, h, w] into columns [c*k*k, oh*ow] with row stride ld.
template <typename T>
void im2col(const T* x, const Geometry& g, T* col, std::size_t ld) {
  for (int c = 0; c < g.c; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        T* row = col + (static_cast<std::size_t>(c) * g.k * g.k + ki * g.k + kj) * ld;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          T* dst = row + static_cast<std::size_t>(oy) * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * g.w;
          if (g.stride == 1) {
            const int lo = std::max(0, g.pad - kj);
            const int hi = std::min(g.ow, g.w + g.pad - kj);
            std::fill(dst, dst + std::max(lo, 0), T(0));
            if (hi > lo) std::memcpy(dst + lo, src + lo - g.pad + kj, sizeof(T) * static_cast<std::size_t>(hi - lo));
            std::fill(dst + std::max(hi, lo), dst + g.ow, T(0));
          } else {
            for (int ox = 0; ox < g.ow; ++ox) {
              const int ix = ox * g.stride - g.pad + kj;
              dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into an image [c, h, w].
template <typename T>
void col2im(const T* col, std::size_t ld, const Geometry& g, T* x) {
  for (int c = 0; c < g.c; ++c) {
    T* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row = col + (static_cast<std::size_t>(c) * g.k * g.k + ki * g.k + kj) * ld;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.ow;
          T* dst = xc + static_cast<std::size_t>(iy) * g.w;
          if (g.stride == 1) {
            const int lo = std::max(0, g.pad - kj);
            const int hi = std::min(g.ow, g.w + g.pad - kj);
            for (int ox = lo; ox < hi; ++ox) dst[ox - g.pad + kj] += src[ox];
          } else {
            for (int ox = 0; ox < g.ow; ++ox) {
              const int ix = ox * g.stride - g.pad + kj;
              if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void add_bias(Tensor<T>& y, const Tensor<T>& bias) {
  const std::size_t p = y.plane();
  for (int n = 0; n < y.n(); ++n) {
    for (int c = 0; c < y.c(); ++c) {
      T* ch = y.channel(n, c);
      const T b = bias.data()[c];
      if (b == T(0)) continue;
      for (std::size_t i = 0; i < p; ++i) ch[i] += b;
    }
  }
}

template <typename T>
void accumulate_bias_grad(const Tensor<T>& dy, Tensor<T>& db) {
  const std::size_t p = dy.plane();
  for (int c = 0; c < dy.c(); ++c) {
    double s = 0.0;
    for (int n = 0; n < dy.n(); ++n) {
      const T* ch = dy.channel(n, c);
      for (std::size_t i = 0; i < p; ++i) s += ch[i];
    }
    db.data()[c] += static_cast<T>(s);
  }
}

// Copies samples [n0, n0+g) of t ([N, C, P]) into a [C, g*P] matrix.
template <typename T>
void gather(const Tensor<T>& t, int n0, int g, T* dst) {
  const std::size_t p = t.plane();
  const std::size_t ld = p * static_cast<std::size_t>(g);
  for (int s = 0; s < g; ++s) {
    for (int c = 0; c < t.c(); ++c) {
      std::memcpy(dst + static_cast<std::size_t>(c) * ld + s * p, t.channel(n0 + s, c), sizeof(T) * p);
    }
  }
}

template <typename T>
void scatter(const T* src, int n0, int g, Tensor<T>& t) {
  const std::size_t p = t.plane();
  const std::size_t ld = p * static_cast<std::size_t>(g);
  for (int s = 0; s < g; ++s) {
    for (int c = 0; c < t.c(); ++c) {
      std::memcpy(t.channel(n0 + s, c), src + static_cast<std::size_t>(c) * ld + s * p, sizeof(T) * p);
    }
  }
}

}  // namespace

template <typename T>
std::size_t ParamList<T>::count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.param->value.numel();
  return n;
}

template <typename T>
void ParamList<T>::zero_grad() {
  for (auto& p : params) p.param->grad.zero();
}

template <typename T>
void init_uniform(Tensor<T>& t, double bound, Rng& rng) {
  for (T& v : t.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("concat_channels: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> out(a.n(), a.c() + b.c(), a.h(), a.w());
  for (int n = 0; n < a.n(); ++n) {
    std::copy(a.sample(n), a.sample(n) + a.sample_size(), out.sample(n));
    std::copy(b.sample(n), b.sample(n) + b.sample_size(), out.sample(n) + a.sample_size());
  }
  return out;
}

template <typename T>
void split_channels(const Tensor<T>& t, int ca, Tensor<T>& a, Tensor<T>& b) {
  a = Tensor<T>(t.n(), ca, t.h(), t.w());
  b = Tensor<T>(t.n(), t.c() - ca, t.h(), t.w());
  for (int n = 0; n < t.n(); ++n) {
    std::copy(t.sample(n), t.sample(n) + a.sample_size(), a.sample(n));
    std::copy(t.sample(n) + a.sample_size(), t.sample(n) + t.sample_size(), b.sample(n));
  }
}

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, bool allocate)
    : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(pad) {
  if (in_ch <= 0 || out_ch <= 0 || kernel <= 0 || stride <= 0 || pad < 0) throw ShapeError("conv2d: bad geometry");
  weight_.value = Tensor<T>(out_, in_, k_, k_, T(0), allocate);
  bias_.value = Tensor<T>(1, out_, 1, 1, T(0), allocate);
  if (allocate) {
    weight_.grad = Tensor<T>(out_, in_, k_, k_);
    bias_.grad = Tensor<T>(1, out_, 1, 1);
  }
}

template <typename T>
std::size_t Conv2d<T>::param_count() const {
  return static_cast<std::size_t>(out_) * in_ * k_ * k_ + out_;
}

template <typename T>
double Conv2d<T>::macs(int in_h, int in_w) const {
  return static_cast<double>(out_size(in_h)) * out_size(in_w) * out_ * in_ * k_ * k_;
}

template <typename T>
void Conv2d<T>::init(Rng& rng) {
  init_uniform(weight_.value, std::sqrt(6.0 / (in_ * k_ * k_)), rng);
  bias_.value.zero();
}

template <typename T>
void Conv2d<T>::collect(ParamList<T>& list, const std::string& prefix) {
  list.add(prefix + ".weight", weight_);
  list.add(prefix + ".bias", bias_);
}

template <typename T>
Tensor<T> Conv2d<T>::run(const Tensor<T>& x) const {
  if (x.c() != in_) {
    throw ShapeError("conv2d: expected " + std::to_string(in_) + " input channels, got " + shape_string(x.shape()));
  }
  const int oh = out_size(x.h()), ow = out_size(x.w());
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: input too small " + shape_string(x.shape()));
  Tensor<T> y(x.n(), out_, oh, ow);
  const std::size_t P = static_cast<std::size_t>(oh) * ow;
  const int K = in_ * k_ * k_;
  const T* W = weight_.value.data();

  if (k_ == 1 && stride_ == 1 && pad_ == 0) {
    for (int n = 0; n < x.n(); ++n) {
      Ops<T>::gemm(false, false, out_, static_cast<int>(P), in_, T(1), W, in_, x.sample(n), static_cast<int>(P),
                   T(0), y.sample(n), static_cast<int>(P));
    }
  } else {
    const Geometry g{in_, x.h(), x.w(), k_, stride_, pad_, oh, ow};
    const int group = group_size(x.n(), static_cast<std::size_t>(K) * P);
    Scratch<T> col(static_cast<std::size_t>(K) * P * group);
    Scratch<T> tmp(group > 1 ? static_cast<std::size_t>(out_) * P * group : 0);
    for (int n0 = 0; n0 < x.n(); n0 += group) {
      const int gsz = std::min(group, x.n() - n0);
      const std::size_t ld = P * gsz;
      for (int s = 0; s < gsz; ++s) im2col(x.sample(n0 + s), g, col.data() + s * P, ld);
      if (gsz == 1) {
        Ops<T>::gemm(false, false, out_, static_cast<int>(ld), K, T(1), W, K, col.data(), static_cast<int>(ld), T(0),
                     y.sample(n0), static_cast<int>(ld));
      } else {
        Ops<T>::gemm(false, false, out_, static_cast<int>(ld), K, T(1), W, K, col.data(), static_cast<int>(ld), T(0),
                     tmp.data(), static_cast<int>(ld));
        scatter(tmp.data(), n0, gsz, y);
      }
    }
  }
  add_bias(y, bias_.value);
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) {
  x_ = x;
  return run(x);
}

template <typename T>
Tensor<T> Conv2d<T>::infer(const Tensor<T>& x) const {
  return run(x);
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& dy) {
  const Tensor<T>& x = x_;
  Tensor<T> dx(x.n(), in_, x.h(), x.w());
  const int oh = dy.h(), ow = dy.w();
  const std::size_t P = static_cast<std::size_t>(oh) * ow;
  const int K = in_ * k_ * k_;
  T* dW = weight_.grad.data();
  const T* W = weight_.value.data();
  accumulate_bias_grad(dy, bias_.grad);

  if (k_ == 1 && stride_ == 1 && pad_ == 0) {
    for (int n = 0; n < x.n(); ++n) {
      Ops<T>::gemm(false, true, out_, in_, static_cast<int>(P), T(1), dy.sample(n), static_cast<int>(P), x.sample(n),
                   static_cast<int>(P), T(1), dW, in_);
      Ops<T>::gemm(true, false, in_, static_cast<int>(P), out_, T(1), W, in_, dy.sample(n), static_cast<int>(P), T(0),
                   dx.sample(n), static_cast<int>(P));
    }
    return dx;
  }

  const Geometry g{in_, x.h(), x.w(), k_, stride_, pad_, oh, ow};
  const int group = group_size(x.n(), static_cast<std::size_t>(K) * P);
  Scratch<T> col(static_cast<std::size_t>(K) * P * group);
  Scratch<T> dcol(static_cast<std::size_t>(K) * P * group);
  Scratch<T> dyg(group > 1 ? static_cast<std::size_t>(out_) * P * group : 0);
  for (int n0 = 0; n0 < x.n(); n0 += group) {
    const int gsz = std::min(group, x.n() - n0);
    const std::size_t ld = P * gsz;
    for (int s = 0; s < gsz; ++s) im2col(x.sample(n0 + s), g, col.data() + s * P, ld);
    const T* dymat = dy.sample(n0);
    if (gsz > 1) {
      gather(dy, n0, gsz, dyg.data());
      dymat = dyg.data();
    }
    Ops<T>::gemm(false, true, out_, K, static_cast<int>(ld), T(1), dymat, static_cast<int>(ld), col.data(),
                 static_cast<int>(ld), T(1), dW, K);
    Ops<T>::gemm(true, false, K, static_cast<int>(ld), out_, T(1), W, K, dymat, static_cast<int>(ld), T(0), dcol.data(),
                 static_cast<int>(ld));
    for (int s = 0; s < gsz; ++s) col2im(dcol.data() + s * P, ld, g, dx.sample(n0 + s));
  }
  return dx;
}

// ------------------------------------------------------- ConvTranspose2d

template <typename T>
ConvTranspose2d<T>::ConvTranspose2d(int in_ch, int out_ch, int kernel, int stride, int pad, int output_pad,
                                    bool allocate)
    : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(pad), opad_(output_pad) {
  if (in_ch <= 0 || out_ch <= 0 || kernel <= 0 || stride <= 0 || pad < 0 || output_pad < 0) {
    throw ShapeError("conv_transpose2d: bad geometry");
  }
  weight_.value = Tensor<T>(in_, out_, k_, k_, T(0), allocate);
  bias_.value = Tensor<T>(1, out_, 1, 1, T(0), allocate);
  if (allocate) {
    weight_.grad = Tensor<T>(in_, out_, k_, k_);
    bias_.grad = Tensor<T>(1, out_, 1, 1);
  }
}

template <typename T>
std::size_t ConvTranspose2d<T>::param_count() const {
  return static_cast<std::size_t>(in_) * out_ * k_ * k_ + out_;
}

template <typename T>
double ConvTranspose2d<T>::macs(int in_h, int in_w) const {
  return static_cast<double>(in_h) * in_w * in_ * out_ * k_ * k_;
}

template <typename T>
void ConvTranspose2d<T>::init(Rng& rng) {
  const double fan = static_cast<double>(in_) * k_ * k_ / (stride_ * stride_);
  init_uniform(weight_.value, std::sqrt(6.0 / fan), rng);
  bias_.value.zero();
}

template <typename T>
void ConvTranspose2d<T>::collect(ParamList<T>& list, const std::string& prefix) {
  list.add(prefix + ".weight", weight_);
  list.add(prefix + ".bias", bias_);
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::run(const Tensor<T>& x) const {
  if (x.c() != in_) {
    throw ShapeError("conv_transpose2d: expected " + std::to_string(in_) + " input channels, got " +
                     shape_string(x.shape()));
  }
  const int oh = out_size(x.h()), ow = out_size(x.w());
  Tensor<T> y(x.n(), out_, oh, ow);
  const std::size_t P = x.plane();
  const int K2 = out_ * k_ * k_;
  // Output image seen as the input of the adjoint convolution.
  const Geometry g{out_, oh, ow, k_, stride_, pad_, x.h(), x.w()};
  const int group = group_size(x.n(), static_cast<std::size_t>(K2) * P);
  Scratch<T> col(static_cast<std::size_t>(K2) * P * group);
  Scratch<T> xg(group > 1 ? static_cast<std::size_t>(in_) * P * group : 0);
  for (int n0 = 0; n0 < x.n(); n0 += group) {
    const int gsz = std::min(group, x.n() - n0);
    const std::size_t ld = P * gsz;
    const T* xm = x.sample(n0);
    if (gsz > 1) {
      gather(x, n0, gsz, xg.data());
      xm = xg.data();
    }
    Ops<T>::gemm(true, false, K2, static_cast<int>(ld), in_, T(1), weight_.value.data(), K2, xm, static_cast<int>(ld),
                 T(0), col.data(), static_cast<int>(ld));
    for (int s = 0; s < gsz; ++s) col2im(col.data() + s * P, ld, g, y.sample(n0 + s));
  }
  add_bias(y, bias_.value);
  return y;
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::forward(const Tensor<T>& x) {
  x_ = x;
  return run(x);
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::infer(const Tensor<T>& x) const {
  return run(x);
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::backward(const Tensor<T>& dy) {
  const Tensor<T>& x = x_;
  Tensor<T> dx(x.n(), in_, x.h(), x.w());
  const std::size_t P = x.plane();
  const int K2 = out_ * k_ * k_;
  const Geometry g{out_, dy.h(), dy.w(), k_, stride_, pad_, x.h(), x.w()};
  accumulate_bias_grad(dy, bias_.grad);
  const int group = group_size(x.n(), static_cast<std::size_t>(K2) * P);
  Scratch<T> dcol(static_cast<std::size_t>(K2) * P * group);
  Scratch<T> xg(group > 1 ? static_cast<std::size_t>(in_) * P * group : 0);
  Scratch<T> dxg(group > 1 ? static_cast<std::size_t>(in_) * P * group : 0);
  for (int n0 = 0; n0 < x.n(); n0 += group) {
    const int gsz = std::min(group, x.n() - n0);
    const std::size_t ld = P * gsz;
    for (int s = 0; s < gsz; ++s) im2col(dy.sample(n0 + s), g, dcol.data() + s * P, ld);
    const T* xm = x.sample(n0);
    T* dxm = dx.sample(n0);
    if (gsz > 1) {
      gather(x, n0, gsz, xg.data());
      xm = xg.data();
      dxm = dxg.data();
    }
    Ops<T>::gemm(false, true, in_, K2, static_cast<int>(ld), T(1), xm, static_cast<int>(ld), dcol.data(),
                 static_cast<int>(ld), T(1), weight_.grad.data(), K2);
    Ops<T>::gemm(false, false, in_, static_cast<int>(ld), K2, T(1), weight_.value.data(), K2, dcol.data(),
                 static_cast<int>(ld), T(0), dxm, static_cast<int>(ld));
    if (gsz > 1) scatter(dxg.data(), n0, gsz, dx);
  }
  return dx;
}

// ----------------------------------------------------------- BatchNorm2d

template <typename T>
BatchNorm2d<T>::BatchNorm2d(int channels, bool allocate) : c_(channels) {
  gamma_.value = Tensor<T>(1, c_, 1, 1, T(1), allocate);
  beta_.value = Tensor<T>(1, c_, 1, 1, T(0), allocate);
  running_mean_ = Tensor<T>(1, c_, 1, 1, T(0), allocate);
  running_var_ = Tensor<T>(1, c_, 1, 1, T(1), allocate);
  if (allocate) {
    gamma_.grad = Tensor<T>(1, c_, 1, 1);
    beta_.grad = Tensor<T>(1, c_, 1, 1);
  }
}

template <typename T>
void BatchNorm2d<T>::init(Rng&) {
  gamma_.value.fill(T(1));
  beta_.value.zero();
  running_mean_.zero();
  running_var_.fill(T(1));
}

template <typename T>
void BatchNorm2d<T>::collect(ParamList<T>& list, const std::string& prefix) {
  list.add(prefix + ".gamma", gamma_);
  list.add(prefix + ".beta", beta_);
  list.add_buffer(prefix + ".running_mean", running_mean_);
  list.add_buffer(prefix + ".running_var", running_var_);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x) {
  if (x.c() != c_) throw ShapeError("batchnorm: channel mismatch " + shape_string(x.shape()));
  const std::size_t p = x.plane();
  const double m = static_cast<double>(p) * x.n();
  Tensor<T> y(x.n(), c_, x.h(), x.w());
  xhat_ = Tensor<T>(x.n(), c_, x.h(), x.w());
  inv_std_.assign(static_cast<std::size_t>(c_), 0.0);
  for (int c = 0; c < c_; ++c) {
    double s = 0.0, q = 0.0;
    for (int n = 0; n < x.n(); ++n) {
      double ps, pq;
      Ops<T>::sum_sumsq(p, x.channel(n, c), &ps, &pq);
      s += ps;
      q += pq;
    }
    const double mean = s / m;
    const double var = std::max(0.0, q / m - mean * mean);
    const double inv = 1.0 / std::sqrt(var + kEps);
    inv_std_[static_cast<std::size_t>(c)] = inv;
    const T g = gamma_.value.data()[c], b = beta_.value.data()[c];
    for (int n = 0; n < x.n(); ++n) {
      Ops<T>::scale_shift(p, x.channel(n, c), static_cast<T>(inv), static_cast<T>(-mean * inv), xhat_.channel(n, c));
      Ops<T>::scale_shift(p, xhat_.channel(n, c), g, b, y.channel(n, c));
    }
    const double unbiased = m > 1 ? var * m / (m - 1) : var;
    T& rm = running_mean_.data()[c];
    T& rv = running_var_.data()[c];
    rm = static_cast<T>((1.0 - kMomentum) * rm + kMomentum * mean);
    rv = static_cast<T>((1.0 - kMomentum) * rv + kMomentum * unbiased);
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm2d<T>::infer(const Tensor<T>& x) const {
  if (x.c() != c_) throw ShapeError("batchnorm: channel mismatch " + shape_string(x.shape()));
  const std::size_t p = x.plane();
  Tensor<T> y(x.n(), c_, x.h(), x.w());
  for (int c = 0; c < c_; ++c) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(running_var_.data()[c]) + kEps);
    const double scale = gamma_.value.data()[c] * inv;
    const double shift = beta_.value.data()[c] - running_mean_.data()[c] * scale;
    for (int n = 0; n < x.n(); ++n) {
      Ops<T>::scale_shift(p, x.channel(n, c), static_cast<T>(scale), static_cast<T>(shift), y.channel(n, c));
    }
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& dy) {
  const std::size_t p = dy.plane();
  const double m = static_cast<double>(p) * dy.n();
  Tensor<T> dx(dy.n(), c_, dy.h(), dy.w());
  for (int c = 0; c < c_; ++c) {
    double dbeta = 0.0, dgamma = 0.0;
    for (int n = 0; n < dy.n(); ++n) {
      const T* d = dy.channel(n, c);
      for (std::size_t i = 0; i < p; ++i) dbeta += d[i];
      dgamma += Ops<T>::dot(p, d, xhat_.channel(n, c));
    }
    gamma_.grad.data()[c] += static_cast<T>(dgamma);
    beta_.grad.data()[c] += static_cast<T>(dbeta);
    const double a = gamma_.value.data()[c] * inv_std_[static_cast<std::size_t>(c)];
    const T ka = static_cast<T>(a);
    const T kb = static_cast<T>(-a * dgamma / m);
    const T kc = static_cast<T>(-a * dbeta / m);
    for (int n = 0; n < dy.n(); ++n) {
      const T* d = dy.channel(n, c);
      const T* xh = xhat_.channel(n, c);
      T* o = dx.channel(n, c);
      for (std::size_t i = 0; i < p; ++i) o[i] = ka * d[i] + kb * xh[i] + kc;
    }
  }
  return dx;
}

// ------------------------------------------------------------ ConvBnRelu

template <typename T>
ConvBnRelu<T>::ConvBnRelu(int in_ch, int out_ch, int stride, bool allocate)
    : conv_(in_ch, out_ch, 3, stride, 1, allocate), bn_(out_ch, allocate) {}

template <typename T>
void ConvBnRelu<T>::init(Rng& rng) {
  conv_.init(rng);
  bn_.init(rng);
}

template <typename T>
void ConvBnRelu<T>::collect(ParamList<T>& list, const std::string& prefix) {
  conv_.collect(list, prefix + ".conv");
  bn_.collect(list, prefix + ".bn");
}

template <typename T>
Tensor<T> ConvBnRelu<T>::forward(const Tensor<T>& x) {
  out_ = relu(bn_.forward(conv_.forward(x)));
  return out_;
}

template <typename T>
Tensor<T> ConvBnRelu<T>::infer(const Tensor<T>& x) const {
  return relu(bn_.infer(conv_.infer(x)));
}

template <typename T>
Tensor<T> ConvBnRelu<T>::backward(const Tensor<T>& dy) {
  return conv_.backward(bn_.backward(relu_backward(out_, dy)));
}

// ------------------------------------------------------------ MaxPool2x2

template <typename T>
Tensor<T> MaxPool2x2<T>::infer(const Tensor<T>& x) const {
  if (x.h() % 2 || x.w() % 2) throw ShapeError("maxpool: odd spatial size " + shape_string(x.shape()));
  Tensor<T> y(x.n(), x.c(), x.h() / 2, x.w() / 2);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T* src = x.channel(n, c);
      T* dst = y.channel(n, c);
      for (int oy = 0; oy < y.h(); ++oy) {
        const T* r0 = src + static_cast<std::size_t>(2 * oy) * x.w();
        const T* r1 = r0 + x.w();
        for (int ox = 0; ox < y.w(); ++ox) {
          dst[oy * y.w() + ox] = std::max(std::max(r0[2 * ox], r0[2 * ox + 1]), std::max(r1[2 * ox], r1[2 * ox + 1]));
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> MaxPool2x2<T>::forward(const Tensor<T>& x) {
  if (x.h() % 2 || x.w() % 2) throw ShapeError("maxpool: odd spatial size " + shape_string(x.shape()));
  in_shape_ = x.shape();
  Tensor<T> y(x.n(), x.c(), x.h() / 2, x.w() / 2);
  argmax_.assign(y.numel(), 0);
  std::size_t k = 0;
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const T* src = x.channel(n, c);
      T* dst = y.channel(n, c);
      for (int oy = 0; oy < y.h(); ++oy) {
        for (int ox = 0; ox < y.w(); ++ox, ++k) {
          std::uint32_t best = static_cast<std::uint32_t>(2 * oy * x.w() + 2 * ox);
          const std::uint32_t cand[3] = {best + 1, best + static_cast<std::uint32_t>(x.w()),
                                         best + static_cast<std::uint32_t>(x.w()) + 1};
          for (std::uint32_t i : cand) {
            if (src[i] > src[best]) best = i;
          }
          argmax_[k] = best;
          dst[oy * y.w() + ox] = src[best];
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> MaxPool2x2<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
  std::size_t k = 0;
  for (int n = 0; n < dy.n(); ++n) {
    for (int c = 0; c < dy.c(); ++c) {
      const T* d = dy.channel(n, c);
      T* o = dx.channel(n, c);
      for (std::size_t i = 0; i < dy.plane(); ++i, ++k) o[argmax_[k]] += d[i];
    }
  }
  return dx;
}

// ---------------------------------------------------------------- Linear

template <typename T>
Linear<T>::Linear(int in, int out, bool allocate) : in_(in), out_(out) {
  weight_.value = Tensor<T>(out, in, 1, 1, T(0), allocate);
  bias_.value = Tensor<T>(1, out, 1, 1, T(0), allocate);
  if (allocate) {
    weight_.grad = Tensor<T>(out, in, 1, 1);
    bias_.grad = Tensor<T>(1, out, 1, 1);
  }
}

template <typename T>
void Linear<T>::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
  init_uniform(weight_.value, bound, rng);
  init_uniform(bias_.value, bound, rng);
}

template <typename T>
void Linear<T>::collect(ParamList<T>& list, const std::string& prefix) {
  list.add(prefix + ".weight", weight_);
  list.add(prefix + ".bias", bias_);
}

template <typename T>
Tensor<T> Linear<T>::infer(const Tensor<T>& x) const {
  if (static_cast<int>(x.sample_size()) != in_) throw ShapeError("linear: feature mismatch " + shape_string(x.shape()));
  Tensor<T> y(x.n(), out_, 1, 1);
  for (int n = 0; n < x.n(); ++n) std::copy(bias_.value.data(), bias_.value.data() + out_, y.sample(n));
  Ops<T>::gemm(false, true, x.n(), out_, in_, T(1), x.data(), in_, weight_.value.data(), in_, T(1), y.data(), out_);
  return y;
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) {
  x_ = x;
  return infer(x);
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(x_.n(), x_.c(), x_.h(), x_.w());
  Ops<T>::gemm(true, false, out_, in_, dy.n(), T(1), dy.data(), out_, x_.data(), in_, T(1), weight_.grad.data(), in_);
  for (int n = 0; n < dy.n(); ++n) {
    for (int o = 0; o < out_; ++o) bias_.grad.data()[o] += dy.sample(n)[o];
  }
  Ops<T>::gemm(false, false, dy.n(), in_, out_, T(1), dy.data(), out_, weight_.value.data(), in_, T(0), dx.data(), in_);
  return dx;
}

// --------------------------------------------------------------- Dropout

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x, Rng& rng) {
  Tensor<T> y = x;
  scale_.assign(x.numel(), T(1));
  if (p_ <= 0.0) return y;
  const T keep = static_cast<T>(1.0 / (1.0 - p_));
  for (std::size_t i = 0; i < y.numel(); ++i) {
    scale_[i] = rng.bernoulli(p_) ? T(0) : keep;
    y.data()[i] *= scale_[i];
  }
  return y;
}

template <typename T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& dy) const {
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.numel(); ++i) dx.data()[i] *= scale_[i];
  return dx;
}

// ----------------------------------------------------------- elementwise

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.n(), x.c(), x.h(), x.w());
  Ops<T>::relu(x.numel(), x.data(), y.data());
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& out, const Tensor<T>& dy) {
  Tensor<T> dx(dy.n(), dy.c(), dy.h(), dy.w());
  Ops<T>::relu_bwd(dy.numel(), out.data(), dy.data(), dx.data());
  return dx;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.n(), x.c(), x.h(), x.w());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T v = x.data()[i];
    y.data()[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  Tensor<T> y(x.n(), x.c(), 1, 1);
  const std::size_t p = x.plane();
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      double s = 0.0;
      const T* ch = x.channel(n, c);
      for (std::size_t i = 0; i < p; ++i) s += ch[i];
      y.at(n, c, 0, 0) = static_cast<T>(s / static_cast<double>(p));
    }
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, int h, int w) {
  Tensor<T> dx(dy.n(), dy.c(), h, w);
  const T inv = T(1) / static_cast<T>(h * w);
  for (int n = 0; n < dy.n(); ++n) {
    for (int c = 0; c < dy.c(); ++c) {
      T* ch = dx.channel(n, c);
      const T v = dy.at(n, c, 0, 0) * inv;
      std::fill(ch, ch + dx.plane(), v);
    }
  }
  return dx;
}

#define FGSS_INSTANTIATE(T)                                                          \
  template struct ParamList<T>;                                                      \
  template void init_uniform<T>(Tensor<T>&, double, Rng&);                           \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);         \
  template void split_channels<T>(const Tensor<T>&, int, Tensor<T>&, Tensor<T>&);    \
  template class Conv2d<T>;                                                          \
  template class ConvTranspose2d<T>;                                                 \
  template class BatchNorm2d<T>;                                                     \
  template class ConvBnRelu<T>;                                                      \
  template class MaxPool2x2<T>;                                                      \
  template class Linear<T>;                                                          \
  template class Dropout<T>;                                                         \
  template Tensor<T> relu<T>(const Tensor<T>&);                                      \
  template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                   \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                           \
  template Tensor<T> global_avg_pool_backward<T>(const Tensor<T>&, int, int);

FGSS_INSTANTIATE(float)
FGSS_INSTANTIATE(double)

#undef FGSS_INSTANTIATE

}  // namespace fgss::nn
