#pragma once

// U-Net segmenter E1-D1 with optional bottleneck fusion of the crop-set latent
// and the optional reconstruction head E3.

#include <string>
#include <vector>

#include "fgss/nn/layers.hpp"

namespace fgss::model {

enum class Variant { fgss, unet };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct SegmenterConfig {
  Variant variant = Variant::fgss;
  int base = 16;
  int stages = 7;
  int tile = 256;
  int in_channels = 1;
  bool with_rec = true;
  int injected_channels = 1280;
  std::vector<int> e3_plan{16, 16, 16, 32, 32, 64, 1280};

  int stage_channels(int i) const { return base << i; }
  int bottleneck_channels() const { return base << stages; }
  int bottleneck_side() const { return tile >> stages; }
  bool fused() const { return variant == Variant::fgss; }
  bool has_e3() const { return fused() && with_rec; }
  int fused_channels() const { return bottleneck_channels() + (fused() ? injected_channels : 0); }

  /// Throws std::invalid_argument on inconsistent geometry.
  void validate() const;

  /// Named configs: fgss16, fgss32, unet16, unet32 (optionally with_rec off).
  static SegmenterConfig named(const std::string& name, bool with_rec = true);
  /// Gradient-check scale: base 2, tile 32, 4 stages, 12 injected channels.
  static SegmenterConfig mini(Variant v = Variant::fgss, bool with_rec = true);
};

template <typename T>
struct SegOutput {
  nn::Tensor<T> logits;  // [N, 1, tile, tile]
  nn::Tensor<T> e3;      // [N, injected, side, side]; empty without E3
  bool has_e3 = false;
};

template <typename T>
class Segmenter {
 public:
  explicit Segmenter(SegmenterConfig cfg = {}, bool allocate = true);

  const SegmenterConfig& config() const { return cfg_; }

  void init(Rng& rng);
  void collect(nn::ParamList<T>& list);

  struct Counts {
    std::size_t e1 = 0, bottleneck = 0, d1 = 0, out = 0, e3 = 0;
    std::size_t total() const { return e1 + bottleneck + d1 + out + e3; }
  };
  Counts param_counts() const;
  double macs() const;

  SegOutput<T> infer(const nn::Tensor<T>& x, const nn::Tensor<T>* injected) const;
  SegOutput<T> forward(const nn::Tensor<T>& x, const nn::Tensor<T>* injected);
  /// Backprop from the loss gradients; returns dL/d(injected) (empty for unet).
  nn::Tensor<T> backward(const nn::Tensor<T>& d_logits, const nn::Tensor<T>* d_e3);

 private:
  struct EncStage {
    nn::ConvBnRelu<T> a, b;
    nn::MaxPool2x2<T> pool;
  };
  struct DecStage {
    nn::ConvTranspose2d<T> up;
    nn::ConvBnRelu<T> a, b;
  };

  void check_inputs(const nn::Tensor<T>& x, const nn::Tensor<T>* injected) const;

  SegmenterConfig cfg_;
  std::vector<EncStage> enc_;
  nn::ConvBnRelu<T> bott_a_, bott_b_;
  std::vector<DecStage> dec_;  // dec_[i] produces stage i's resolution
  nn::Conv2d<T> out_;
  std::vector<nn::ConvBnRelu<T>> e3_;
  nn::Conv2d<T> e3_last_;
};

template <typename T>
struct SegLoss {
  double total = 0.0;
  double bce = 0.0;
  double mse = 0.0;
  nn::Tensor<T> d_logits;
  nn::Tensor<T> d_e3;  // empty without a reconstruction term
};

/// w3·mean BCE-with-logits(logits, target) + w4·MSE(e3, injected). Pass null
/// e3/injected (both) to drop the second term.
template <typename T>
SegLoss<T> seg_loss(const nn::Tensor<T>& logits, const nn::Tensor<T>& target, const nn::Tensor<T>* e3,
                    const nn::Tensor<T>* injected, double w3 = 1.0, double w4 = 0.3);

}  // namespace fgss::model
