#pragma once

// Wall-crop feature extractor: encoder E2 to a C×2×2 latent, a transposed-conv
// decoder D2 that reconstructs the crop, and a width-classification head.

#include <string>
#include <vector>

#include "fgss/nn/layers.hpp"
#include "fgss/pipeline.hpp"

namespace fgss::model {

struct FeatExConfig {
  int input_side = 64;
  int in_channels = 1;
  std::vector<int> stage_channels{16, 32, 64, 128, 256};
  std::vector<int> convs_per_stage{2, 2, 2, 3, 3};
  int width_classes = 64;
  double dropout = 0.5;

  int stages() const { return static_cast<int>(stage_channels.size()); }
  int latent_channels() const { return stage_channels.back(); }
  int latent_side() const { return input_side >> stages(); }
  /// Throws std::invalid_argument on inconsistent fields.
  void validate() const;

  /// Tiny configuration for finite-difference checks (16×16 input, 3 stages).
  static FeatExConfig mini();
};

/// Width in pixels → class index (width k maps to class k−1, clamped).
int width_class(double width_px, int classes = 64);
inline int class_width(int cls) { return cls + 1; }

template <typename T>
struct FeatExOutputs {
  nn::Tensor<T> latent;
  nn::Tensor<T> recon;
  nn::Tensor<T> logits;  // [N, classes, 1, 1]
};

template <typename T>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(FeatExConfig cfg = {}, bool allocate = true);

  const FeatExConfig& config() const { return cfg_; }

  void init(Rng& rng);
  /// Registers e2.*, d2.* and head.* parameters.
  void collect(nn::ParamList<T>& list);
  void collect_encoder(nn::ParamList<T>& list);
  void collect_head(nn::ParamList<T>& list);
  void collect_decoder(nn::ParamList<T>& list);

  std::size_t encoder_params() const;
  std::size_t decoder_params() const;
  std::size_t head_params() const;
  std::size_t param_count() const { return encoder_params() + decoder_params() + head_params(); }
  double encoder_macs() const;

  // Eval-mode paths; const and safe to share between threads.
  nn::Tensor<T> encode(const nn::Tensor<T>& crops) const;
  nn::Tensor<T> decode(const nn::Tensor<T>& latent) const;
  nn::Tensor<T> predict_width(const nn::Tensor<T>& latent) const;

  /// Training-mode pass through all three parts; dropout draws from `rng`.
  FeatExOutputs<T> forward(const nn::Tensor<T>& crops, Rng& rng);
  /// Accumulates parameter gradients from dL/d(recon) and dL/d(logits).
  void backward(const nn::Tensor<T>& d_recon, const nn::Tensor<T>& d_logits);

  /// Encoder only, in training mode (used when E2 is fine-tuned with the segmenter).
  nn::Tensor<T> encode_train(const nn::Tensor<T>& crops);
  void backward_encoder(const nn::Tensor<T>& d_latent);

 private:
  struct Stage {
    std::vector<nn::ConvBnRelu<T>> convs;
    nn::MaxPool2x2<T> pool;
  };
  // Upsample, then one 3x3 refinement; a bare transposed-conv chain
  // reconstructs too coarsely.
  struct UpStage {
    nn::ConvTranspose2d<T> up;
    nn::Conv2d<T> refine;
    nn::Tensor<T> mid, out;  // post-ReLU, for backward
  };

  FeatExConfig cfg_;
  std::vector<Stage> enc_;
  std::vector<UpStage> dec_;
  nn::Conv2d<T> proj_;
  nn::Tensor<T> recon_;
  nn::Dropout<T> drop_;
  nn::Linear<T> fc_;
  int latent_h_ = 0, latent_w_ = 0;
};

/// Latents of a crop set in canonical tag order: [1, 5·C, 2, 2].
nn::Tensor<float> encode_crop_set(const FeatureExtractor<float>& fx, const pipeline::WallCropSet& set);

/// Stacks the five crops, in tag order, into [5, 1, side, side].
nn::Tensor<float> crop_batch(const pipeline::WallCropSet& set);

template <typename T>
struct FeatExLoss {
  double total = 0.0;
  double mse = 0.0;
  double ce = 0.0;
  nn::Tensor<T> d_recon;
  nn::Tensor<T> d_logits;
};

/// w1·MSE(recon, crop) + w2·mean cross-entropy(logits, labels).
template <typename T>
FeatExLoss<T> featex_loss(const nn::Tensor<T>& recon, const nn::Tensor<T>& crop, const nn::Tensor<T>& logits,
                          const std::vector<int>& labels, double w1 = 0.001, double w2 = 10.0);

}  // namespace fgss::model
