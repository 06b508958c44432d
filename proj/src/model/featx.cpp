#include "fgss/model/featx.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fgss::model {

using nn::Tensor;

void FeatExConfig::validate() const {
  if (stage_channels.empty() || stage_channels.size() != convs_per_stage.size()) {
    throw std::invalid_argument("featx: stage channel and conv lists must be non-empty and equal length");
  }
  if (in_channels <= 0 || width_classes <= 0) throw std::invalid_argument("featx: bad channel/class count");
  for (int c : stage_channels) {
    if (c <= 0) throw std::invalid_argument("featx: stage channels must be positive");
  }
  for (int c : convs_per_stage) {
    if (c <= 0) throw std::invalid_argument("featx: each stage needs at least one conv");
  }
  if (input_side <= 0 || input_side % (1 << stages()) != 0) {
    throw std::invalid_argument("featx: input side must be divisible by 2^stages");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("featx: dropout must be in [0, 1)");
}

FeatExConfig FeatExConfig::mini() {
  FeatExConfig c;
  c.input_side = 16;
  c.stage_channels = {2, 2, 2};
  c.convs_per_stage = {2, 2, 3};
  c.width_classes = 8;
  return c;
}

int width_class(double width_px, int classes) {
  const int w = static_cast<int>(std::lround(width_px));
  return std::clamp(w - 1, 0, classes - 1);
}

template <typename T>
FeatureExtractor<T>::FeatureExtractor(FeatExConfig cfg, bool allocate) : cfg_(std::move(cfg)), drop_(cfg_.dropout) {
  cfg_.validate();
  const int s = cfg_.stages();
  int cin = cfg_.in_channels;
  for (int i = 0; i < s; ++i) {
    Stage st;
    for (int j = 0; j < cfg_.convs_per_stage[i]; ++j) {
      st.convs.emplace_back(cin, cfg_.stage_channels[i], 1, allocate);
      cin = cfg_.stage_channels[i];
    }
    enc_.push_back(std::move(st));
  }
  for (int i = 0; i < s; ++i) {
    const int cout = i + 1 < s ? cfg_.stage_channels[s - 2 - i] : cfg_.stage_channels[0];
    dec_.push_back({nn::ConvTranspose2d<T>(cin, cout, 3, 2, 1, 1, allocate), nn::Conv2d<T>(cout, cout, 3, 1, 1, allocate), {}, {}});
    cin = cout;
  }
  proj_ = nn::Conv2d<T>(cin, cfg_.in_channels, 1, 1, 0, allocate);
  fc_ = nn::Linear<T>(cfg_.latent_channels(), cfg_.width_classes, allocate);
}

template <typename T>
void FeatureExtractor<T>::init(Rng& rng) {
  for (auto& st : enc_) {
    for (auto& c : st.convs) c.init(rng);
  }
  for (auto& u : dec_) {
    u.up.init(rng);
    u.refine.init(rng);
  }
  proj_.init(rng);
  fc_.init(rng);
}

template <typename T>
void FeatureExtractor<T>::collect_encoder(nn::ParamList<T>& list) {
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    for (std::size_t j = 0; j < enc_[i].convs.size(); ++j) {
      enc_[i].convs[j].collect(list, "e2.s" + std::to_string(i) + ".c" + std::to_string(j));
    }
  }
}

template <typename T>
void FeatureExtractor<T>::collect_head(nn::ParamList<T>& list) {
  fc_.collect(list, "head.fc");
}

template <typename T>
void FeatureExtractor<T>::collect_decoder(nn::ParamList<T>& list) {
  for (std::size_t i = 0; i < dec_.size(); ++i) {
    dec_[i].up.collect(list, "d2.u" + std::to_string(i));
    dec_[i].refine.collect(list, "d2.r" + std::to_string(i));
  }
  proj_.collect(list, "d2.proj");
}

template <typename T>
void FeatureExtractor<T>::collect(nn::ParamList<T>& list) {
  collect_encoder(list);
  collect_decoder(list);
  collect_head(list);
}

template <typename T>
std::size_t FeatureExtractor<T>::encoder_params() const {
  std::size_t n = 0;
  for (const auto& st : enc_) {
    for (const auto& c : st.convs) n += c.param_count();
  }
  return n;
}

template <typename T>
std::size_t FeatureExtractor<T>::decoder_params() const {
  std::size_t n = proj_.param_count();
  for (const auto& u : dec_) n += u.up.param_count() + u.refine.param_count();
  return n;
}

template <typename T>
std::size_t FeatureExtractor<T>::head_params() const {
  return fc_.param_count();
}

template <typename T>
double FeatureExtractor<T>::encoder_macs() const {
  double macs = 0.0;
  int side = cfg_.input_side;
  for (const auto& st : enc_) {
    for (const auto& c : st.convs) macs += c.macs(side, side);
    side /= 2;
  }
  return macs;
}

template <typename T>
Tensor<T> FeatureExtractor<T>::encode(const Tensor<T>& crops) const {
  nn::require_shape(crops, cfg_.in_channels, cfg_.input_side, cfg_.input_side, "featx encode");
  Tensor<T> x = crops;
  for (const auto& st : enc_) {
    for (const auto& c : st.convs) x = c.infer(x);
    x = st.pool.infer(x);
  }
  return x;
}

template <typename T>
Tensor<T> FeatureExtractor<T>::decode(const Tensor<T>& latent) const {
  nn::require_shape(latent, cfg_.latent_channels(), cfg_.latent_side(), cfg_.latent_side(), "featx decode");
  Tensor<T> x = latent;
  for (const auto& u : dec_) x = nn::relu(u.refine.infer(nn::relu(u.up.infer(x))));
  return nn::sigmoid(proj_.infer(x));
}

template <typename T>
Tensor<T> FeatureExtractor<T>::predict_width(const Tensor<T>& latent) const {
  if (latent.c() != cfg_.latent_channels()) {
    throw nn::ShapeError("featx head: expected " + std::to_string(cfg_.latent_channels()) + " channels, got " +
                         nn::shape_string(latent.shape()));
  }
  return fc_.infer(nn::global_avg_pool(latent));
}

template <typename T>
FeatExOutputs<T> FeatureExtractor<T>::forward(const Tensor<T>& crops, Rng& rng) {
  nn::require_shape(crops, cfg_.in_channels, cfg_.input_side, cfg_.input_side, "featx forward");
  FeatExOutputs<T> out;
  Tensor<T> x = crops;
  for (auto& st : enc_) {
    for (auto& c : st.convs) x = c.forward(x);
    x = st.pool.forward(x);
  }
  out.latent = x;
  latent_h_ = x.h();
  latent_w_ = x.w();
  for (auto& u : dec_) {
    u.mid = nn::relu(u.up.forward(x));
    u.out = nn::relu(u.refine.forward(u.mid));
    x = u.out;
  }
  recon_ = nn::sigmoid(proj_.forward(x));
  out.recon = recon_;
  out.logits = fc_.forward(drop_.forward(nn::global_avg_pool(out.latent), rng));
  return out;
}

template <typename T>
void FeatureExtractor<T>::backward(const Tensor<T>& d_recon, const Tensor<T>& d_logits) {
  // Decoder branch.
  Tensor<T> d(d_recon.n(), d_recon.c(), d_recon.h(), d_recon.w());
  for (std::size_t i = 0; i < d.numel(); ++i) {
    const T r = recon_.data()[i];
    d.data()[i] = d_recon.data()[i] * r * (T(1) - r);
  }
  d = proj_.backward(d);
  for (auto it = dec_.rbegin(); it != dec_.rend(); ++it) {
    d = it->refine.backward(nn::relu_backward(it->out, d));
    d = it->up.backward(nn::relu_backward(it->mid, d));
  }
  // Head branch joins at the latent.
  Tensor<T> dh = nn::global_avg_pool_backward(drop_.backward(fc_.backward(d_logits)), latent_h_, latent_w_);
  for (std::size_t i = 0; i < d.numel(); ++i) d.data()[i] += dh.data()[i];
  for (auto it = enc_.rbegin(); it != enc_.rend(); ++it) {
    d = it->pool.backward(d);
    for (auto c = it->convs.rbegin(); c != it->convs.rend(); ++c) d = c->backward(d);
  }
}

template <typename T>
Tensor<T> FeatureExtractor<T>::encode_train(const Tensor<T>& crops) {
  nn::require_shape(crops, cfg_.in_channels, cfg_.input_side, cfg_.input_side, "featx encode");
  Tensor<T> x = crops;
  for (auto& st : enc_) {
    for (auto& c : st.convs) x = c.forward(x);
    x = st.pool.forward(x);
  }
  return x;
}

template <typename T>
void FeatureExtractor<T>::backward_encoder(const Tensor<T>& d_latent) {
  Tensor<T> d = d_latent;
  for (auto it = enc_.rbegin(); it != enc_.rend(); ++it) {
    d = it->pool.backward(d);
    for (auto c = it->convs.rbegin(); c != it->convs.rend(); ++c) d = c->backward(d);
  }
}

Tensor<float> crop_batch(const pipeline::WallCropSet& set) {
  const int side = set.crops[0].raster.height();
  Tensor<float> x(5, 1, side, side);
  for (int i = 0; i < 5; ++i) {
    const Raster& r = set[pipeline::kTagOrder[static_cast<std::size_t>(i)]].raster;
    if (r.height() != side || r.width() != side || r.channels() != 1) {
      throw nn::ShapeError("crop set: crops must be single-channel squares of equal size");
    }
    std::copy(r.data().begin(), r.data().end(), x.sample(i));
  }
  return x;
}

Tensor<float> encode_crop_set(const FeatureExtractor<float>& fx, const pipeline::WallCropSet& set) {
  const Tensor<float> z = fx.encode(crop_batch(set));
  // Samples are contiguous, so [5, C, h, w] is already [1, 5C, h, w] in memory.
  Tensor<float> out(1, 5 * z.c(), z.h(), z.w());
  std::copy(z.data(), z.data() + z.numel(), out.data());
  return out;
}

template <typename T>
FeatExLoss<T> featex_loss(const Tensor<T>& recon, const Tensor<T>& crop, const Tensor<T>& logits,
                          const std::vector<int>& labels, double w1, double w2) {
  if (!recon.same_shape(crop)) throw nn::ShapeError("featex_loss: recon/crop shape mismatch");
  if (static_cast<int>(labels.size()) != logits.n()) throw nn::ShapeError("featex_loss: label count mismatch");
  if (w1 < 0.0 || w2 < 0.0) throw std::invalid_argument("featex_loss: weights must be non-negative");
  FeatExLoss<T> L;
  L.d_recon = Tensor<T>(recon.n(), recon.c(), recon.h(), recon.w());
  L.d_logits = Tensor<T>(logits.n(), logits.c(), logits.h(), logits.w());

  const double n = static_cast<double>(recon.numel());
  double se = 0.0;
  for (std::size_t i = 0; i < recon.numel(); ++i) {
    const double e = static_cast<double>(recon.data()[i]) - crop.data()[i];
    se += e * e;
    L.d_recon.data()[i] = static_cast<T>(w1 * 2.0 * e / n);
  }
  L.mse = se / n;

  const int k = static_cast<int>(logits.sample_size());
  const double batch = logits.n();
  double ce = 0.0;
  std::vector<double> p(static_cast<std::size_t>(k));
  for (int b = 0; b < logits.n(); ++b) {
    const T* z = logits.sample(b);
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= k) throw std::out_of_range("featex_loss: label outside class range");
    double mx = z[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(z[j]));
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
      p[static_cast<std::size_t>(j)] = std::exp(z[j] - mx);
      s += p[static_cast<std::size_t>(j)];
    }
    ce += -(z[y] - mx - std::log(s));
    T* dz = L.d_logits.sample(b);
    for (int j = 0; j < k; ++j) {
      const double pj = p[static_cast<std::size_t>(j)] / s;
      dz[j] = static_cast<T>(w2 * (pj - (j == y ? 1.0 : 0.0)) / batch);
    }
  }
  L.ce = ce / batch;
  L.total = w1 * L.mse + w2 * L.ce;
  return L;
}

template class FeatureExtractor<float>;
template class FeatureExtractor<double>;
template FeatExLoss<float> featex_loss<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                              const std::vector<int>&, double, double);
template FeatExLoss<double> featex_loss<double>(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                                const std::vector<int>&, double, double);

}  // namespace fgss::model
