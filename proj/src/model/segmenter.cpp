#include "fgss/model/segmenter.hpp"

#include <cmath>
#include <stdexcept>

namespace fgss::model {

using nn::Tensor;

std::string to_string(Variant v) { return v == Variant::fgss ? "fgss" : "unet"; }

Variant variant_from_string(const std::string& s) {
  if (s == "fgss") return Variant::fgss;
  if (s == "unet") return Variant::unet;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

void SegmenterConfig::validate() const {
  if (base <= 0 || stages <= 0 || in_channels <= 0) throw std::invalid_argument("segmenter: bad base/stages");
  if (stages > 12 || tile % (1 << stages) != 0) {
    throw std::invalid_argument("segmenter: tile " + std::to_string(tile) + " not divisible by 2^" +
                                std::to_string(stages));
  }
  if (fused() && injected_channels <= 0) throw std::invalid_argument("segmenter: injected channels must be positive");
  if (has_e3()) {
    if (static_cast<int>(e3_plan.size()) != stages) {
      throw std::invalid_argument("segmenter: reconstruction plan needs one entry per stage");
    }
    if (e3_plan.back() != injected_channels) {
      throw std::invalid_argument("segmenter: reconstruction plan must end at the injected channel count");
    }
    for (int c : e3_plan) {
      if (c <= 0) throw std::invalid_argument("segmenter: reconstruction channels must be positive");
    }
  }
}

SegmenterConfig SegmenterConfig::named(const std::string& name, bool with_rec) {
  SegmenterConfig c;
  if (name == "fgss16" || name == "fgss32") {
    c.variant = Variant::fgss;
  } else if (name == "unet16" || name == "unet32") {
    c.variant = Variant::unet;
  } else {
    throw std::invalid_argument("unknown model '" + name + "' (expected fgss16, fgss32, unet16, unet32)");
  }
  c.base = name.ends_with("16") ? 16 : 32;
  c.with_rec = c.variant == Variant::fgss && with_rec;
  return c;
}

SegmenterConfig SegmenterConfig::mini(Variant v, bool with_rec) {
  SegmenterConfig c;
  c.variant = v;
  c.base = 2;
  c.stages = 4;
  c.tile = 32;
  c.injected_channels = 12;
  c.e3_plan = {2, 4, 4, 12};
  c.with_rec = v == Variant::fgss && with_rec;
  return c;
}

template <typename T>
Segmenter<T>::Segmenter(SegmenterConfig cfg, bool allocate) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int s = cfg_.stages;
  int cin = cfg_.in_channels;
  for (int i = 0; i < s; ++i) {
    const int c = cfg_.stage_channels(i);
    enc_.push_back({nn::ConvBnRelu<T>(cin, c, 1, allocate), nn::ConvBnRelu<T>(c, c, 1, allocate), {}});
    cin = c;
  }
  const int b = cfg_.bottleneck_channels();
  bott_a_ = nn::ConvBnRelu<T>(cin, b, 1, allocate);
  bott_b_ = nn::ConvBnRelu<T>(cfg_.fused_channels(), b, 1, allocate);
  int cur = b;
  dec_.resize(static_cast<std::size_t>(s));
  for (int i = s - 1; i >= 0; --i) {
    const int c = cfg_.stage_channels(i);
    dec_[static_cast<std::size_t>(i)] = {nn::ConvTranspose2d<T>(cur, c, 3, 2, 1, 1, allocate),
                                         nn::ConvBnRelu<T>(2 * c, c, 1, allocate),
                                         nn::ConvBnRelu<T>(c, c, 1, allocate)};
    cur = c;
  }
  out_ = nn::Conv2d<T>(cur, 1, 1, 1, 0, allocate);
  if (cfg_.has_e3()) {
    int ce = cur;
    for (int i = 0; i + 1 < s; ++i) {
      e3_.emplace_back(ce, cfg_.e3_plan[static_cast<std::size_t>(i)], 2, allocate);
      ce = cfg_.e3_plan[static_cast<std::size_t>(i)];
    }
    e3_last_ = nn::Conv2d<T>(ce, cfg_.e3_plan.back(), 3, 2, 1, allocate);
  }
}

template <typename T>
void Segmenter<T>::init(Rng& rng) {
  for (auto& e : enc_) {
    e.a.init(rng);
    e.b.init(rng);
  }
  bott_a_.init(rng);
  bott_b_.init(rng);
  for (int i = cfg_.stages - 1; i >= 0; --i) {
    auto& d = dec_[static_cast<std::size_t>(i)];
    d.up.init(rng);
    d.a.init(rng);
    d.b.init(rng);
  }
  out_.init(rng);
  if (cfg_.has_e3()) {
    for (auto& l : e3_) l.init(rng);
    e3_last_.init(rng);
  }
}

template <typename T>
void Segmenter<T>::collect(nn::ParamList<T>& list) {
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    enc_[i].a.collect(list, "e1.s" + std::to_string(i) + ".a");
    enc_[i].b.collect(list, "e1.s" + std::to_string(i) + ".b");
  }
  bott_a_.collect(list, "bottleneck.a");
  bott_b_.collect(list, "bottleneck.b");
  for (std::size_t i = 0; i < dec_.size(); ++i) {
    dec_[i].up.collect(list, "d1.s" + std::to_string(i) + ".up");
    dec_[i].a.collect(list, "d1.s" + std::to_string(i) + ".a");
    dec_[i].b.collect(list, "d1.s" + std::to_string(i) + ".b");
  }
  out_.collect(list, "out");
  if (cfg_.has_e3()) {
    for (std::size_t i = 0; i < e3_.size(); ++i) e3_[i].collect(list, "e3.s" + std::to_string(i));
    e3_last_.collect(list, "e3.last");
  }
}

template <typename T>
typename Segmenter<T>::Counts Segmenter<T>::param_counts() const {
  Counts c;
  for (const auto& e : enc_) c.e1 += e.a.param_count() + e.b.param_count();
  c.bottleneck = bott_a_.param_count() + bott_b_.param_count();
  for (const auto& d : dec_) c.d1 += d.up.param_count() + d.a.param_count() + d.b.param_count();
  c.out = out_.param_count();
  if (cfg_.has_e3()) {
    for (const auto& l : e3_) c.e3 += l.param_count();
    c.e3 += e3_last_.param_count();
  }
  return c;
}

template <typename T>
double Segmenter<T>::macs() const {
  double m = 0.0;
  int side = cfg_.tile;
  for (const auto& e : enc_) {
    m += e.a.macs(side, side) + e.b.macs(side, side);
    side /= 2;
  }
  m += bott_a_.macs(side, side) + bott_b_.macs(side, side);
  for (int i = cfg_.stages - 1; i >= 0; --i) {
    const auto& d = dec_[static_cast<std::size_t>(i)];
    m += d.up.macs(side, side);
    side *= 2;
    m += d.a.macs(side, side) + d.b.macs(side, side);
  }
  m += out_.macs(side, side);
  if (cfg_.has_e3()) {
    for (const auto& l : e3_) {
      m += l.macs(side, side);
      side = l.out_size(side);
    }
    m += e3_last_.macs(side, side);
  }
  return m;
}

template <typename T>
void Segmenter<T>::check_inputs(const Tensor<T>& x, const Tensor<T>* injected) const {
  nn::require_shape(x, cfg_.in_channels, cfg_.tile, cfg_.tile, "segmenter input");
  if (cfg_.fused()) {
    if (!injected) throw nn::ShapeError("segmenter: fgss variant requires an injected latent");
    nn::require_shape(*injected, cfg_.injected_channels, cfg_.bottleneck_side(), cfg_.bottleneck_side(),
                      "injected latent");
    if (injected->n() != x.n() && injected->n() != 1) {
      throw nn::ShapeError("segmenter: injected batch must be 1 or match the input batch");
    }
  } else if (injected) {
    throw nn::ShapeError("segmenter: unet variant takes no injected latent");
  }
}

namespace {

template <typename T>
Tensor<T> broadcast(const Tensor<T>& t, int n) {
  if (t.n() == n) return t;
  Tensor<T> out(n, t.c(), t.h(), t.w());
  for (int i = 0; i < n; ++i) std::copy(t.data(), t.data() + t.sample_size(), out.sample(i));
  return out;
}

}  // namespace

template <typename T>
SegOutput<T> Segmenter<T>::infer(const Tensor<T>& x, const Tensor<T>* injected) const {
  check_inputs(x, injected);
  std::vector<Tensor<T>> skips;
  Tensor<T> h = x;
  for (const auto& e : enc_) {
    h = e.b.infer(e.a.infer(h));
    skips.push_back(h);
    h = e.pool.infer(h);
  }
  h = bott_a_.infer(h);
  if (cfg_.fused()) h = nn::concat_channels(h, broadcast(*injected, x.n()));
  h = bott_b_.infer(h);
  for (int i = cfg_.stages - 1; i >= 0; --i) {
    const auto& d = dec_[static_cast<std::size_t>(i)];
    h = d.b.infer(d.a.infer(nn::concat_channels(d.up.infer(h), skips[static_cast<std::size_t>(i)])));
  }
  SegOutput<T> out;
  out.logits = out_.infer(h);
  if (cfg_.has_e3()) {
    for (const auto& l : e3_) h = l.infer(h);
    out.e3 = e3_last_.infer(h);
    out.has_e3 = true;
  }
  return out;
}

template <typename T>
SegOutput<T> Segmenter<T>::forward(const Tensor<T>& x, const Tensor<T>* injected) {
  check_inputs(x, injected);
  std::vector<Tensor<T>> skips;
  Tensor<T> h = x;
  for (auto& e : enc_) {
    h = e.b.forward(e.a.forward(h));
    skips.push_back(h);
    h = e.pool.forward(h);
  }
  h = bott_a_.forward(h);
  if (cfg_.fused()) h = nn::concat_channels(h, broadcast(*injected, x.n()));
  h = bott_b_.forward(h);
  for (int i = cfg_.stages - 1; i >= 0; --i) {
    auto& d = dec_[static_cast<std::size_t>(i)];
    h = d.b.forward(d.a.forward(nn::concat_channels(d.up.forward(h), skips[static_cast<std::size_t>(i)])));
  }
  SegOutput<T> out;
  out.logits = out_.forward(h);
  if (cfg_.has_e3()) {
    for (auto& l : e3_) h = l.forward(h);
    out.e3 = e3_last_.forward(h);
    out.has_e3 = true;
  }
  return out;
}

template <typename T>
Tensor<T> Segmenter<T>::backward(const Tensor<T>& d_logits, const Tensor<T>* d_e3) {
  Tensor<T> d = out_.backward(d_logits);
  if (cfg_.has_e3() && d_e3) {
    Tensor<T> g = e3_last_.backward(*d_e3);
    for (auto it = e3_.rbegin(); it != e3_.rend(); ++it) g = it->backward(g);
    for (std::size_t i = 0; i < d.numel(); ++i) d.data()[i] += g.data()[i];
  }
  std::vector<Tensor<T>> d_skips(static_cast<std::size_t>(cfg_.stages));
  for (int i = 0; i < cfg_.stages; ++i) {
    auto& st = dec_[static_cast<std::size_t>(i)];
    Tensor<T> d_up;
    nn::split_channels(st.a.backward(st.b.backward(d)), cfg_.stage_channels(i), d_up,
                       d_skips[static_cast<std::size_t>(i)]);
    d = st.up.backward(d_up);
  }
  d = bott_b_.backward(d);
  Tensor<T> d_inj;
  if (cfg_.fused()) {
    Tensor<T> d_b;
    nn::split_channels(d, cfg_.bottleneck_channels(), d_b, d_inj);
    d = d_b;
  }
  d = bott_a_.backward(d);
  for (int i = cfg_.stages - 1; i >= 0; --i) {
    auto& e = enc_[static_cast<std::size_t>(i)];
    d = e.pool.backward(d);
    const Tensor<T>& s = d_skips[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < d.numel(); ++k) d.data()[k] += s.data()[k];
    if (i == 0) {
      // The image gradient is never needed; skip the first conv's input pass.
      e.a.backward(e.b.backward(d));
    } else {
      d = e.a.backward(e.b.backward(d));
    }
  }
  return d_inj;
}

template <typename T>
SegLoss<T> seg_loss(const Tensor<T>& logits, const Tensor<T>& target, const Tensor<T>* e3, const Tensor<T>* injected,
                    double w3, double w4) {
  if (!logits.same_shape(target)) throw nn::ShapeError("seg_loss: logits/target shape mismatch");
  if ((e3 == nullptr) != (injected == nullptr)) {
    throw std::invalid_argument("seg_loss: reconstruction and injected latent must be given together");
  }
  SegLoss<T> L;
  L.d_logits = Tensor<T>(logits.n(), logits.c(), logits.h(), logits.w());
  const double n = static_cast<double>(logits.numel());
  double bce = 0.0;
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double z = logits.data()[i];
    const double y = target.data()[i];
    bce += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    L.d_logits.data()[i] = static_cast<T>(w3 * (p - y) / n);
  }
  L.bce = bce / n;
  if (e3) {
    if (!e3->same_shape(*injected)) throw nn::ShapeError("seg_loss: reconstruction/injected shape mismatch");
    L.d_e3 = Tensor<T>(e3->n(), e3->c(), e3->h(), e3->w());
    const double m = static_cast<double>(e3->numel());
    double se = 0.0;
    for (std::size_t i = 0; i < e3->numel(); ++i) {
      const double e = static_cast<double>(e3->data()[i]) - injected->data()[i];
      se += e * e;
      L.d_e3.data()[i] = static_cast<T>(w4 * 2.0 * e / m);
    }
    L.mse = se / m;
  }
  L.total = w3 * L.bce + w4 * L.mse;
  return L;
}

template class Segmenter<float>;
template class Segmenter<double>;
template SegLoss<float> seg_loss<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>*,
                                        const Tensor<float>*, double, double);
template SegLoss<double> seg_loss<double>(const Tensor<double>&, const Tensor<double>&, const Tensor<double>*,
                                          const Tensor<double>*, double, double);

}  // namespace fgss::model
