#include "fgss/nn/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace fgss::nn {

Adam::Adam(ParamList<float> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_.params) {
    const auto& s = p.param->value.shape();
    m_.emplace_back(s[0], s[1], s[2], s[3]);
    v_.emplace_back(s[0], s[1], s[2], s[3]);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
  const float step = static_cast<float>(cfg_.lr / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float eps = static_cast<float>(cfg_.eps);
  for (std::size_t i = 0; i < params_.params.size(); ++i) {
    Param<float>& p = *params_.params[i].param;
    float* w = p.value.data();
    const float* g = p.grad.data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    const std::size_t n = p.value.numel();
    for (std::size_t j = 0; j < n; ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * g[j];
      v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
      w[j] -= step * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

std::vector<BufferRef<float>> Adam::state() {
  std::vector<BufferRef<float>> out;
  for (std::size_t i = 0; i < params_.params.size(); ++i) {
    out.push_back({params_.params[i].name + ".m", &m_[i]});
    out.push_back({params_.params[i].name + ".v", &v_[i]});
  }
  return out;
}

double apply_decay(double lr, int epoch, double factor, int every) {
  if (!(factor > 0.0 && factor <= 1.0)) throw std::invalid_argument("decay factor must be in (0, 1]");
  if (every <= 0) throw std::invalid_argument("decay interval must be positive");
  if (epoch < 0) throw std::invalid_argument("negative epoch");
  return lr * std::pow(factor, epoch / every);
}

}  // namespace fgss::nn
