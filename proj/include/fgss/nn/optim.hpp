#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fgss/nn/layers.hpp"

namespace fgss::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed parameter list. Moment estimates are exposed by name so
/// a checkpoint can restore them and resume bit-exactly.
class Adam {
 public:
  Adam(ParamList<float> params, AdamConfig cfg = {});

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }

  void step();
  void zero_grad() { params_.zero_grad(); }

  /// ("<param>.m" / "<param>.v", tensor) pairs.
  std::vector<BufferRef<float>> state();
  const ParamList<float>& params() const { return params_; }

 private:
  ParamList<float> params_;
  AdamConfig cfg_;
  std::vector<Tensor<float>> m_, v_;
  std::int64_t t_ = 0;
};

/// Step decay: lr · factor^floor(epoch / every). factor must lie in (0, 1].
double apply_decay(double lr, int epoch, double factor, int every = 10);

}  // namespace fgss::nn
