#include <doctest.h>

#include <cmath>

#include "fgss/nn/layers.hpp"
#include "fgss/nn/optim.hpp"
#include "gradcheck.hpp"

using namespace fgss;
using nn::Tensor;

namespace {

Tensor<double> random_tensor(int n, int c, int h, int w, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(n, c, h, w);
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.vec()[i] * b.vec()[i];
  return s;
}

template <typename L>
concept HasParams = requires(L l, nn::ParamList<double>& p) { l.collect(p, std::string()); };

// loss = <layer(x), R>; checks d/dx and d/dparams at up to 60 slots each.
template <typename L>
double layer_error(L& layer, Tensor<double> x, Rng& rng) {
  const Tensor<double> probe = layer.forward(x);
  const Tensor<double> R = random_tensor(probe.n(), probe.c(), probe.h(), probe.w(), rng);
  nn::ParamList<double> list;
  if constexpr (HasParams<L>) {
    layer.collect(list, "l");
    gradcheck::jitter(list, rng);
    list.zero_grad();
  }
  layer.forward(x);
  const Tensor<double> dx = layer.backward(R);

  std::vector<gradcheck::Slot> slots;
  for (auto i : gradcheck::sample_indices(x.numel(), 60, rng)) slots.push_back({&x.vec()[i], dx.vec()[i]});
  for (auto& p : list.params) {
    for (auto i : gradcheck::sample_indices(p.param->value.numel(), 60, rng)) {
      slots.push_back({&p.param->value.vec()[i], p.param->grad.vec()[i]});
    }
  }
  // Larger step: conv biases feeding batch norm have an exactly-zero
  // gradient, so only round-off shows there.
  const auto r = gradcheck::check(slots, [&] { return dot(layer.forward(x), R); }, 1e-5);
  return r.max_rel;
}

}  // namespace

TEST_CASE("layer gradients match central differences (double)") {
  Rng rng(11);
  SUBCASE("conv 3x3 stride 1") {
    nn::Conv2d<double> c(3, 4, 3, 1, 1);
    c.init(rng);
    CHECK(layer_error(c, random_tensor(2, 3, 7, 6, rng), rng) < 1e-4);
  }
  SUBCASE("conv 3x3 stride 2") {
    nn::Conv2d<double> c(2, 3, 3, 2, 1);
    c.init(rng);
    CHECK(layer_error(c, random_tensor(2, 2, 8, 8, rng), rng) < 1e-4);
  }
  SUBCASE("conv 1x1") {
    nn::Conv2d<double> c(5, 2, 1, 1, 0);
    c.init(rng);
    CHECK(layer_error(c, random_tensor(3, 5, 4, 4, rng), rng) < 1e-4);
  }
  SUBCASE("transposed conv doubles the size") {
    nn::ConvTranspose2d<double> c(3, 2, 3, 2, 1, 1);
    c.init(rng);
    const auto x = random_tensor(2, 3, 4, 5, rng);
    const auto y = c.forward(x);
    CHECK(y.h() == 8);
    CHECK(y.w() == 10);
    CHECK(layer_error(c, x, rng) < 1e-4);
  }
  SUBCASE("batch norm") {
    nn::BatchNorm2d<double> bn(3);
    bn.init(rng);
    CHECK(layer_error(bn, random_tensor(4, 3, 3, 3, rng), rng) < 1e-4);
  }
  SUBCASE("conv-bn-relu") {
    nn::ConvBnRelu<double> b(2, 3, 1);
    b.init(rng);
    CHECK(layer_error(b, random_tensor(3, 2, 5, 5, rng), rng) < 1e-4);
  }
  SUBCASE("max pool") {
    nn::MaxPool2x2<double> p;
    CHECK(layer_error(p, random_tensor(2, 3, 6, 6, rng), rng) < 1e-4);
  }
  SUBCASE("linear") {
    nn::Linear<double> l(6, 4);
    l.init(rng);
    CHECK(layer_error(l, random_tensor(3, 6, 1, 1, rng), rng) < 1e-4);
  }
}

TEST_CASE("conv forward equals a direct convolution") {
  Rng rng(2);
  nn::Conv2d<double> c(2, 3, 3, 2, 1);
  c.init(rng);
  const auto x = random_tensor(1, 2, 7, 7, rng);
  const auto y = c.forward(x);
  nn::ParamList<double> list;
  c.collect(list, "c");
  const auto& W = list.params[0].param->value;  // [out, in, 3, 3]
  const auto& B = list.params[1].param->value;
  REQUIRE(y.h() == 4);
  for (int o = 0; o < 3; ++o) {
    for (int oy = 0; oy < 4; ++oy) {
      for (int ox = 0; ox < 4; ++ox) {
        double s = B.vec()[static_cast<std::size_t>(o)];
        for (int i = 0; i < 2; ++i) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || ix < 0 || iy >= 7 || ix >= 7) continue;
              s += W.vec()[((static_cast<std::size_t>(o) * 2 + i) * 3 + ky) * 3 + kx] * x.at(0, i, iy, ix);
            }
          }
        }
        CHECK(y.at(0, o, oy, ox) == doctest::Approx(s).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("batch norm eval uses running statistics") {
  Rng rng(3);
  nn::BatchNorm2d<float> bn(2);
  bn.init(rng);
  Tensor<float> x(8, 2, 4, 4);
  for (auto& v : x.vec()) v = static_cast<float>(rng.uniform(3, 5));
  for (int i = 0; i < 200; ++i) bn.forward(x);
  const auto y = bn.infer(x);
  double mean = 0;
  for (float v : y.vec()) mean += v;
  CHECK(std::abs(mean / static_cast<double>(y.numel())) < 0.05);
}

TEST_CASE("dropout is inverted and seeded") {
  nn::Dropout<float> d(0.5);
  Tensor<float> x(1, 1000, 1, 1, 1.0f);
  Rng a(1), b(1);
  const auto ya = d.forward(x, a);
  const auto yb = d.forward(x, b);
  CHECK(ya.vec() == yb.vec());
  double s = 0;
  for (float v : ya.vec()) {
    CHECK((v == 0.0f || v == 2.0f));
    s += v;
  }
  CHECK(s / 1000 == doctest::Approx(1.0).epsilon(0.15));
}

TEST_CASE("adam step and learning-rate decay") {
  CHECK(nn::apply_decay(0.001, 0, 0.9) == 0.001);
  CHECK(nn::apply_decay(0.001, 10, 0.9) == doctest::Approx(0.0009));
  CHECK(nn::apply_decay(0.001, 59, 0.9) == doctest::Approx(0.001 * std::pow(0.9, 5)));
  CHECK(nn::apply_decay(0.001, 59, 1.0) == 0.001);
  CHECK_THROWS(nn::apply_decay(0.001, 1, 0.0));
  CHECK_THROWS(nn::apply_decay(0.001, 1, 1.5));

  // First Adam step moves every weight by lr·sign(grad).
  nn::Param<float> p{Tensor<float>(1, 1, 1, 3), Tensor<float>(1, 1, 1, 3)};
  p.grad.vec() = {0.5f, -2.0f, 1e-3f};
  nn::ParamList<float> list;
  list.add("p", p);
  nn::Adam adam(list, {.lr = 0.01});
  adam.step();
  CHECK(p.value.vec()[0] == doctest::Approx(-0.01).epsilon(1e-4));
  CHECK(p.value.vec()[1] == doctest::Approx(0.01).epsilon(1e-4));
  CHECK(p.value.vec()[2] == doctest::Approx(-0.01).epsilon(1e-3));
  CHECK(adam.steps() == 1);
  CHECK(adam.state().size() == 2);
}
