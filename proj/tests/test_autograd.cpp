#include <gtest/gtest.h>

#include "egic/autograd.hpp"
#include "oracles.hpp"

using egic::Shape;
using egic::Tensor;
namespace ag = egic::ag;
using V = ag::Var<double>;

namespace {

// Contracts every output element with a fixed random tensor so every gradient entry matters.
V project(const V& out, std::uint64_t seed) {
  egic::Rng rng(seed);
  return ag::sum(ag::mul(out, ag::constant(oracle::random_tensor(out->shape(), rng))));
}

void expect_grad(const oracle::ScalarFn& f, const std::vector<Tensor<double>>& at) {
  const auto r = oracle::grad_check(f, at);
  EXPECT_LT(r.rel_error, 1e-6) << "max abs error " << r.max_abs;
}

}  // namespace

TEST(Autograd, ElementwiseOps) {
  egic::Rng rng(1);
  const Shape s{2, 3, 3, 2};
  auto a = oracle::random_tensor(s, rng), b = oracle::random_tensor(s, rng);
  expect_grad([](const auto& v) { return project(ag::add(v[0], v[1]), 1); }, {a, b});
  expect_grad([](const auto& v) { return project(ag::sub(v[0], v[1]), 2); }, {a, b});
  expect_grad([](const auto& v) { return project(ag::mul(v[0], v[1]), 3); }, {a, b});
  expect_grad([](const auto& v) { return project(ag::scale(v[0], 2.5), 4); }, {a});
  expect_grad([](const auto& v) { return project(ag::leaky_relu(v[0]), 5); }, {a});
  expect_grad([](const auto& v) { return project(ag::softplus(v[0]), 6); }, {a});
  expect_grad([](const auto& v) { return ag::mse(v[0], v[1]); }, {a, b});
  expect_grad([](const auto& v) { return ag::mean(v[0]); }, {a});
}

TEST(Autograd, MixFollowsMask) {
  egic::Rng rng(2);
  const Shape s{2, 3, 4, 4};
  auto a = oracle::random_tensor(s, rng), b = oracle::random_tensor(s, rng);
  Tensor<double> mask(Shape{2, 1, 4, 4});
  for (auto& m : mask.vec()) m = rng.coin() ? 1.0 : 0.0;
  auto out = ag::mix(ag::constant(a), ag::constant(b), mask);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
          EXPECT_EQ(out->value(n, c, y, x), mask(n, 0, y, x) == 1.0 ? a(n, c, y, x) : b(n, c, y, x));
  expect_grad([&mask](const auto& v) { return project(ag::mix(v[0], v[1], mask), 7); }, {a, b});
}

TEST(Autograd, ChannelAndSpatialOps) {
  egic::Rng rng(3);
  auto a = oracle::random_tensor({1, 3, 4, 4}, rng), b = oracle::random_tensor({1, 2, 4, 4}, rng);
  auto f = oracle::random_tensor({1, 1, 4, 4}, rng);
  expect_grad([](const auto& v) { return project(ag::concat_channels(v[0], v[1]), 8); }, {a, b});
  expect_grad([](const auto& v) { return project(ag::slice_channels(v[0], 1, 2), 9); }, {a});
  expect_grad([](const auto& v) { return project(ag::avg_pool2(v[0]), 10); }, {a});
  expect_grad([](const auto& v) { return project(ag::upsample2(v[0]), 11); }, {a});
  expect_grad([](const auto& v) { return project(ag::resize_nearest(v[0], 3, 5), 12); }, {a});
  expect_grad([](const auto& v) { return project(ag::channel_dot(v[0], v[1]), 13); }, {a, a});
  expect_grad([](const auto& v) { return project(ag::add_to_channels(v[0], v[1]), 14); }, {a, f});
}

TEST(Autograd, ConvolutionMatchesLoop) {
  egic::Rng rng(4);
  auto x = oracle::random_tensor({2, 2, 5, 5}, rng), w = oracle::random_tensor({3, 2, 3, 3}, rng);
  auto bias = oracle::random_tensor({1, 3, 1, 1}, rng);
  for (int stride : {1, 2}) {
    auto out = ag::conv2d(ag::constant(x), ag::constant(w), ag::constant(bias), stride, 1);
    const int ho = (5 + 2 - 3) / stride + 1;
    ASSERT_EQ(out->shape(), (Shape{2, 3, ho, ho}));
    for (int n = 0; n < 2; ++n)
      for (int o = 0; o < 3; ++o)
        for (int y = 0; y < ho; ++y)
          for (int xx = 0; xx < ho; ++xx) {
            double acc = bias[o];
            for (int c = 0; c < 2; ++c)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const int iy = y * stride + ky - 1, ix = xx * stride + kx - 1;
                  if (iy >= 0 && iy < 5 && ix >= 0 && ix < 5) acc += w(o, c, ky, kx) * x(n, c, iy, ix);
                }
            EXPECT_NEAR(out->value(n, o, y, xx), acc, 1e-12);
          }
    expect_grad([stride](const auto& v) { return project(ag::conv2d(v[0], v[1], v[2], stride, 1), 15); },
                {x, w, bias});
  }
}

TEST(Autograd, WeightNormHasUnitDirection) {
  egic::Rng rng(5);
  auto v = oracle::random_tensor({3, 2, 3, 3}, rng), g = oracle::random_tensor({3, 1, 1, 1}, rng, 0.5, 2.0);
  auto w = ag::weight_norm(ag::constant(v), ag::constant(g));
  for (int o = 0; o < 3; ++o) {
    double n2 = 0.0;
    for (int i = 0; i < 18; ++i) n2 += w->value[o * 18 + i] * w->value[o * 18 + i];
    EXPECT_NEAR(std::sqrt(n2), g[o], 1e-9);
  }
  expect_grad([](const auto& p) { return project(ag::weight_norm(p[0], p[1]), 16); }, {v, g});
}

TEST(Autograd, RoundSteRoundsForwardAndPassesGradient) {
  auto x = ag::parameter(Tensor<double>(Shape{1, 1, 1, 4}, {0.4, 0.5, 1.5, -2.6}));
  auto y = ag::round_ste(x);
  EXPECT_EQ(y->value.vec(), (egic::Buffer<double>{0.0, 0.0, 2.0, -3.0}));
  ag::backward(ag::sum(y));
  EXPECT_EQ(x->grad.vec(), (egic::Buffer<double>{1.0, 1.0, 1.0, 1.0}));
}

TEST(Autograd, NoGradRecordsNothing) {
  auto x = ag::parameter(Tensor<double>(Shape{1, 1, 1, 2}, 1.0));
  ag::NoGrad ng;
  auto y = ag::scale(x, 2.0);
  EXPECT_FALSE(y->requires_grad);
  EXPECT_TRUE(y->parents.empty());
}

TEST(Autograd, SharedSubgraphAccumulates) {
  auto x = ag::parameter(Tensor<double>::scalar(3.0));
  auto y = ag::mul(x, x);
  ag::backward(ag::add(y, y));
  EXPECT_DOUBLE_EQ(x->grad[0], 12.0);
}
