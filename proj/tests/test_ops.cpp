#include <gtest/gtest.h>

#include <cmath>

#include "camforge/ops.hpp"
#include "support/oracles.hpp"

namespace camforge {
namespace {

using testing::check_gradient;
using testing::from_vec;
using testing::inner;
using testing::random_conv;
using testing::random_tensor;
using testing::to_vec;

Tensor4<float> t22(std::vector<float> v) { return Tensor4<float>(Dims{1, 1, 2, 2}, std::move(v)); }

TEST(Conv2d, IdentityKernelCopiesInput) {
  const auto x = t22({1, 2, 3, 4});
  ConvParams<float> p{Tensor4<float>(Dims{1, 1, 1, 1}, 1.0f), {0.0f}, 1, 0};
  EXPECT_EQ(conv2d(x, p), x);
}

TEST(Conv2d, OnesKernelSumsWindow) {
  ConvParams<float> p{Tensor4<float>(Dims{1, 1, 2, 2}, 1.0f), {0.0f}, 1, 0};
  const auto y = conv2d(t22({1, 2, 3, 4}), p);
  ASSERT_EQ(y.dims(), (Dims{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 10.0f);
}

TEST(Conv2d, ZeroInputGivesBias) {
  CounterRng rng(1);
  auto p = random_conv<float>(3, 2, 3, 1, 1, rng);
  p.bias.assign(3, 0.5f);
  const auto y = conv2d(Tensor4<float>(Dims{2, 2, 5, 5}), p);
  for (auto v : y.data()) EXPECT_EQ(v, 0.5f);
}

TEST(Conv2d, MatchesDirectDefinition) {
  CounterRng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = static_cast<int>(rng.integer(1, 3)), stride = static_cast<int>(rng.integer(1, 2));
    const int pad = static_cast<int>(rng.integer(0, 1));
    int size = static_cast<int>(rng.integer(3, 7));
    while ((size + 2 * pad - k) % stride != 0) ++size;
    const auto p = random_conv<double>(static_cast<int>(rng.integer(1, 4)), 2, k, stride, pad, rng);
    const auto x = random_tensor<double>(Dims{2, 2, size, size}, rng);
    const auto y = conv2d(x, p);
    const auto ref = testing::naive_conv(x, p);
    ASSERT_EQ(y.dims(), ref.dims());
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, Errors) {
  ConvParams<float> p{Tensor4<float>(Dims{1, 2, 3, 3}), {0.0f}, 1, 0};
  EXPECT_THROW(conv2d(Tensor4<float>(Dims{1, 1, 4, 4}), p), DimensionError);
  ConvParams<float> q{Tensor4<float>(Dims{1, 1, 2, 2}), {0.0f}, 2, 0};
  EXPECT_THROW(conv2d(Tensor4<float>(Dims{1, 1, 5, 5}), q), GeometryError);
  ConvParams<float> big{Tensor4<float>(Dims{1, 1, 3, 3}), {0.0f}, 1, 0};
  EXPECT_THROW(conv2d(Tensor4<float>(Dims{1, 1, 2, 2}), big), GeometryError);
}

TEST(Conv2dBackward, IdentityAndZero) {
  const auto x = t22({1, 2, 3, 4});
  ConvParams<float> p{Tensor4<float>(Dims{1, 1, 1, 1}, 1.0f), {0.0f}, 1, 0};
  const auto g = conv2d_backward(x, p, Tensor4<float>(x.dims(), 1.0f));
  for (auto v : g.input_grad.data()) EXPECT_EQ(v, 1.0f);
  const auto z = conv2d_backward(x, p, Tensor4<float>(x.dims()));
  for (auto v : z.input_grad.data()) EXPECT_EQ(v, 0.0f);
  for (auto v : z.weight_grad->data()) EXPECT_EQ(v, 0.0f);
  for (auto v : *z.bias_grad) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(conv2d_backward(x, p, Tensor4<float>(Dims{1, 1, 3, 3})), DimensionError);
}

TEST(Conv2dBackward, FiniteDifferences) {
  CounterRng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = trial % 2 ? 3 : 1, stride = trial % 3 == 0 ? 2 : 1, pad = k / 2;
    const int size = stride == 2 ? 5 : 4;
    const int in = static_cast<int>(rng.integer(1, 3)), out = static_cast<int>(rng.integer(1, 3));
    auto p = random_conv<double>(out, in, k, stride, pad, rng, 2.0);
    const auto x = random_tensor<double>(Dims{1, in, size, size}, rng);
    const auto y = conv2d(x, p);
    const auto u = random_tensor<double>(y.dims(), rng);
    const auto g = conv2d_backward(x, p, u);

    auto fx = [&](const std::vector<double>& v) { return inner(u, conv2d(from_vec<double>(x.dims(), v), p)); };
    EXPECT_LE(check_gradient(to_vec(x), to_vec(g.input_grad), fx).max_rel, 1e-3);

    auto fw = [&](const std::vector<double>& v) {
      auto q = p;
      q.weights = from_vec<double>(p.weights.dims(), v);
      return inner(u, conv2d(x, q));
    };
    EXPECT_LE(check_gradient(to_vec(p.weights), to_vec(*g.weight_grad), fw).max_rel, 1e-3);

    auto fb = [&](const std::vector<double>& v) {
      auto q = p;
      q.bias = v;
      return inner(u, conv2d(x, q));
    };
    EXPECT_LE(check_gradient(p.bias, *g.bias_grad, fb).max_rel, 1e-3);
  }
}

TEST(Relu, ForwardBackward) {
  const Tensor4<float> x(Dims{1, 3, 1, 1}, std::vector<float>{-1, 0, 2});
  EXPECT_EQ(relu(x).values(), (std::vector<float>{0, 0, 2}));
  EXPECT_EQ(relu_backward(x, Tensor4<float>(x.dims(), 5.0f)).values(), (std::vector<float>{0, 0, 5}));
}

TEST(Relu, FiniteDifferences) {
  CounterRng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor<double>(Dims{1, 2, 3, 3}, rng);
    const auto u = random_tensor<double>(x.dims(), rng);
    auto f = [&](const std::vector<double>& v) { return inner(u, relu(from_vec<double>(x.dims(), v))); };
    auto skip = [&](std::size_t i) { return std::abs(x[i]) < 1e-3 + 1e-4; };
    EXPECT_LE(check_gradient(to_vec(x), to_vec(relu_backward(x, u)), f, 1e-3, skip).max_rel, 1e-3);
  }
}

TEST(MaxPool, ForwardAndTieRule) {
  EXPECT_EQ(maxpool2(t22({1, 2, 3, 4})).values(), (std::vector<float>{4}));
  const Tensor4<float> c(Dims{1, 1, 4, 4}, 7.0f);
  const auto g = maxpool2_backward(c, Tensor4<float>(Dims{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4}));
  const std::vector<float> want{1, 0, 2, 0, 0, 0, 0, 0, 3, 0, 4, 0, 0, 0, 0, 0};
  EXPECT_EQ(g.values(), want);
  EXPECT_THROW(maxpool2(Tensor4<float>(Dims{1, 1, 3, 4})), GeometryError);
}

TEST(MaxPool, FiniteDifferences) {
  CounterRng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor<double>(Dims{1, 2, 4, 4}, rng);
    const auto u = random_tensor<double>(Dims{1, 2, 2, 2}, rng);
    auto f = [&](const std::vector<double>& v) { return inner(u, maxpool2(from_vec<double>(x.dims(), v))); };
    // Skip coordinates in windows whose top two values are within 2 eps + 1e-4.
    auto skip = [&](std::size_t i) {
      const int c = static_cast<int>(i / 16), y = static_cast<int>(i % 16) / 4 / 2 * 2,
                xx = static_cast<int>(i % 4) / 2 * 2;
      std::vector<double> w{x(0, c, y, xx), x(0, c, y, xx + 1), x(0, c, y + 1, xx), x(0, c, y + 1, xx + 1)};
      std::sort(w.begin(), w.end());
      return w[3] - w[2] < 2e-3 + 1e-4;
    };
    EXPECT_LE(check_gradient(to_vec(x), to_vec(maxpool2_backward(x, u)), f, 1e-3, skip).max_rel, 1e-3);
  }
}

TEST(GlobalAvgPool, Examples) {
  EXPECT_EQ(global_avg_pool(t22({1, 2, 3, 4}))[0], 2.5f);
  EXPECT_EQ(global_avg_pool(Tensor4<float>(Dims{1, 1, 3, 3}, 0.75f))[0], 0.75f);
  const auto g = global_avg_pool_backward(Dims{1, 1, 2, 2}, Tensor4<float>(Dims{1, 1, 1, 1}, 2.0f));
  for (auto v : g.data()) EXPECT_EQ(v, 0.5f);
}

TEST(GlobalAvgPool, FiniteDifferences) {
  CounterRng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor<double>(Dims{2, 3, 3, 2}, rng);
    const auto u = random_tensor<double>(Dims{2, 3, 1, 1}, rng);
    auto f = [&](const std::vector<double>& v) { return inner(u, global_avg_pool(from_vec<double>(x.dims(), v))); };
    EXPECT_LE(check_gradient(to_vec(x), to_vec(global_avg_pool_backward(x.dims(), u)), f).max_rel, 1e-3);
  }
}

TEST(FullyConnected, Examples) {
  MatrixRM<float> w(2, 2);
  w << 1, 0, 0, 2;
  const std::vector<float> in{2.5f, 0.5f}, b{0.5f, -0.5f};
  EXPECT_EQ(fully_connected<float>(in, w, b), (std::vector<float>{3.0f, 0.5f}));
  const MatrixRM<float> id = MatrixRM<float>::Identity(3, 3);
  const std::vector<float> v{1.5f, -2.0f, 7.0f}, zero(3, 0.0f);
  EXPECT_EQ(fully_connected<float>(v, id, zero), v);
  EXPECT_THROW(fully_connected<float>(v, w, b), DimensionError);
}

TEST(FullyConnected, FiniteDifferences) {
  CounterRng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int c = static_cast<int>(rng.integer(1, 4)), k = static_cast<int>(rng.integer(1, 5));
    MatrixRM<double> w(c, k);
    for (int i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-2, 2);
    std::vector<double> x(static_cast<std::size_t>(k)), b(static_cast<std::size_t>(c)), u(static_cast<std::size_t>(c));
    for (auto& v : x) v = rng.uniform(-2, 2);
    for (auto& v : b) v = rng.uniform(-2, 2);
    for (auto& v : u) v = rng.uniform(-2, 2);
    const auto g = fully_connected_backward<double>(x, w, u);
    auto dot = [&](const std::vector<double>& y) {
      double s = 0;
      for (std::size_t i = 0; i < y.size(); ++i) s += u[i] * y[i];
      return s;
    };
    EXPECT_LE(check_gradient(x, g.input_grad, [&](const std::vector<double>& v) {
                return dot(fully_connected<double>(v, w, b));
              }).max_rel, 1e-3);
    std::vector<double> wv(w.data(), w.data() + w.size()), gw(g.weight_grad.data(), g.weight_grad.data() + w.size());
    EXPECT_LE(check_gradient(wv, gw, [&](const std::vector<double>& v) {
                return dot(fully_connected<double>(x, Eigen::Map<const MatrixRM<double>>(v.data(), c, k), b));
              }).max_rel, 1e-3);
    EXPECT_LE(check_gradient(b, g.bias_grad, [&](const std::vector<double>& v) {
                return dot(fully_connected<double>(x, w, v));
              }).max_rel, 1e-3);
  }
}

TEST(FullyConnected, UnitConvIsBitwiseEqual) {
  CounterRng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = static_cast<int>(rng.integer(1, 6)), k = static_cast<int>(rng.integer(1, 32));
    const auto p = random_conv<float>(c, k, 1, 1, 0, rng);
    const auto x = random_tensor<float>(Dims{1, k, 1, 1}, rng);
    const auto fc = fully_connected<float>(x.data(), Eigen::Map<const MatrixRM<float>>(p.weights.data().data(), c, k),
                                           p.bias);
    EXPECT_EQ(conv2d(x, p).values(), fc);
  }
}

TEST(Softmax, Examples) {
  const std::vector<float> eq{1.5f, 1.5f, 1.5f, 1.5f};
  for (auto v : softmax<float>(eq)) EXPECT_FLOAT_EQ(v, 0.25f);
  const std::vector<float> l{3.0f, 0.5f};
  const auto p = softmax<float>(l);
  EXPECT_NEAR(p[0], 0.9241, 1e-4);
  EXPECT_NEAR(p[1], 0.0759, 1e-4);
  EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(-2.5)), 1e-6);
  EXPECT_THROW(softmax<float>(std::vector<float>{}), DimensionError);
  const std::vector<double> big{1000.0, 1000.0};
  EXPECT_DOUBLE_EQ(softmax<double>(big)[0], 0.5);
}

TEST(Softmax, FiniteDifferences) {
  CounterRng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(static_cast<std::size_t>(rng.integer(1, 5))), u(x.size());
    for (auto& v : x) v = rng.uniform(-2, 2);
    for (auto& v : u) v = rng.uniform(-2, 2);
    auto f = [&](const std::vector<double>& v) {
      const auto p = softmax<double>(v);
      double s = 0;
      for (std::size_t i = 0; i < p.size(); ++i) s += u[i] * p[i];
      return s;
    };
    EXPECT_LE(check_gradient(x, softmax_backward<double>(softmax<double>(x), u), f).max_rel, 1e-3);
  }
}

TEST(CrossEntropy, Examples) {
  const std::vector<float> sure{0.0f, 1.0f};
  EXPECT_EQ(cross_entropy<float>(sure, 1), 0.0f);
  const std::vector<double> uni{0.5, 0.5};
  EXPECT_NEAR(cross_entropy<double>(uni, 0), std::log(2.0), 1e-12);
  EXPECT_NEAR(cross_entropy<double>(uni, 0), 0.6931, 1e-4);
  const std::vector<double> logits{0.7, 0.7};
  EXPECT_NEAR(softmax_cross_entropy<double>(logits, 1), std::log(2.0), 1e-12);
  EXPECT_THROW(cross_entropy<double>(uni, 2), DimensionError);
  EXPECT_THROW(softmax_cross_entropy<double>(logits, -1), DimensionError);
}

TEST(CrossEntropy, FiniteDifferences) {
  CounterRng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(static_cast<std::size_t>(rng.integer(2, 5)));
    for (auto& v : x) v = rng.uniform(-2, 2);
    const int label = static_cast<int>(rng.integer(0, static_cast<std::int64_t>(x.size()) - 1));
    auto f = [&](const std::vector<double>& v) { return cross_entropy<double>(softmax<double>(v), label); };
    EXPECT_LE(check_gradient(x, softmax_cross_entropy_backward<double>(x, label), f).max_rel, 1e-3);
    EXPECT_NEAR(softmax_cross_entropy<double>(x, label), f(x), 1e-12);
  }
}

TEST(Bilinear, IdentityAndConstant) {
  CounterRng rng(11);
  const auto x = random_tensor<float>(Dims{1, 2, 5, 3}, rng);
  const auto same = bilinear_resize(x, 5, 3);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(same[i], x[i], 1e-6);
  const auto c = bilinear_resize(Tensor4<float>(Dims{1, 1, 3, 3}, 0.3f), 7, 11);
  EXPECT_EQ(c.dims(), (Dims{1, 1, 7, 11}));
  for (auto v : c.data()) EXPECT_NEAR(v, 0.3f, 1e-6);
  EXPECT_THROW(bilinear_resize(x, 0, 2), GeometryError);
}

TEST(Bilinear, MatchesScalarOracle) {
  CounterRng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const int ih = trial == 0 ? 2 : static_cast<int>(rng.integer(1, 6)), iw = trial == 0 ? 2 : static_cast<int>(rng.integer(1, 6));
    const int oh = trial == 0 ? 4 : static_cast<int>(rng.integer(1, 12)), ow = trial == 0 ? 4 : static_cast<int>(rng.integer(1, 12));
    Grid<float> g(ih, iw);
    for (int i = 0; i < g.size(); ++i) g.data()[i] = static_cast<float>(rng.uniform(-2, 2));
    const auto got = bilinear_resize<float>(g, oh, ow);
    const auto want = testing::bilinear_oracle(g, oh, ow);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) EXPECT_NEAR(got(y, x), want(y, x), 1e-5);
    EXPECT_GE(got.minCoeff(), g.minCoeff() - 1e-6f);
    EXPECT_LE(got.maxCoeff(), g.maxCoeff() + 1e-6f);
  }
}

TEST(MinMax, Examples) {
  Grid<float> g(1, 2);
  g << 0, 10;
  const auto n = minmax_normalize<float>(g);
  EXPECT_EQ(n(0, 0), 0.0f);
  EXPECT_EQ(n(0, 1), 1.0f);
  const auto z = minmax_normalize<float>(Grid<float>::Constant(3, 3, 4.0f));
  EXPECT_EQ(z.abs().maxCoeff(), 0.0f);
}

TEST(Tensor, ShapeErrors) {
  EXPECT_THROW(Tensor4<float>(Dims{0, 1, 1, 1}), DimensionError);
  EXPECT_THROW(Tensor4<float>(Dims{1, 1, 2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
}

}  // namespace
}  // namespace camforge
