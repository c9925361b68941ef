#include "doctest.h"

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "aesb/nn.hpp"
#include "support.hpp"

using namespace aesb;
using aesb::testing::central_differences;
using aesb::testing::dot;
using aesb::testing::fill_random;
using aesb::testing::flat;
using aesb::testing::random_tensor;
using aesb::testing::relative_error;

namespace {

template <typename Scalar>
ConvParams<Scalar> random_conv(Index k, Index in, Index out, std::uint64_t seed) {
  ConvParams<Scalar> p(k, in, out);
  fill_random(p.weights, seed);
  fill_random(p.bias, seed + 1);
  return p;
}

template <typename Scalar>
BatchNormParams<Scalar> random_bn(Index channels, std::uint64_t seed) {
  BatchNormParams<Scalar> p(channels);
  fill_random(p.scale, seed, 0.5, 1.5);
  fill_random(p.shift, seed + 1);
  fill_random(p.running_mean, seed + 2);
  fill_random(p.running_var, seed + 3, 0.5, 2.0);
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("tensor: extents, value count and finiteness") {
  Tensor<float> t({2, 3, 4, 5});
  CHECK(t.size() == 120);
  CHECK(t.sample_size() == 60);
  CHECK(t.plane_size() == 20);
  CHECK(t.values().isZero());
  CHECK_THROWS_AS(Tensor<float>({1, -1, 2, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>({1, 1, 2, 2}, VectorX<float>::Zero(3)), ShapeError);

  t(1, 2, 3, 4) = 7.0f;
  CHECK(t.data()[119] == 7.0f);
  CHECK(t.plane(1, 2)(3, 4) == 7.0f);
  CHECK(t.sample(1)(2, 19) == 7.0f);

  CHECK_FALSE(t.has_grad());
  CHECK(t.grad().size() == t.size());
  CHECK(t.has_grad());
  t.clear_grad();
  CHECK_FALSE(t.has_grad());

  t(0, 0, 0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(t.require_finite("t"), NumericError);
}

// ---------------------------------------------------------------------------
// Convolution

TEST_CASE("conv2d: output extents of the network stages") {
  auto c1 = random_conv<float>(1, 3, 128, 1);
  CHECK(conv2d_forward(Tensor<float>({1, 3, 227, 227}), c1).shape() == Shape{1, 128, 227, 227});
  auto c3 = random_conv<float>(3, 96, 96, 2);
  CHECK(conv2d_forward(Tensor<float>({1, 96, 7, 7}), c3).shape() == Shape{1, 96, 7, 7});
}

TEST_CASE("conv2d: identity 1x1 kernel reproduces the input") {
  ConvParams<double> p(1, 4, 4);
  p.weights.setIdentity();
  auto x = random_tensor<double>({2, 4, 5, 3}, 3);
  CHECK(conv2d_forward(x, p).values() == x.values());
}

TEST_CASE("conv2d: a 3x3 kernel with only the centre tap equals a 1x1 convolution") {
  auto one = random_conv<double>(1, 3, 2, 4);
  ConvParams<double> three(3, 3, 2);
  three.bias = one.bias;
  for (Index o = 0; o < 2; ++o) {
    for (Index i = 0; i < 3; ++i) three.weights(o, i * 9 + 4) = one.weights(o, i);
  }
  auto x = random_tensor<double>({1, 3, 6, 6}, 5);
  CHECK((conv2d_forward(x, one).values() - conv2d_forward(x, three).values()).norm() < 1e-12);
}

TEST_CASE("conv2d: 3x3 zero padding against a direct loop oracle") {
  auto p = random_conv<double>(3, 2, 3, 6);
  auto x = random_tensor<double>({2, 2, 5, 4}, 7);
  auto y = conv2d_forward(x, p);
  double worst = 0;
  for (Index n = 0; n < 2; ++n)
    for (Index o = 0; o < 3; ++o)
      for (Index h = 0; h < 5; ++h)
        for (Index w = 0; w < 4; ++w) {
          double acc = p.bias[o];
          for (Index i = 0; i < 2; ++i)
            for (Index kh = 0; kh < 3; ++kh)
              for (Index kw = 0; kw < 3; ++kw) {
                const Index ih = h + kh - 1, iw = w + kw - 1;
                if (ih < 0 || ih >= 5 || iw < 0 || iw >= 4) continue;
                acc += p.weights(o, (i * 3 + kh) * 3 + kw) * x(n, i, ih, iw);
              }
          worst = std::max(worst, std::abs(acc - y(n, o, h, w)));
        }
  CHECK(worst < 1e-12);
}

TEST_CASE("conv2d: errors") {
  auto p = random_conv<float>(1, 3, 4, 8);
  CHECK_THROWS_AS(conv2d_forward(Tensor<float>({1, 2, 4, 4}), p), ShapeError);
  Tensor<float> bad({1, 3, 4, 4});
  bad(0, 1, 2, 3) = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(conv2d_forward(bad, p), NumericError);
  CHECK_THROWS_AS(ConvParams<float>(2, 3, 4), ShapeError);
  auto p3 = random_conv<float>(3, 3, 4, 9);
  CHECK_THROWS_AS(conv2d_forward(Tensor<float>({1, 3, 2, 5}), p3), ShapeError);
  CHECK_THROWS_AS(conv2d_backward(Tensor<float>({1, 3, 4, 4}), p, Tensor<float>({1, 3, 4, 4})),
                  ShapeError);
}

TEST_CASE("conv2d_backward: zero upstream gives zero gradients") {
  auto p = random_conv<float>(3, 2, 3, 10);
  auto x = random_tensor<float>({1, 2, 5, 5}, 11);
  auto g = conv2d_backward(x, p, Tensor<float>({1, 3, 5, 5}));
  CHECK(g.input.values().isZero());
  CHECK(g.weights.isZero());
  CHECK(g.bias.isZero());
}

TEST_CASE("conv2d_backward: bias gradient is the per-channel upstream sum") {
  auto p = random_conv<double>(3, 2, 3, 12);
  auto x = random_tensor<double>({2, 2, 4, 4}, 13);
  auto up = random_tensor<double>({2, 3, 4, 4}, 14);
  auto g = conv2d_backward(x, p, up);
  for (Index o = 0; o < 3; ++o) {
    double s = 0;
    for (Index n = 0; n < 2; ++n) s += up.plane(n, o).sum();
    CHECK(g.bias[o] == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("conv2d_backward: float32 central differences on 1x2x5x5, conv3x3") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto p = random_conv<float>(3, 2, 3, 100 + seed);
    auto x = random_tensor<float>({1, 2, 5, 5}, 200 + seed);
    auto up = random_tensor<float>({1, 3, 5, 5}, 300 + seed);
    auto loss = [&] { return dot(conv2d_forward(x, p), up.values()); };
    auto g = conv2d_backward(x, p, up);
    auto nw = central_differences(p.weights.data(), p.weights.size(), 1e-3, loss);
    auto nx = central_differences(x.data(), x.size(), 1e-3, loss);
    auto nb = central_differences(p.bias.data(), p.bias.size(), 1e-3, loss);
    CHECK(relative_error(flat(g.weights), nw) < 1e-3);
    CHECK(relative_error(g.input.values(), nx) < 1e-3);
    CHECK(relative_error(g.bias, nb) < 1e-3);
  }
}

TEST_CASE("conv2d_backward: float64 central differences, both kernels") {
  for (Index k : {1, 3}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      auto p = random_conv<double>(k, 3, 2, 400 + seed);
      auto x = random_tensor<double>({2, 3, 4, 5}, 500 + seed);
      auto up = random_tensor<double>({2, 2, 4, 5}, 600 + seed);
      auto loss = [&] { return dot(conv2d_forward(x, p), up.values()); };
      auto g = conv2d_backward(x, p, up);
      CHECK(relative_error(flat(g.weights),
                           central_differences(p.weights.data(), p.weights.size(), 1e-5, loss)) <
            1e-6);
      CHECK(relative_error(g.input.values(), central_differences(x.data(), x.size(), 1e-5, loss)) <
            1e-6);
    }
  }
}

// ---------------------------------------------------------------------------
// Batch normalization

TEST_CASE("batchnorm: train mode standardizes every channel") {
  BatchNormParams<double> p(3);
  auto x = random_tensor<double>({4, 3, 5, 5}, 20, -3.0, 7.0);
  auto r = batchnorm_forward(x, p, Mode::train);
  for (Index c = 0; c < 3; ++c) {
    double s = 0, sq = 0;
    for (Index n = 0; n < 4; ++n) s += r.output.plane(n, c).sum();
    const double mean = s / 100.0;
    for (Index n = 0; n < 4; ++n) sq += (r.output.plane(n, c).array() - mean).square().sum();
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(sq / 100.0 - 1.0) < 1e-4);
  }
}

TEST_CASE("batchnorm: constant channel maps to zero") {
  BatchNormParams<float> p(2);
  auto x = Tensor<float>::constant({3, 2, 4, 4}, 5.5f);
  auto r = batchnorm_forward(x, p, Mode::train);
  CHECK(r.output.values().cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("batchnorm: infer mode closed form") {
  BatchNormParams<double> p(2);
  p.scale.setConstant(2.0);
  p.shift.setConstant(1.0);
  p.epsilon = 1e-12;
  auto x = random_tensor<double>({2, 2, 3, 3}, 21);
  auto r = batchnorm_forward(x, p, Mode::infer);
  CHECK((r.output.values() - (2.0 * x.values().array() + 1.0).matrix()).cwiseAbs().maxCoeff() <
        1e-9);
  CHECK(r.running_mean == p.running_mean);
  CHECK(r.running_var == p.running_var);
}

TEST_CASE("batchnorm: running statistics follow the momentum update") {
  auto p = random_bn<double>(2, 22);
  auto x = random_tensor<double>({2, 2, 3, 3}, 23);
  auto r = batchnorm_forward(x, p, Mode::train);
  for (Index c = 0; c < 2; ++c) {
    std::vector<double> v;
    for (Index n = 0; n < 2; ++n)
      for (Index i = 0; i < 9; ++i) v.push_back(x.plane(n, c).data()[i]);
    double mean = 0;
    for (double e : v) mean += e;
    mean /= double(v.size());
    double ss = 0;
    for (double e : v) ss += (e - mean) * (e - mean);
    CHECK(r.running_mean[c] == doctest::Approx(0.9 * p.running_mean[c] + 0.1 * mean));
    CHECK(r.running_var[c] ==
          doctest::Approx(0.9 * p.running_var[c] + 0.1 * ss / double(v.size() - 1)));
  }
  // Parameters are not touched.
  CHECK(p.running_mean == random_bn<double>(2, 22).running_mean);
}

TEST_CASE("batchnorm: degenerate statistics and parameter checks") {
  BatchNormParams<float> p(2);
  CHECK_THROWS_AS(batchnorm_forward(Tensor<float>({1, 2, 1, 1}), p, Mode::train), NumericError);
  CHECK_NOTHROW(batchnorm_forward(Tensor<float>({1, 2, 1, 1}), p, Mode::infer));
  CHECK_THROWS_AS(batchnorm_forward(Tensor<float>({1, 3, 2, 2}), p, Mode::train), ShapeError);
  auto bad = p;
  bad.epsilon = 0;
  CHECK_THROWS_AS(batchnorm_forward(Tensor<float>({1, 2, 2, 2}), bad, Mode::train), ConfigError);
  bad = p;
  bad.running_var[0] = -1;
  CHECK_THROWS_AS(batchnorm_forward(Tensor<float>({1, 2, 2, 2}), bad, Mode::infer), NumericError);
}

TEST_CASE("batchnorm_backward: central differences in both modes") {
  for (Mode mode : {Mode::train, Mode::infer}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      auto p = random_bn<double>(3, 700 + seed);
      auto x = random_tensor<double>({2, 3, 3, 4}, 800 + seed, -2.0, 2.0);
      auto up = random_tensor<double>({2, 3, 3, 4}, 900 + seed);
      auto loss = [&] { return dot(batchnorm_forward(x, p, mode).output, up.values()); };
      auto g = batchnorm_backward(batchnorm_forward(x, p, mode), p, up);
      CHECK(relative_error(g.input.values(), central_differences(x.data(), x.size(), 1e-5, loss)) <
            1e-6);
      CHECK(relative_error(g.scale, central_differences(p.scale.data(), 3, 1e-5, loss)) < 1e-6);
      CHECK(relative_error(g.shift, central_differences(p.shift.data(), 3, 1e-5, loss)) < 1e-6);
    }
  }
}

TEST_CASE("batchnorm_backward: float32 central differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto p = random_bn<float>(2, 1000 + seed);
    auto x = random_tensor<float>({2, 2, 3, 3}, 1100 + seed, -2.0, 2.0);
    auto up = random_tensor<float>({2, 2, 3, 3}, 1200 + seed);
    auto loss = [&] { return dot(batchnorm_forward(x, p, Mode::train).output, up.values()); };
    auto g = batchnorm_backward(batchnorm_forward(x, p, Mode::train), p, up);
    CHECK(relative_error(g.input.values(), central_differences(x.data(), x.size(), 1e-3, loss)) <
          1e-3);
    CHECK(relative_error(g.scale, central_differences(p.scale.data(), 2, 1e-3, loss)) < 1e-3);
  }
}

// ---------------------------------------------------------------------------
// Gate and gated block

TEST_CASE("gate: zero, saturation and scalar oracle") {
  CHECK(gate_forward(Tensor<float>({1, 2, 2, 2})).values().isZero());
  const float c = 40.0f;
  auto big = gate_forward(Tensor<float>::constant({1, 1, 2, 2}, c));
  CHECK(big.values().cwiseAbs().maxCoeff() == doctest::Approx(c).epsilon(1e-6));

  auto b = random_tensor<float>({2, 3, 4, 4}, 30, -8.0, 8.0);
  auto out = gate_forward(b);
  double worst = 0;
  for (Index i = 0; i < b.size(); ++i) {
    const double v = b.data()[i];
    worst = std::max(worst, std::abs(v * (1.0 / (1.0 + std::exp(-v))) - out.data()[i]));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("gate_backward: central differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto b = random_tensor<double>({1, 2, 3, 3}, 31 + seed, -4.0, 4.0);
    auto up = random_tensor<double>({1, 2, 3, 3}, 41 + seed);
    auto loss = [&] { return dot(gate_forward(b), up.values()); };
    CHECK(relative_error(gate_backward(b, up).values(),
                         central_differences(b.data(), b.size(), 1e-5, loss)) < 1e-6);
  }
}

TEST_CASE("gated block: output is the self-gated batchnorm output") {
  auto conv = random_conv<float>(3, 2, 4, 50);
  auto bn = random_bn<float>(4, 51);
  auto x = random_tensor<float>({2, 2, 5, 5}, 52);
  auto r = gated_block_forward(x, conv, bn, Mode::train);
  auto direct = batchnorm_forward(conv2d_forward(x, conv), bn, Mode::train);
  CHECK(r.pre_gate.values() == direct.output.values());
  CHECK((r.out.values() - gate_forward(direct.output).values()).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("gated block backward: central differences for every input") {
  for (Mode mode : {Mode::train, Mode::infer}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      auto conv = random_conv<double>(3, 2, 3, 1300 + seed);
      auto bn = random_bn<double>(3, 1400 + seed);
      auto x = random_tensor<double>({2, 2, 4, 4}, 1500 + seed);
      auto up = random_tensor<double>({2, 3, 4, 4}, 1600 + seed);
      auto loss = [&] { return dot(gated_block_forward(x, conv, bn, mode).out, up.values()); };
      auto fwd = gated_block_forward(x, conv, bn, mode);
      auto g = gated_block_backward(x, conv, bn, fwd, up);
      CHECK(relative_error(g.input.values(), central_differences(x.data(), x.size(), 1e-5, loss)) <
            1e-6);
      CHECK(relative_error(flat(g.conv.weights),
                           central_differences(conv.weights.data(), conv.weights.size(), 1e-5,
                                               loss)) < 1e-6);
      CHECK(relative_error(g.bn_scale, central_differences(bn.scale.data(), 3, 1e-5, loss)) < 1e-6);
      CHECK(relative_error(g.bn_shift, central_differences(bn.shift.data(), 3, 1e-5, loss)) < 1e-6);
      if (mode == Mode::infer) {
        CHECK(relative_error(g.conv.bias, central_differences(conv.bias.data(), 3, 1e-5, loss)) <
              1e-6);
      } else {
        // The batch mean cancels the bias.
        CHECK(g.conv.bias.cwiseAbs().maxCoeff() < 1e-9);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Max pooling

TEST_CASE("maxpool: extents of the network stages") {
  CHECK(pooled_extent(227, 8, 8) == 28);
  CHECK(pooled_extent(192, 8, 8) == 24);
  CHECK(pooled_extent(28, 4, 4) == 7);
  CHECK(pooled_extent(24, 4, 4) == 6);
  CHECK(maxpool_forward(Tensor<float>({1, 2, 227, 227}), 8, 8).output.shape() ==
        Shape{1, 2, 28, 28});
  CHECK(maxpool_forward(Tensor<float>({1, 2, 28, 28}), 4, 4).output.shape() == Shape{1, 2, 7, 7});
}

TEST_CASE("maxpool: errors") {
  CHECK_THROWS_AS(maxpool_forward(Tensor<float>({1, 1, 4, 4}), 5, 5), ShapeError);
  CHECK_THROWS_AS(maxpool_forward(Tensor<float>({1, 1, 8, 8}), 4, 2), ShapeError);
  CHECK_THROWS_AS(maxpool_forward(Tensor<float>({1, 1, 8, 8}), 0, 0), ShapeError);
  auto r = maxpool_forward(Tensor<float>({1, 1, 4, 4}), 2, 2);
  CHECK_THROWS_AS(maxpool_backward(r, Tensor<float>({1, 1, 3, 2})), ShapeError);
}

TEST_CASE("maxpool: ties route the gradient to the first maximum") {
  Tensor<float> x({1, 1, 2, 2});
  x.values() << 1, 3, 3, 3;
  auto r = maxpool_forward(x, 2, 2);
  CHECK(r.output.data()[0] == 3.0f);
  auto g = maxpool_backward(r, Tensor<float>::constant({1, 1, 1, 1}, 2.0f));
  CHECK(g.values() == (VectorX<float>(4) << 0, 2, 0, 0).finished());
}

TEST_CASE("maxpool: matches a brute-force window oracle; trailing rows are ignored") {
  auto x = random_tensor<double>({2, 3, 11, 10}, 60);
  auto r = maxpool_forward(x, 3, 3);
  REQUIRE(r.output.shape() == Shape{2, 3, 3, 3});
  for (Index n = 0; n < 2; ++n)
    for (Index c = 0; c < 3; ++c)
      for (Index y = 0; y < 3; ++y)
        for (Index xx = 0; xx < 3; ++xx) {
          CHECK(r.output(n, c, y, xx) == x.plane(n, c).block(y * 3, xx * 3, 3, 3).maxCoeff());
        }
  auto up = random_tensor<double>(r.output.shape(), 61);
  auto g = maxpool_backward(r, up);
  CHECK(g.values().sum() == doctest::Approx(up.values().sum()));
  CHECK(g.plane(0, 0).row(10).isZero());
}

// ---------------------------------------------------------------------------
// Fused 1x1 gated block + pool

TEST_CASE("gated_pool: agrees with conv -> batchnorm -> gate -> maxpool") {
  for (Mode mode : {Mode::train, Mode::infer}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      auto conv = random_conv<double>(1, 3, 5, 1700 + seed);
      auto bn = random_bn<double>(5, 1800 + seed);
      auto x = random_tensor<double>({2, 3, 19, 17}, 1900 + seed, 0.0, 1.0);
      auto up = random_tensor<double>({2, 5, 4, 4}, 2000 + seed);

      auto block = gated_block_forward(x, conv, bn, mode);
      auto pool = maxpool_forward(block.out, 4, 4);
      auto fused = gated_pool_forward(x, conv, bn, mode, 4);
      CHECK((fused.pooled.values() - pool.output.values()).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((fused.running_mean - block.running_mean).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((fused.running_var - block.running_var).cwiseAbs().maxCoeff() < 1e-12);

      auto reference = gated_block_backward(x, conv, bn, block, maxpool_backward(pool, up), false);
      auto g = gated_pool_backward(x, conv, bn, fused, up);
      CHECK(relative_error(flat(g.conv.weights), flat(reference.conv.weights)) < 1e-10);
      CHECK((g.conv.bias - reference.conv.bias).cwiseAbs().maxCoeff() < 1e-10);
      CHECK(relative_error(g.bn_scale, reference.bn_scale) < 1e-10);
      CHECK(relative_error(g.bn_shift, reference.bn_shift) < 1e-10);
    }
  }
}

TEST_CASE("gated_pool: float32 agrees with the composition") {
  auto conv = random_conv<float>(1, 3, 8, 2100);
  auto bn = random_bn<float>(8, 2101);
  auto x = random_tensor<float>({2, 3, 16, 16}, 2102, 0.0, 1.0);
  auto pool = maxpool_forward(gated_block_forward(x, conv, bn, Mode::train).out, 8, 8);
  auto fused = gated_pool_forward(x, conv, bn, Mode::train, 8);
  CHECK(relative_error(fused.pooled.values(), pool.output.values()) < 1e-5);
}

TEST_CASE("gated_pool: errors") {
  auto conv3 = random_conv<float>(3, 3, 4, 2200);
  BatchNormParams<float> bn(4);
  CHECK_THROWS_AS(gated_pool_forward(Tensor<float>({1, 3, 8, 8}), conv3, bn, Mode::train, 4),
                  ShapeError);
  auto conv1 = random_conv<float>(1, 3, 4, 2201);
  CHECK_THROWS_AS(gated_pool_forward(Tensor<float>({1, 3, 8, 8}), conv1, bn, Mode::train, 9),
                  ShapeError);
  CHECK_THROWS_AS(gated_pool_forward(Tensor<float>({1, 2, 8, 8}), conv1, bn, Mode::train, 4),
                  ShapeError);
  CHECK_THROWS_AS(gated_pool_forward(Tensor<float>({1, 3, 1, 1}), conv1, bn, Mode::train, 1),
                  NumericError);
}

// ---------------------------------------------------------------------------
// Fully-connected

TEST_CASE("fully_connected: network widths, identity and errors") {
  FcParams<float> fc1(7 * 7 * 96, 36);
  CHECK(fully_connected<float>(MatrixR<float>::Zero(1, 4704), fc1).cols() == 36);
  FcParams<float> fc2(36, 8);
  CHECK(fully_connected<float>(MatrixR<float>::Zero(3, 36), fc2).cols() == 8);
  CHECK_THROWS_AS(fully_connected<float>(MatrixR<float>::Zero(1, 35), fc2), ShapeError);

  FcParams<double> id(5, 5);
  id.weights.setIdentity();
  MatrixR<double> x(2, 5);
  fill_random(x, 70);
  CHECK(fully_connected<double>(x, id) == x);
}

TEST_CASE("fully_connected_backward: central differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    FcParams<double> p(6, 4);
    fill_random(p.weights, 71 + seed);
    fill_random(p.bias, 81 + seed);
    MatrixR<double> x(3, 6), up(3, 4);
    fill_random(x, 91 + seed);
    fill_random(up, 101 + seed);
    auto loss = [&] { return (fully_connected<double>(x, p).array() * up.array()).sum(); };
    auto g = fully_connected_backward<double>(x, p, up);
    CHECK(relative_error(flat(g.input), central_differences(x.data(), x.size(), 1e-5, loss)) <
          1e-6);
    CHECK(relative_error(flat(g.weights),
                         central_differences(p.weights.data(), p.weights.size(), 1e-5, loss)) <
          1e-6);
    CHECK(relative_error(g.bias, central_differences(p.bias.data(), 4, 1e-5, loss)) < 1e-6);
  }
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

TEST_CASE("softmax_cross_entropy: uniform logits") {
  auto r = softmax_cross_entropy<double>(VectorX<double>::Zero(8), 3);
  CHECK(r.loss == doctest::Approx(std::log(8.0)));
  CHECK(r.loss == doctest::Approx(2.07944).epsilon(1e-5));
  for (Index i = 0; i < 8; ++i) CHECK(r.probs[i] == doctest::Approx(0.125));
  CHECK(std::abs(r.logit_grad.sum()) < 1e-15);
  CHECK(r.logit_grad[3] == doctest::Approx(-0.875));
}

TEST_CASE("softmax_cross_entropy: label range") {
  CHECK_THROWS_AS(softmax_cross_entropy<float>(VectorX<float>::Zero(8), 8), DataError);
  CHECK_THROWS_AS(softmax_cross_entropy<float>(VectorX<float>::Zero(8), -1), DataError);
}

TEST_CASE("softmax_cross_entropy: central differences in float32 and float64") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    VectorX<double> z(8);
    fill_random(z, 110 + seed, -3.0, 3.0);
    const Index label = Index(seed % 8);
    auto r = softmax_cross_entropy<double>(z, label);
    auto n = central_differences(z.data(), 8, 1e-5,
                                 [&] { return softmax_cross_entropy<double>(z, label).loss; });
    CHECK(relative_error(r.logit_grad, n) < 1e-6);
    CHECK(std::abs(r.logit_grad.sum()) < 1e-12);

    VectorX<float> zf = z.cast<float>();
    auto rf = softmax_cross_entropy<float>(zf, label);
    auto nf = central_differences(zf.data(), 8, 1e-3, [&] {
      return double(softmax_cross_entropy<float>(zf, label).loss);
    });
    CHECK(relative_error(rf.logit_grad, nf) < 1e-3);
  }
}

TEST_CASE("property: softmax is a probability vector for any finite logits") {
  std::mt19937_64 rng(120);
  std::uniform_real_distribution<double> scale(0.0, 200.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const double s = scale(rng);
    VectorX<float> z(8);
    for (Index i = 0; i < 8; ++i) z[i] = float(s * normal(rng));
    auto p = softmax<float>(z);
    CHECK(p.allFinite());
    CHECK((p.array() >= 0).all());
    CHECK(std::abs(p.cast<double>().sum() - 1.0) < 1e-6);
  }
}

TEST_CASE("batch_cross_entropy: mean loss and per-batch gradient scaling") {
  MatrixR<double> z(3, 8);
  fill_random(z, 130);
  std::vector<Index> labels{0, 5, 7};
  auto r = batch_cross_entropy<double>(z, labels);
  double total = 0;
  for (Index i = 0; i < 3; ++i) {
    auto s = softmax_cross_entropy<double>(z.row(i).transpose(), labels[i]);
    total += s.loss;
    CHECK((r.logit_grad.row(i).transpose() - s.logit_grad / 3.0).norm() < 1e-15);
  }
  CHECK(r.loss == doctest::Approx(total / 3.0));
  std::vector<Index> short_labels{0};
  CHECK_THROWS_AS(batch_cross_entropy<double>(z, short_labels), ShapeError);
}

// ---------------------------------------------------------------------------
// SGD

namespace {
struct OneBlock {
  VectorX<double> p, g;
  SgdState<double> state;
  void step() {
    std::vector<ParamView<double>> ps{ParamView<double>(p.data(), p.size())};
    std::vector<ConstParamView<double>> gs{ConstParamView<double>(g.data(), g.size())};
    sgd_step<double>(ps, gs, state);
  }
};
}  // namespace

TEST_CASE("sgd: zero gradient leaves parameters unchanged") {
  OneBlock b{VectorX<double>::LinSpaced(4, 1, 4), VectorX<double>::Zero(4), {}};
  const VectorX<double> before = b.p;
  b.step();
  CHECK(b.p == before);
}

TEST_CASE("sgd: zero momentum is plain gradient descent") {
  OneBlock b{VectorX<double>::Ones(3), VectorX<double>::Constant(3, 2.0), {}};
  b.state.learning_rate = 0.5;
  b.state.momentum_coef = 0.0;
  b.step();
  CHECK(b.p.isZero());
  b.step();
  CHECK(b.p.isApprox(VectorX<double>::Constant(3, -1.0)));
}

TEST_CASE("sgd: two momentum steps with a constant gradient move 0.29 g") {
  OneBlock b{VectorX<double>::Zero(2), (VectorX<double>(2) << 1.0, -3.0).finished(), {}};
  b.state.learning_rate = 0.1;
  b.state.momentum_coef = 0.9;
  b.step();
  b.step();
  CHECK((b.p + 0.29 * b.g).norm() < 1e-12);
}

TEST_CASE("sgd: errors") {
  OneBlock b{VectorX<double>::Zero(2), VectorX<double>::Zero(3), {}};
  CHECK_THROWS_AS(b.step(), ShapeError);
  OneBlock c{VectorX<double>::Zero(2), VectorX<double>::Zero(2), {}};
  c.state.learning_rate = 0;
  CHECK_THROWS_AS(c.step(), ConfigError);
  c.state.learning_rate = 0.1;
  c.state.momentum_coef = 1.0;
  CHECK_THROWS_AS(c.step(), ConfigError);
}

// ---------------------------------------------------------------------------
// Shape properties

TEST_CASE("property: conv and pool extents follow the closed forms") {
  std::mt19937_64 rng(140);
  std::uniform_int_distribution<Index> extent(3, 20), chans(1, 4), kernel(1, 5);
  for (int trial = 0; trial < 60; ++trial) {
    const Index h = extent(rng), w = extent(rng), ci = chans(rng), co = chans(rng);
    const Index k = trial % 2 ? 3 : 1;
    auto p = random_conv<float>(k, ci, co, 150 + trial);
    auto y = conv2d_forward(random_tensor<float>({2, ci, h, w}, 160 + trial), p);
    CHECK(y.shape() == Shape{2, co, h, w});
    const Index pk = std::min<Index>(kernel(rng), std::min(h, w));
    auto r = maxpool_forward(y, pk, pk);
    CHECK(r.output.shape() == Shape{2, co, (h - pk) / pk + 1, (w - pk) / pk + 1});
  }
}

TEST_CASE("property: batchnorm train output is standardized for random batches") {
  std::mt19937_64 rng(170);
  std::uniform_int_distribution<Index> small(1, 4);
  std::uniform_real_distribution<double> offset(-50.0, 50.0), spread(0.1, 20.0);
  for (int trial = 0; trial < 40; ++trial) {
    const Index n = small(rng), c = small(rng), h = small(rng) + 1, w = small(rng) + 1;
    const double lo = offset(rng), width = spread(rng);
    auto x = random_tensor<float>({n, c, h, w}, 180 + trial, lo, lo + width);
    BatchNormParams<float> p(c);
    auto r = batchnorm_forward(x, p, Mode::train);
    const double count = double(n * h * w);
    for (Index ch = 0; ch < c; ++ch) {
      double s = 0, sq = 0, xs = 0, xsq = 0;
      for (Index b = 0; b < n; ++b) {
        s += r.output.plane(b, ch).cast<double>().sum();
        xs += x.plane(b, ch).cast<double>().sum();
      }
      for (Index b = 0; b < n; ++b) {
        sq += (r.output.plane(b, ch).cast<double>().array() - s / count).square().sum();
        xsq += (x.plane(b, ch).cast<double>().array() - xs / count).square().sum();
      }
      const double v = xsq / count;
      if (v <= 1e-3) continue;
      CHECK(std::abs(s / count) < 1e-5);
      // Output variance is v / (v + epsilon); within 1e-4 of 1 once v >= 0.1.
      CHECK(std::abs(sq / count - v / (v + 1e-5)) < 1e-4);
      if (v >= 0.1) CHECK(std::abs(sq / count - 1.0) < 1e-4);
    }
  }
}
