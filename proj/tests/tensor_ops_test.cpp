#include <gtest/gtest.h>

#include "efcm/ops.hpp"

using namespace efcm;

namespace {

Tensor<double> ones(std::vector<size_t> shape) { return Tensor<double>::full(shape, 1.0); }

TEST(Conv2d, AllOnesHandCase) {
  // 3x3 ones input, 3x3 ones kernel, pad 1: center sees 9 taps, corners 4,
  // edge centers 6.
  ConvParams<double> p;
  p.kernel = ones({1, 1, 3, 3});
  p.spec = ConvSpec{1, 1, 1, 1};
  Tensor<double> y = conv2d(ones({1, 3, 3}), p);
  ASSERT_EQ(y.shape(), (std::vector<size_t>{1, 3, 3}));
  EXPECT_DOUBLE_EQ(y.at3(0, 1, 1), 9.0);
  EXPECT_DOUBLE_EQ(y.at3(0, 0, 0), 4.0);
  EXPECT_DOUBLE_EQ(y.at3(0, 0, 2), 4.0);
  EXPECT_DOUBLE_EQ(y.at3(0, 2, 0), 4.0);
  EXPECT_DOUBLE_EQ(y.at3(0, 2, 2), 4.0);
  EXPECT_DOUBLE_EQ(y.at3(0, 0, 1), 6.0);
  EXPECT_DOUBLE_EQ(y.at3(0, 1, 0), 6.0);
}

TEST(Conv2d, DilatedImpulseResponse) {
  // Unit impulse at the center of a 7x7 map; 3x3 kernel with dilation 2 and
  // pad 2 responds only at offsets {-2,0,+2} x {-2,0,+2} from the impulse.
  Tensor<double> x({1, 7, 7});
  x.at3(0, 3, 3) = 1.0;
  ConvParams<double> p;
  p.kernel = Tensor<double>({1, 1, 3, 3});
  for (size_t i = 0; i < 9; ++i) p.kernel[i] = static_cast<double>(i + 1);
  p.spec = ConvSpec{1, 2, 2, 1};
  Tensor<double> y = conv2d(x, p);
  ASSERT_EQ(y.shape(), x.shape());
  for (size_t r = 0; r < 7; ++r)
    for (size_t c = 0; c < 7; ++c) {
      const long long dy = static_cast<long long>(r) - 3;
      const long long dx = static_cast<long long>(c) - 3;
      const bool on_grid = (dy == -2 || dy == 0 || dy == 2) && (dx == -2 || dx == 0 || dx == 2);
      if (on_grid) {
        // Cross-correlation: tap (ky,kx) contributes at offset (ky-1,kx-1)*2
        // flipped, i.e. output offset = -(tap offset).
        const size_t ky = static_cast<size_t>(1 - dy / 2);
        const size_t kx = static_cast<size_t>(1 - dx / 2);
        EXPECT_DOUBLE_EQ(y.at3(0, r, c), p.kernel.at4(0, 0, ky, kx)) << r << "," << c;
      } else {
        EXPECT_DOUBLE_EQ(y.at3(0, r, c), 0.0) << r << "," << c;
      }
    }
}

TEST(Conv2d, DepthwiseGroupIndependence) {
  // groups == channels: a zeroed input channel leaves its output channel at
  // the bias value everywhere.
  Rng rng(7);
  Tensor<double> x = rng.uniform_tensor<double>({3, 5, 5}, -1, 1);
  for (size_t i = 0; i < 25; ++i) x[i] = 0.0;
  ConvParams<double> p;
  p.kernel = rng.uniform_tensor<double>({3, 1, 3, 3}, -1, 1);
  p.bias = Tensor<double>::from({3}, {0.25, -0.5, 1.5});
  p.spec = ConvSpec{1, 1, 1, 3};
  Tensor<double> y = conv2d(x, p);
  for (size_t i = 0; i < 25; ++i) EXPECT_DOUBLE_EQ(y[i], 0.25);
  // other channels see nonzero input
  double mx = 0;
  for (size_t i = 25; i < 50; ++i) mx = std::max(mx, std::abs(y[i] + 0.5));
  EXPECT_GT(mx, 0.0);
}

TEST(Conv2d, OutputShapeFormulaGrid) {
  // floor((H + 2p - d(k-1) - 1)/s) + 1 over every combination used in the
  // repo (strides 1/2/4, pads 0..3, dilations 1/2, kernels 1/3/4/7).
  Rng rng(3);
  for (size_t k : {1u, 3u, 4u, 7u})
    for (size_t s : {1u, 2u, 4u})
      for (size_t pad : {0u, 1u, 2u, 3u})
        for (size_t d : {1u, 2u})
          for (size_t h : {7u, 12u, 16u}) {
            const long long num = static_cast<long long>(h) + 2 * static_cast<long long>(pad) -
                                   static_cast<long long>(d) * (static_cast<long long>(k) - 1) - 1;
            if (num < 0) continue;
            const size_t expect = static_cast<size_t>(num / static_cast<long long>(s)) + 1;
            Tensor<double> x = rng.uniform_tensor<double>({1, 2, h, h}, -1, 1);
            Tensor<double> w = rng.uniform_tensor<double>({3, 2, k, k}, -1, 1);
            Tensor<double> y = conv2d_forward(x, w, Tensor<double>(), ConvSpec{s, pad, d, 1});
            EXPECT_EQ(y.extent(2), expect) << "k=" << k << " s=" << s << " p=" << pad
                                           << " d=" << d << " h=" << h;
            EXPECT_EQ(y.extent(3), expect);
          }
}

TEST(Conv2d, LinearInInput) {
  Rng rng(11);
  Tensor<double> w = rng.uniform_tensor<double>({4, 3, 3, 3}, -1, 1);
  ConvSpec spec{2, 1, 1, 2};
  Tensor<double> x = rng.uniform_tensor<double>({2, 6, 9, 9}, -1, 1);
  Tensor<double> y = rng.uniform_tensor<double>({2, 6, 9, 9}, -1, 1);
  const double a = 1.7, b = -0.3;
  Tensor<double> mix(x.shape());
  for (size_t i = 0; i < x.size(); ++i) mix[i] = a * x[i] + b * y[i];
  Tensor<double> lhs = conv2d_forward(mix, w, Tensor<double>(), spec);
  Tensor<double> cx = conv2d_forward(x, w, Tensor<double>(), spec);
  Tensor<double> cy = conv2d_forward(y, w, Tensor<double>(), spec);
  for (size_t i = 0; i < lhs.size(); ++i)
    EXPECT_NEAR(lhs[i], a * cx[i] + b * cy[i], 1e-12);
}

TEST(Conv2d, Errors) {
  ConvParams<double> p;
  p.kernel = ones({2, 3, 3, 3});
  p.spec = ConvSpec{1, 1, 1, 1};
  EXPECT_THROW(conv2d(ones({2, 5, 5}), p), std::invalid_argument);  // channel mismatch
  Tensor<double> x({1, 3, 4, 4});
  Tensor<double> w({2, 3, 3, 3});
  EXPECT_THROW(conv2d_forward(x, w, Tensor<double>(), ConvSpec{1, 0, 1, 2}),
               std::invalid_argument);  // groups do not divide channels
  EXPECT_THROW(conv2d_forward(Tensor<double>({1, 3, 2, 2}), w, Tensor<double>(), ConvSpec{}),
               std::invalid_argument);  // too small for one output position
}

TEST(GlobalAvgPool, Cases) {
  Tensor<double> x({2, 2, 2});
  for (size_t i = 0; i < 4; ++i) x[i] = 3.5;        // channel 0 constant
  x[4] = 1; x[5] = 2; x[6] = 3; x[7] = 4;           // channel 1: [[1,2],[3,4]]
  Tensor<double> s = global_avg_pool(x);
  EXPECT_DOUBLE_EQ(s[0], 3.5);
  EXPECT_DOUBLE_EQ(s[1], 2.5);
  // linearity
  Tensor<double> x2(x.shape());
  for (size_t i = 0; i < x.size(); ++i) x2[i] = 2.0 * x[i];
  Tensor<double> s2 = global_avg_pool(x2);
  for (size_t c = 0; c < 2; ++c) EXPECT_DOUBLE_EQ(s2[c], 2.0 * s[c]);
  EXPECT_THROW(global_avg_pool_forward(Tensor<double>({1, 2, 0, 4})), std::invalid_argument);
}

TEST(Pointwise, Values) {
  Tensor<double> x = Tensor<double>::from({3}, {-1.0, 0.0, 2.0});
  Tensor<double> r = act_forward(Act::relu, x);
  EXPECT_DOUBLE_EQ(r[0], 0.0);
  EXPECT_DOUBLE_EQ(r[2], 2.0);
  Tensor<double> s = act_forward(Act::sigmoid, x);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  Tensor<double> g = act_forward(Act::gelu, x);
  EXPECT_DOUBLE_EQ(g[1], 0.0);
  // gelu(1) = 0.5*(1+erf(1/sqrt(2))) = Phi(1) ~ 0.8413447
  EXPECT_NEAR(gelu_scalar(1.0), 0.8413447460685429, 1e-12);
}

TEST(LayerNorm, ConstantVectorIsZero) {
  Tensor<double> x = Tensor<double>::full({2, 5}, 3.25);
  Tensor<double> gamma = Tensor<double>::full({5}, 1.0);
  Tensor<double> beta({5});
  Tensor<double> y = layer_norm_forward(x, gamma, beta, 1e-6);
  for (size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], 0.0, 1e-12);
}

TEST(BatchNorm, InferenceIdentity) {
  Rng rng(5);
  Tensor<double> x = rng.uniform_tensor<double>({3, 4}, -2, 2);
  Tensor<double> gamma = Tensor<double>::full({4}, 1.0);
  Tensor<double> beta({4});
  Tensor<double> rm({4});
  Tensor<double> rv = Tensor<double>::full({4}, 1.0);
  Tensor<double> y = batch_norm_eval_forward(x, gamma, beta, rm, rv, 0.0);
  for (size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(BatchNorm, NonpositiveVarianceError) {
  Tensor<double> x({2, 2});
  Tensor<double> gamma = Tensor<double>::full({2}, 1.0);
  Tensor<double> beta({2});
  Tensor<double> rm({2});
  Tensor<double> rv = Tensor<double>::from({2}, {-2.0, 1.0});
  EXPECT_THROW(batch_norm_eval_forward(x, gamma, beta, rm, rv, 1e-5), std::invalid_argument);
}

TEST(BatchNorm, RunningStatUpdate) {
  // momentum 0.1, unbiased variance into the running buffer
  Tensor<double> x = Tensor<double>::from({4, 1}, {1.0, 2.0, 3.0, 4.0});
  Tensor<double> gamma = Tensor<double>::full({1}, 1.0);
  Tensor<double> beta({1});
  Tensor<double> rm({1});
  Tensor<double> rv = Tensor<double>::full({1}, 1.0);
  batch_norm_train_forward(x, gamma, beta, rm, rv, 0.1, 1e-5);
  EXPECT_NEAR(rm[0], 0.1 * 2.5, 1e-12);
  const double unbiased = (2.25 + 0.25 + 0.25 + 2.25) / 3.0;
  EXPECT_NEAR(rv[0], 0.9 * 1.0 + 0.1 * unbiased, 1e-12);
}

TEST(Finiteness, OverflowIsAnError) {
  Tensor<double> x = Tensor<double>::full({1, 1, 2, 2}, 1e308);
  Tensor<double> w = Tensor<double>::full({1, 1, 2, 2}, 1e308);
  EXPECT_THROW(conv2d_forward(x, w, Tensor<double>(), ConvSpec{}), std::runtime_error);
}

TEST(MaxPool, BasicAndBackward) {
  Tensor<double> x = Tensor<double>::from({1, 1, 2, 2}, {1.0, 5.0, 3.0, 2.0});
  std::vector<uint32_t> amax;
  Tensor<double> y = max_pool2d_forward(x, 2, 2, 0, &amax);
  ASSERT_EQ(y.size(), 1u);
  EXPECT_DOUBLE_EQ(y[0], 5.0);
  Tensor<double> dy = Tensor<double>::full({1, 1, 1, 1}, 2.0);
  Tensor<double> dx = max_pool2d_backward<double>(x.shape(), amax, dy);
  EXPECT_DOUBLE_EQ(dx[1], 2.0);
  EXPECT_DOUBLE_EQ(dx[0], 0.0);
}

}  // namespace
