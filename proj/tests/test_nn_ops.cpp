#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dfb/autodiff.hpp"
#include "dfb/nn_ops.hpp"
#include "dfb/rng.hpp"
#include "oracles.hpp"

using namespace dfb;

namespace {

ConvSpec random_spec(Rng& rng, std::size_t cin, std::size_t cout, bool temporal) {
  ConvSpec s;
  s.in_channels = cin;
  s.out_channels = cout;
  for (std::size_t a = temporal ? 0 : 1; a < 3; ++a) {
    s.kernel[a] = 1 + rng.uniform_int(3);
    s.stride[a] = 1 + rng.uniform_int(2);
    s.pad[a] = rng.uniform_int(s.kernel[a]);
  }
  return s;
}

Tensor<double> run_max(const Tensor<double>& x, std::vector<std::size_t>* argmax = nullptr) {
  Tape<double> tape;
  PoolResult r = global_max_pool(tape, tape.constant(x));
  if (argmax) *argmax = r.argmax;
  return tape.value(r.values);
}

}  // namespace

TEST(Conv, MatchesNestedLoopOracleBothAlgorithms) {
  Rng rng(101);
  for (int trial = 0; trial < 60; ++trial) {
    const bool temporal = trial % 2 == 0;
    const std::size_t cin = 1 + rng.uniform_int(4), cout = 1 + rng.uniform_int(4);
    const ConvSpec s = random_spec(rng, cin, cout, temporal);
    const Shape xs = temporal ? Shape{cin, 3 + rng.uniform_int(2), 3 + rng.uniform_int(2), 3 + rng.uniform_int(2)}
                              : Shape{cin, 3 + rng.uniform_int(2), 3 + rng.uniform_int(2)};
    const auto x = oracle::random(rng, xs);
    const auto w = oracle::random(rng, s.weight_shape());
    const auto b = oracle::random(rng, {cout});
    const auto ref = oracle::conv(x, w, b, s);
    EXPECT_LT(oracle::max_abs_diff(conv_forward(x, w, b, s, ConvAlgo::kDirect), ref), 1e-12);
    EXPECT_LT(oracle::max_abs_diff(conv_forward(x, w, b, s, ConvAlgo::kGemm), ref), 1e-12);
  }
}

TEST(Conv, PaperSizedRandomCase) {
  Rng rng(102);
  const ConvSpec s = ConvSpec::square(2, 3, 3, true, 1, 1);
  const auto x = oracle::random(rng, {2, 3, 4, 4});
  const auto w = oracle::random(rng, s.weight_shape());
  const auto b = oracle::random(rng, {3});
  EXPECT_LT(oracle::max_abs_diff(conv_forward(x, w, b, s), oracle::conv(x, w, b, s)), 1e-12);
}

TEST(Conv, BackwardAlgorithmsAgree) {
  Rng rng(103);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t cin = 1 + rng.uniform_int(3), cout = 1 + rng.uniform_int(3);
    const ConvSpec s = random_spec(rng, cin, cout, true);
    const auto x = oracle::random(rng, {cin, 3, 4, 4});
    const auto w = oracle::random(rng, s.weight_shape());
    const auto g = oracle::random(rng, s.output_shape(x.shape()));
    Tensor<double> gx1(x.shape(), 0.0), gw1(w.shape(), 0.0), gb1({cout}, 0.0);
    Tensor<double> gx2(x.shape(), 0.0), gw2(w.shape(), 0.0), gb2({cout}, 0.0);
    conv_backward(x, w, g, s, ConvAlgo::kDirect, &gx1, &gw1, &gb1);
    conv_backward(x, w, g, s, ConvAlgo::kGemm, &gx2, &gw2, &gb2);
    EXPECT_LT(oracle::max_abs_diff(gx1, gx2), 1e-12);
    EXPECT_LT(oracle::max_abs_diff(gw1, gw2), 1e-12);
    EXPECT_LT(oracle::max_abs_diff(gb1, gb2), 1e-12);
  }
}

TEST(Conv, PointwiseKernelIsChannelMixing) {
  Rng rng(104);
  const auto x = oracle::random(rng, {3, 2, 3, 3});
  const auto w = oracle::random(rng, {2, 3});
  const auto b = oracle::random(rng, {2});
  const ConvSpec s = ConvSpec::pointwise(3, 2);
  const auto y = conv_forward(x, w.reshaped({2, 3, 1, 1, 1}), b, s);
  Tape<double> tape;
  const auto z = tape.value(pointwise_conv(tape, tape.constant(x), tape.constant(w), tape.constant(b)));
  EXPECT_LT(oracle::max_abs_diff(y, z), 1e-12);
  // Each voxel equals dense over the channel vector.
  const std::size_t v = 18;
  for (std::size_t p = 0; p < v; ++p)
    for (std::size_t o = 0; o < 2; ++o) {
      double s2 = b[o];
      for (std::size_t c = 0; c < 3; ++c) s2 += w[o * 3 + c] * x[c * v + p];
      EXPECT_NEAR(y[o * v + p], s2, 1e-12);
    }
}

TEST(Conv, DeltaKernelIsIdentity) {
  Rng rng(105);
  const auto x = oracle::random(rng, {1, 3, 5, 4});
  const ConvSpec s = ConvSpec::square(1, 1, 3, true, 1, 1);
  Tensor<double> w(s.weight_shape(), 0.0);
  w.at({0, 0, 1, 1, 1}) = 1.0;
  EXPECT_TRUE(bit_equal(conv_forward(x, w, Tensor<double>::zeros({1}), s), x));
}

TEST(Conv, ZeroKernelGivesBias) {
  Rng rng(106);
  const auto x = oracle::random(rng, {2, 4, 4});
  const ConvSpec s = ConvSpec::square(2, 3, 3, false, 1, 2);
  const Tensor<double> b({3}, std::vector<double>{0.5, -1, 2});
  const auto y = conv_forward(x, Tensor<double>(s.weight_shape(), 0.0), b, s);
  const std::size_t v = y.size() / 3;
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < v; ++i) EXPECT_EQ(y[o * v + i], b[o]);
}

TEST(Conv, ExtentErrors) {
  ConvSpec s = ConvSpec::square(1, 1, 3, false, 1, 1);
  s.pad = {0, 0, 0};
  EXPECT_THROW(s.output_shape({1, 2, 2}), Error);
  EXPECT_THROW(s.output_shape({2, 4, 4}), Error);
  EXPECT_EQ(s.out_extent(1, 7), 5u);
  s.stride = {1, 2, 2};
  EXPECT_EQ(s.out_extent(1, 7), 3u);
}

TEST(Pool, AverageExamplesAndOracle) {
  Tape<double> tape;
  const Tensor<double> c7({2, 2, 3}, 7.0);
  for (double v : tape.value(global_avg_pool(tape, tape.constant(c7))).values()) EXPECT_EQ(v, 7.0);
  const Tensor<double> two({1, 2}, std::vector<double>{0, 2});
  EXPECT_EQ(tape.value(global_avg_pool(tape, tape.constant(two)))[0], 1.0);
  Rng rng(107);
  for (int trial = 0; trial < 30; ++trial) {
    const auto x = oracle::random(rng, {1 + rng.uniform_int(4), 1 + rng.uniform_int(4), 1 + rng.uniform_int(4),
                                        1 + rng.uniform_int(4)});
    const auto y = tape.value(global_avg_pool(tape, tape.constant(x)));
    const auto ref = oracle::avg_pool(x);
    for (std::size_t c = 0; c < ref.size(); ++c) EXPECT_NEAR(y[c], ref[c], 1e-12);
  }
}

TEST(Pool, MaxTiesToLowestIndex) {
  std::vector<std::size_t> am;
  const auto v = run_max(Tensor<double>({1, 4}, std::vector<double>{1, 5, 5, 2}), &am);
  EXPECT_EQ(v[0], 5.0);
  EXPECT_EQ(am[0], 1u);
  run_max(Tensor<double>({1, 2, 2}, 3.0), &am);
  EXPECT_EQ(am[0], 0u);
}

TEST(Pool, MaxMatchesScanOracleAndCoordinates) {
  Rng rng(108);
  for (int trial = 0; trial < 30; ++trial) {
    const Shape s{1 + rng.uniform_int(4), 1 + rng.uniform_int(4), 1 + rng.uniform_int(4), 1 + rng.uniform_int(4)};
    const auto x = oracle::random(rng, s);
    Tape<double> tape;
    PoolResult r = global_max_pool(tape, tape.constant(x));
    const auto ref = oracle::max_pool(x);
    const auto& v = tape.value(r.values);
    for (std::size_t c = 0; c < s[0]; ++c) {
      EXPECT_EQ(v[c], ref.values[c]);
      EXPECT_EQ(r.argmax[c], ref.argmax[c]);
      const auto co = r.coords(c);
      ASSERT_EQ(co.size(), 3u);
      EXPECT_EQ(x.at({c, co[0], co[1], co[2]}), v[c]);
    }
  }
}

TEST(Pool, MaxGradientIsOneHot) {
  Rng rng(109);
  const auto x = oracle::random(rng, {2, 3, 3});
  ParamSet<double> p;
  p.add("x", x);
  Tape<double> tape;
  PoolResult r = global_max_pool(tape, tape.param(p, "x"));
  const auto g = tape.backward(sum(tape, r.values), p);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(g.grads[0][c * 9 + i], i == r.argmax[c] ? 1.0 : 0.0);
}

TEST(Upsample, ClosedFormRow) {
  Tape<double> tape;
  const auto y = tape.value(upsample_bilinear2x(tape, tape.constant(Tensor<double>({1, 1, 2}, std::vector<double>{0, 1}))));
  ASSERT_EQ(y.shape(), (Shape{1, 2, 4}));
  const double want[] = {0, 0.25, 0.75, 1};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y[r * 4 + i], want[i]);
}

TEST(Upsample, ConstantAndSinglePixel) {
  Tape<double> tape;
  for (double v : tape.value(upsample_bilinear2x(tape, tape.constant(Tensor<double>({2, 3, 2, 3}, 4.5)))).values())
    EXPECT_EQ(v, 4.5);
  const auto one = tape.value(upsample_bilinear2x(tape, tape.constant(Tensor<double>({1, 1, 1}, -2.0))));
  EXPECT_EQ(one.shape(), (Shape{1, 2, 2}));
  for (double v : one.values()) EXPECT_EQ(v, -2.0);
}

TEST(Upsample, MatchesOracleAndStaysInRange) {
  Rng rng(110);
  for (int trial = 0; trial < 30; ++trial) {
    const bool temporal = trial % 2 == 1;
    const Shape s = temporal ? Shape{1 + rng.uniform_int(3), 1 + rng.uniform_int(3), 1 + rng.uniform_int(4),
                                     1 + rng.uniform_int(4)}
                             : Shape{1 + rng.uniform_int(3), 1 + rng.uniform_int(4), 1 + rng.uniform_int(4)};
    const auto x = oracle::random(rng, s);
    Tape<double> tape;
    const auto y = tape.value(upsample_bilinear2x(tape, tape.constant(x)));
    EXPECT_LT(oracle::max_abs_diff(y, oracle::upsample2x(x)), 1e-12);
    const std::size_t c = s[0], vin = x.size() / c, vout = y.size() / c;
    for (std::size_t k = 0; k < c; ++k) {
      const auto lo = *std::min_element(x.data() + k * vin, x.data() + (k + 1) * vin);
      const auto hi = *std::max_element(x.data() + k * vin, x.data() + (k + 1) * vin);
      for (std::size_t i = 0; i < vout; ++i) {
        EXPECT_GE(y[k * vout + i], lo - 1e-15);
        EXPECT_LE(y[k * vout + i], hi + 1e-15);
      }
    }
  }
}

TEST(Dropout, Modes) {
  Rng rng(111);
  const auto x = oracle::random(rng, {100});
  Tape<double> tape;
  EXPECT_TRUE(bit_equal(tape.value(dropout(tape, tape.constant(x), 0.0, DropoutMode::kTrain, &rng)), x));
  EXPECT_TRUE(bit_equal(tape.value(dropout(tape, tape.constant(x), 0.7, DropoutMode::kEval)), x));
  EXPECT_THROW(dropout(tape, tape.constant(x), 1.0, DropoutMode::kTrain, &rng), Error);
  const Tensor<double> mask({100}, 1.0);
  EXPECT_TRUE(bit_equal(tape.value(dropout(tape, tape.constant(x), 0.5, DropoutMode::kFixedMask, nullptr, &mask)),
                        scale(x, 2.0)));
}

TEST(Dropout, InvertedScalingKeepsTheMean) {
  Rng rng(112);
  Tape<double> tape;
  const auto y = tape.value(dropout(tape, tape.constant(Tensor<double>({1000000}, 1.0)), 0.5, DropoutMode::kTrain, &rng));
  double s = 0;
  for (double v : y.values()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    s += v;
  }
  EXPECT_NEAR(s / 1e6, 1.0, 0.01);
}

TEST(SoftmaxXent, Examples) {
  Tape<double> tape;
  EXPECT_NEAR(tape.value(softmax_xent(tape, tape.constant(Tensor<double>({4}, 0.3)), 2))[0], std::log(4.0), 1e-12);
  EXPECT_LT(tape.value(softmax_xent(tape, tape.constant(Tensor<double>({2}, std::vector<double>{20, -20})), 0))[0],
            1e-8);
  EXPECT_THROW(softmax_xent(tape, tape.constant(Tensor<double>({3}, 0.0)), 3), Error);
}

TEST(SoftmaxXent, MatchesCompensatedOracleAndGradientSumsToZero) {
  Rng rng(113);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 2 + rng.uniform_int(9);
    const auto z = oracle::random(rng, {c}, -10, 10);
    const std::size_t label = rng.uniform_int(c);
    ParamSet<double> p;
    p.add("z", z);
    Tape<double> tape;
    const Var l = softmax_xent(tape, tape.param(p, "z"), label);
    const std::vector<double> zv(z.values().begin(), z.values().end());
    EXPECT_NEAR(tape.value(l)[0], oracle::softmax_xent(zv, label), 1e-12);
    const auto g = tape.backward(l, p);
    double s = 0;
    for (double v : g.grads[0].values()) s += v;
    EXPECT_LT(std::fabs(s), 1e-12);
  }
}

TEST(CrossChannelPool, Examples) {
  Tape<double> tape;
  const auto y = tape.value(
      cross_channel_pool(tape, tape.constant(Tensor<double>({4}, std::vector<double>{1, 3, 5, 7})), 2, 2));
  EXPECT_EQ(y, (Tensor<double>({2}, std::vector<double>{2, 6})));
  Rng rng(114);
  const auto x = oracle::random(rng, {6});
  EXPECT_TRUE(bit_equal(tape.value(cross_channel_pool(tape, tape.constant(x), 1, 6)), x));
  EXPECT_THROW(cross_channel_pool(tape, tape.constant(x), 4, 2), Error);
}

TEST(CrossChannelPool, MatchesBlockMeanOracle) {
  Rng rng(115);
  for (int trial = 0; trial < 30; ++trial) {
    const auto x = oracle::random(rng, {15});
    Tape<double> tape;
    const auto y = tape.value(cross_channel_pool(tape, tape.constant(x), 5, 3));
    const auto ref = oracle::block_mean(std::vector<double>(x.values().begin(), x.values().end()), 5, 3);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y[c], ref[c], 1e-12);
  }
}
