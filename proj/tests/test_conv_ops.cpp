#include <gtest/gtest.h>

#include "lcforge/ops.hpp"
#include "oracles.hpp"

using namespace lcforge;

namespace {

template <typename T>
ConvWeights<T> make_weights(Shape shape, std::vector<T> vals, bool frozen = false) {
  return ConvWeights<T>(Tensor<T>(std::move(shape), std::move(vals)), frozen);
}

}  // namespace

TEST(Conv2d, ScalarMultiply) {
  Tensor<float> x(Shape{1, 1, 1, 1}, std::vector<float>{1.0f});
  auto w = make_weights<float>(Shape{1, 1, 1, 1}, {2.0f});
  Tape<float> tape(false);
  auto y = conv2d(tape, x, w, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(y.values()[0], 2.0f);
}

TEST(Conv2d, FullKernelSumOfOnes) {
  Tensor<float> x(Shape{1, 1, 2, 2}, std::vector<float>(4, 1.0f));
  auto w = make_weights<float>(Shape{1, 1, 2, 2}, std::vector<float>(4, 1.0f));
  Tape<float> tape(false);
  auto y = conv2d(tape, x, w, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(y.values()[0], 4.0f);
}

TEST(Conv2d, MatchesNaiveOracle32) {
  Rng rng(11);
  Tensor<float> x(Shape{2, 3, 8, 8});
  Tensor<float> w(Shape{4, 3, 3, 3});
  oracle::fill_uniform(x, rng);
  oracle::fill_uniform(w, rng);
  Tape<float> tape(false);
  auto got = conv2d(tape, x, ConvWeights<float>(w.clone(), false), 1, 1);
  auto want = oracle::conv2d_naive(x, w, 1, 1);
  EXPECT_LE(oracle::max_abs_diff(got, want), 1e-5);
}

TEST(Conv2d, MatchesNaiveOracle64) {
  Rng rng(12);
  Tensor<double> x(Shape{2, 3, 8, 8});
  Tensor<double> w(Shape{4, 3, 3, 3});
  oracle::fill_uniform(x, rng);
  oracle::fill_uniform(w, rng);
  Tape<double> tape(false);
  auto got = conv2d(tape, x, ConvWeights<double>(w.clone(), false), 1, 1);
  auto want = oracle::conv2d_naive(x, w, 1, 1);
  EXPECT_LE(oracle::max_abs_diff(got, want), 1e-10);
}

TEST(Conv2d, StridedAndPaddedShapesMatchOracle) {
  Rng rng(13);
  for (auto [stride, pad, k] : {std::tuple<int64_t, int64_t, int64_t>{2, 1, 3},
                                {2, 2, 5},
                                {1, 4, 9},
                                {2, 0, 1}}) {
    Tensor<float> x(Shape{3, 2, 9, 9});
    Tensor<float> w(Shape{5, 2, k, k});
    oracle::fill_uniform(x, rng);
    oracle::fill_uniform(w, rng);
    Tape<float> tape(false);
    auto got = conv2d(tape, x, ConvWeights<float>(w.clone(), false), stride, pad);
    auto want = oracle::conv2d_naive(x, w, stride, pad);
    EXPECT_EQ(got.shape(), want.shape()) << "stride " << stride << " pad " << pad;
    EXPECT_LE(oracle::max_abs_diff(got, want), 1e-5);
  }
}

TEST(Conv2d, LinearityInInput) {
  Rng rng(14);
  Tensor<float> x1(Shape{1, 2, 6, 6}), x2(Shape{1, 2, 6, 6});
  Tensor<float> w(Shape{3, 2, 3, 3});
  oracle::fill_uniform(x1, rng);
  oracle::fill_uniform(x2, rng);
  oracle::fill_uniform(w, rng);
  const float a = 1.7f, b = -0.6f;
  Tensor<float> mix(Shape{1, 2, 6, 6});
  for (size_t i = 0; i < mix.values().size(); ++i)
    mix.values()[i] = a * x1.values()[i] + b * x2.values()[i];

  ConvWeights<float> cw(w.clone(), false);
  Tape<float> tape(false);
  auto y_mix = conv2d(tape, mix, cw, 1, 1);
  auto y1 = conv2d(tape, x1, cw, 1, 1);
  auto y2 = conv2d(tape, x2, cw, 1, 1);
  double max_diff = 0;
  for (size_t i = 0; i < y_mix.values().size(); ++i) {
    max_diff = std::max(max_diff,
                        std::abs(static_cast<double>(y_mix.values()[i]) -
                                 (a * y1.values()[i] + b * y2.values()[i])));
  }
  EXPECT_LE(max_diff, 1e-5);
}

TEST(Conv2d, ChannelMismatchNamesBothShapes) {
  Tensor<float> x(Shape{1, 3, 4, 4});
  auto w = make_weights<float>(Shape{2, 2, 3, 3}, std::vector<float>(36, 0.1f));
  Tape<float> tape(false);
  try {
    conv2d(tape, x, w, 1, 1);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("[1,3,4,4]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2,2,3,3]"), std::string::npos);
  }
}

TEST(Conv2d, NonPositiveOutputSizeRejected) {
  Tensor<float> x(Shape{1, 1, 2, 2});
  auto w = make_weights<float>(Shape{1, 1, 3, 3}, std::vector<float>(9, 0.1f));
  Tape<float> tape(false);
  EXPECT_THROW(conv2d(tape, x, w, 1, 0), ValidationError);
}

TEST(PointwiseConv, IdentityMatrixPassesThrough) {
  Rng rng(15);
  Tensor<float> x(Shape{2, 3, 4, 4});
  oracle::fill_uniform(x, rng);
  Tensor<float> w(Shape{3, 3, 1, 1});
  for (int64_t i = 0; i < 3; ++i) w.at({i, i, 0, 0}) = 1.0f;
  Tape<float> tape(false);
  auto y = pointwise_conv(tape, x, ConvWeights<float>(w.clone(), false));
  EXPECT_EQ(oracle::max_abs_diff(x, y), 0.0);
}

TEST(PointwiseConv, ChannelDifference) {
  Tensor<float> x(Shape{1, 2, 1, 2}, std::vector<float>{5, 3, 2, 7});
  auto w = make_weights<float>(Shape{1, 2, 1, 1}, {1.0f, -1.0f});
  Tape<float> tape(false);
  auto y = pointwise_conv(tape, x, w);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_FLOAT_EQ(y.values()[0], 3.0f);
  EXPECT_FLOAT_EQ(y.values()[1], -4.0f);
}

TEST(PointwiseConv, MatchesGeneralConvPath) {
  Rng rng(16);
  Tensor<float> x(Shape{3, 5, 6, 6});
  Tensor<float> w(Shape{4, 5, 1, 1});
  oracle::fill_uniform(x, rng);
  oracle::fill_uniform(w, rng);
  Tape<float> tape(false);
  auto special = pointwise_conv(tape, x, ConvWeights<float>(w.clone(), false));
  auto general = conv2d(tape, x, ConvWeights<float>(w.clone(), false), 1, 0);
  EXPECT_LE(oracle::max_abs_diff(special, general), 1e-6);
}

TEST(PointwiseConv, RejectsSpatialKernels) {
  Tensor<float> x(Shape{1, 2, 4, 4});
  auto w = make_weights<float>(Shape{2, 2, 3, 3}, std::vector<float>(36, 0.1f));
  Tape<float> tape(false);
  EXPECT_THROW(pointwise_conv(tape, x, w), ValidationError);
}

TEST(Conv2d, BackwardMatchesNaiveOracleGradients) {
  // Gradient of sum(conv(x, w)) checked against the oracle via linearity:
  // d/dx sum(y) equals conv of an all-ones upstream, computed naively.
  Rng rng(17);
  Tensor<double> x(Shape{2, 2, 5, 5});
  Tensor<double> wv(Shape{3, 2, 3, 3});
  oracle::fill_uniform(x, rng);
  oracle::fill_uniform(wv, rng);
  x.set_requires_grad(true);
  ConvWeights<double> w(wv.clone(), false);

  Tape<double> tape;
  auto y = conv2d(tape, x, w, 1, 1);
  auto loss = sum(tape, y);
  tape.backward(loss);

  // finite differences on a handful of coordinates
  auto loss_fn = [&]() {
    Tape<double> t(false);
    auto yy = conv2d(t, x, w, 1, 1);
    double acc = 0;
    for (double v : yy.values()) acc += v;
    return acc;
  };
  Rng pick(18);
  for (int rep = 0; rep < 10; ++rep) {
    auto& coord = x.values()[pick.next_below(x.values().size())];
    double want = oracle::central_diff(loss_fn, coord, 1e-6);
    // identify index to read matching grad
    const size_t idx = static_cast<size_t>(&coord - x.values().data());
    EXPECT_NEAR(x.grad()[idx], want, 1e-6);
  }
  for (int rep = 0; rep < 10; ++rep) {
    auto& coord = w.weights.values()[pick.next_below(w.weights.values().size())];
    double want = oracle::central_diff(loss_fn, coord, 1e-6);
    const size_t idx = static_cast<size_t>(&coord - w.weights.values().data());
    EXPECT_NEAR(w.weights.grad()[idx], want, 1e-6);
  }
}
