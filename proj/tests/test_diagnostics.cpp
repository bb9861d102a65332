#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "lcforge/diagnostics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace lcforge;

namespace {

KernelStack stack_from(std::vector<double> kernels, int64_t k) {
  KernelStack s;
  s.k = k;
  s.count = static_cast<int64_t>(kernels.size()) / (k * k);
  s.kernels = std::move(kernels);
  double mu = 0;
  for (double v : s.kernels) mu += v;
  mu /= static_cast<double>(s.kernels.size());
  double var = 0;
  for (double v : s.kernels) var += (v - mu) * (v - mu);
  s.layer_std = std::sqrt(var / static_cast<double>(s.kernels.size()));
  return s;
}

// entropy through the covariance eigenvalues, solved by hand-rolled Jacobi
double entropy_via_jacobi(const KernelStack& s) {
  const int64_t n = s.count, d = s.k * s.k;
  std::vector<double> centered(s.kernels);
  for (int64_t j = 0; j < d; ++j) {
    double mu = 0;
    for (int64_t i = 0; i < n; ++i) mu += centered[static_cast<size_t>(i * d + j)];
    mu /= static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) centered[static_cast<size_t>(i * d + j)] -= mu;
  }
  std::vector<double> cov(static_cast<size_t>(d * d), 0.0);
  for (int64_t r = 0; r < d; ++r)
    for (int64_t c = 0; c < d; ++c) {
      double acc = 0;
      for (int64_t i = 0; i < n; ++i)
        acc += centered[static_cast<size_t>(i * d + r)] * centered[static_cast<size_t>(i * d + c)];
      cov[static_cast<size_t>(r * d + c)] = acc;
    }
  auto eig = oracle::jacobi_eigenvalues(cov, d);
  double total = 0;
  for (double v : eig) total += std::max(v, 0.0);
  if (total <= 0) return 0;
  double h = 0;
  for (double v : eig) {
    const double p = std::max(v, 0.0) / total;
    if (p > 1e-15) h -= p * std::log(p);
  }
  return h;
}

}  // namespace

TEST(VarianceEntropy, IdenticalKernelsCollapseToZero) {
  std::vector<double> kernels;
  const std::vector<double> pattern{0.5, -0.2, 0.1, 0.9, -0.4, 0.3, 0.0, 0.7, -0.1};
  for (int i = 0; i < 16; ++i) kernels.insert(kernels.end(), pattern.begin(), pattern.end());
  EXPECT_DOUBLE_EQ(variance_entropy(stack_from(std::move(kernels), 3)), 0.0);
}

TEST(VarianceEntropy, BalancedBasisPatternsReachLogK2) {
  // +-alpha standard-basis kernels cover all k^2 directions equally and have
  // zero column means, so every explained-variance ratio is 1/k^2
  const int64_t k = 3, d = k * k;
  std::vector<double> kernels;
  for (int64_t j = 0; j < d; ++j) {
    for (double sign : {1.0, -1.0}) {
      std::vector<double> kern(static_cast<size_t>(d), 0.0);
      kern[static_cast<size_t>(j)] = sign * 1.7;
      kernels.insert(kernels.end(), kern.begin(), kern.end());
    }
  }
  EXPECT_NEAR(variance_entropy(stack_from(std::move(kernels), k)), std::log(9.0), 1e-12);
}

TEST(VarianceEntropy, HandBuiltRankTwoSpectrum) {
  // singular values sqrt(3) and 1 -> ratios (0.75, 0.25) -> entropy 0.5623;
  // column offsets exercise the centering step
  const double s3 = std::sqrt(3.0);
  const double u1[4] = {0.5, 0.5, -0.5, -0.5};
  const double u2[4] = {0.5, -0.5, 0.5, -0.5};
  const double off[4] = {0.3, -0.2, 1.0, 0.7};
  std::vector<double> kernels(16, 0.0);
  for (int i = 0; i < 4; ++i) {
    kernels[static_cast<size_t>(i * 4 + 0)] = s3 * u1[i] + off[0];
    kernels[static_cast<size_t>(i * 4 + 1)] = 1.0 * u2[i] + off[1];
    kernels[static_cast<size_t>(i * 4 + 2)] = off[2];
    kernels[static_cast<size_t>(i * 4 + 3)] = off[3];
  }
  auto stack = stack_from(std::move(kernels), 2);
  const double want = -(0.75 * std::log(0.75) + 0.25 * std::log(0.25));
  EXPECT_NEAR(want, 0.5623, 5e-5);
  EXPECT_NEAR(variance_entropy(stack), want, 1e-10);
  EXPECT_NEAR(variance_entropy(stack), entropy_via_jacobi(stack), 1e-9);
}

TEST(VarianceEntropy, MatchesJacobiOracleOnRandomStacks) {
  Rng rng(71);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> kernels(static_cast<size_t>(24 * 9));
    for (auto& v : kernels) v = rng.uniform(-1, 1);
    auto stack = stack_from(std::move(kernels), 3);
    EXPECT_NEAR(variance_entropy(stack), entropy_via_jacobi(stack), 1e-9);
  }
}

TEST(VarianceEntropy, InvariantUnderPermutationAndScaling) {
  Rng rng(72);
  std::vector<double> kernels(static_cast<size_t>(32 * 9));
  for (auto& v : kernels) v = rng.uniform(-1, 1);
  auto stack = stack_from(kernels, 3);
  const double base = variance_entropy(stack);

  // permute kernel order
  std::vector<double> permuted;
  std::vector<int> order(32);
  std::iota(order.begin(), order.end(), 0);
  for (int i = 31; i > 0; --i) std::swap(order[i], order[rng.next_below(i + 1)]);
  for (int i : order)
    permuted.insert(permuted.end(), kernels.begin() + i * 9, kernels.begin() + (i + 1) * 9);
  EXPECT_NEAR(variance_entropy(stack_from(std::move(permuted), 3)), base, 1e-10);

  // global scaling
  std::vector<double> scaled(kernels);
  for (auto& v : scaled) v *= 3.7;
  EXPECT_NEAR(variance_entropy(stack_from(std::move(scaled), 3)), base, 1e-10);
}

TEST(VarianceEntropy, RejectsSingleKernel) {
  EXPECT_THROW(variance_entropy(stack_from(std::vector<double>(9, 1.0), 3)), ValidationError);
}

TEST(RandomnessThreshold, FreshLayerScoresAboutOne) {
  Rng init_rng(73);
  auto w = init_conv<float>(InitSpec{8, 3}, 64, init_rng);  // N = 512 kernels
  auto stack = make_kernel_stack(w);
  Rng mc_rng(74);
  const double threshold = randomness_threshold(stack.count, stack.k, 100, mc_rng);
  const double normalized = variance_entropy(stack) / threshold;
  EXPECT_GE(normalized, 0.95);
  EXPECT_LE(normalized, 1.05);
}

TEST(RandomnessThreshold, RepeatedPatternScoresNearZero) {
  std::vector<double> kernels;
  const std::vector<double> pattern{1, 2, 3, 4, 5, 6, 7, 8, 9};
  for (int i = 0; i < 512; ++i) kernels.insert(kernels.end(), pattern.begin(), pattern.end());
  auto stack = stack_from(std::move(kernels), 3);
  Rng mc_rng(75);
  const double threshold = randomness_threshold(512, 3, 100, mc_rng);
  EXPECT_LE(variance_entropy(stack) / threshold, 0.05);
}

TEST(RandomnessThreshold, ApproachesLogK2WithKernelCount) {
  Rng rng(76);
  const double t64 = randomness_threshold(64, 3, 60, rng);
  const double t512 = randomness_threshold(512, 3, 60, rng);
  const double t4096 = randomness_threshold(4096, 3, 30, rng);
  EXPECT_LT(t64, t512);
  EXPECT_LT(t512, t4096);
  EXPECT_LT(t4096, std::log(9.0));
  EXPECT_GT(t4096, 0.98 * std::log(9.0));
}

TEST(RandomnessThreshold, NeedsEnoughDraws) {
  Rng rng(77);
  EXPECT_THROW(randomness_threshold(64, 3, 29, rng), ValidationError);
}

TEST(Heatmap, IdenticalKernelsGiveZeroMap) {
  std::vector<double> kernels;
  const std::vector<double> pattern{0.4, -0.3, 0.2, 0.8, -0.6, 0.1, 0.0, 0.5, -0.2};
  for (int i = 0; i < 8; ++i) kernels.insert(kernels.end(), pattern.begin(), pattern.end());
  auto heat = spatial_variance_heatmap(stack_from(std::move(kernels), 3));
  for (double v : heat) EXPECT_NEAR(v, 0.0, 1e-18);
}

TEST(Heatmap, ZeroLayerStdRejected) {
  EXPECT_THROW(spatial_variance_heatmap(stack_from(std::vector<double>(4 * 9, 0.25), 3)),
               ValidationError);
}

TEST(Heatmap, IidUniformKernelsAreFlat) {
  Rng rng(78);
  std::vector<double> kernels(static_cast<size_t>(4096 * 81));
  for (auto& v : kernels) v = rng.uniform(-0.1, 0.1);
  auto heat = spatial_variance_heatmap(stack_from(std::move(kernels), 9));
  const auto [lo, hi] = std::minmax_element(heat.begin(), heat.end());
  EXPECT_LE(*hi / *lo, 1.2);
}

TEST(Heatmap, LocalizedVarianceShowsOnlyAtCenter) {
  Rng rng(79);
  std::vector<double> kernels;
  std::vector<double> pattern{0.1, 0.2, 0.3, 0.4, 0.0, 0.5, 0.6, 0.7, 0.8};
  for (int i = 0; i < 64; ++i) {
    auto kern = pattern;
    kern[4] = rng.uniform(-1.0, 1.0);  // only the center varies
    kernels.insert(kernels.end(), kern.begin(), kern.end());
  }
  auto heat = spatial_variance_heatmap(stack_from(std::move(kernels), 3));
  for (int j = 0; j < 9; ++j) {
    if (j == 4) {
      EXPECT_GT(heat[static_cast<size_t>(j)], 1e-3);
    } else {
      EXPECT_NEAR(heat[static_cast<size_t>(j)], 0.0, 1e-18);
    }
  }
}

TEST(Heatmap, FoldedFrozenLcStaysUniform) {
  // linear combinations of i.i.d. filters keep a flat spatial profile
  Rng rng(80);
  auto block = wrap_conv_as_lc<float>(16, 32, 5, 1, 4, true, Intermediate::kNone, rng);
  auto stack = make_kernel_stack(block.fold());
  EXPECT_EQ(stack.count, 512);
  auto heat = spatial_variance_heatmap(stack);
  const auto [lo, hi] = std::minmax_element(heat.begin(), heat.end());
  EXPECT_LE(*hi / *lo, 1.5);
}

TEST(FilterGrid, SingleKernelHeaderAndPayload) {
  const auto dir = testutil::temp_dir("pgm_single");
  auto stack = stack_from({1, 2, 3, 4, 5, 6, 7, 8, 9}, 3);
  stack.count = 1;
  export_filter_grid(stack, dir + "/k.pgm");
  auto bytes = testutil::slurp(dir + "/k.pgm");
  const std::string header("P5\n3 3\n255\n");
  ASSERT_GE(bytes.size(), header.size() + 9);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + header.size()), header);
  EXPECT_EQ(bytes.size(), header.size() + 9);
  EXPECT_EQ(bytes[header.size()], 0);        // min maps to 0
  EXPECT_EQ(bytes.back(), static_cast<uint8_t>(255));  // max maps to 255
}

TEST(FilterGrid, ConstantKernelMapsToMidGray) {
  const auto dir = testutil::temp_dir("pgm_const");
  auto stack = stack_from(std::vector<double>(9, 0.42), 3);
  stack.count = 1;
  export_filter_grid(stack, dir + "/k.pgm");
  auto bytes = testutil::slurp(dir + "/k.pgm");
  for (size_t i = bytes.size() - 9; i < bytes.size(); ++i) EXPECT_EQ(bytes[i], 128);
}

TEST(FilterGrid, GridDimensionsFromHeader) {
  const auto dir = testutil::temp_dir("pgm_grid");
  Rng rng(81);
  std::vector<double> kernels(static_cast<size_t>(10 * 9));
  for (auto& v : kernels) v = rng.uniform(-1, 1);
  export_filter_grid(stack_from(std::move(kernels), 3), dir + "/grid.pgm");
  auto bytes = testutil::slurp(dir + "/grid.pgm");
  std::string head(bytes.begin(), bytes.begin() + 32);
  int w = 0, h = 0;
  ASSERT_EQ(sscanf(head.c_str(), "P5\n%d %d\n255\n", &w, &h), 2);
  // ceil(sqrt(10)) = 4 columns -> width 4*3+3, rows ceil(10/4)=3 -> height 3*3+2
  EXPECT_EQ(w, 15);
  EXPECT_EQ(h, 11);
}

namespace {

struct AttackFixture {
  ModelSpec spec;
  ResNetLC<float> model;
  Dataset ds;

  AttackFixture() : spec(make_spec()), model(spec, 17), ds(testutil::make_toy_dataset(24, 4, 82, 3, 8)) {}

  static ModelSpec make_spec() {
    ModelSpec s;
    s.depth = 8;
    s.width = 4;
    s.num_classes = 4;
    return s;
  }
};

}  // namespace

TEST(Fgsm, ZeroEpsilonIsIdentity) {
  AttackFixture fx;
  Batcher<float> batcher(fx.ds, 8, 0, false);
  batcher.begin_epoch(0);
  auto batch = *batcher.next();
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  auto adv = fgsm_attack(fx.model, batch.x, std::span<const int32_t>(batch.labels), cfg,
                         fx.ds.channel_mean, fx.ds.channel_std);
  ASSERT_EQ(adv.shape(), batch.x.shape());
  for (size_t i = 0; i < adv.values().size(); ++i)
    ASSERT_EQ(std::memcmp(&adv.values()[i], &batch.x.values()[i], sizeof(float)), 0);
}

TEST(Fgsm, PixelPerturbationBoundTightAtInteriorPixels) {
  AttackFixture fx;
  Batcher<float> batcher(fx.ds, 8, 0, false);
  batcher.begin_epoch(0);
  auto batch = *batcher.next();
  AttackConfig cfg;
  cfg.epsilon = 1.0 / 255.0;
  auto adv = fgsm_attack(fx.model, batch.x, std::span<const int32_t>(batch.labels), cfg,
                         fx.ds.channel_mean, fx.ds.channel_std);

  const int64_t hw = 64;
  int64_t moved = 0;
  for (size_t i = 0; i < adv.values().size(); ++i) {
    const int64_t c = (static_cast<int64_t>(i) / hw) % 3;
    const double mean = fx.ds.channel_mean[static_cast<size_t>(c)];
    const double sd = fx.ds.channel_std[static_cast<size_t>(c)];
    const int64_t p0 = std::llround(denormalize_pixel(batch.x.values()[i], mean, sd));
    const int64_t p1 = std::llround(denormalize_pixel(adv.values()[i], mean, sd));
    ASSERT_LE(std::abs(p1 - p0), 1);  // hard l_inf budget in pixel space
    if (p0 > 0 && p0 < 255) {
      // interior pixels move exactly +-1 unless the gradient is zero there
      if (p1 != p0) ++moved;
      ASSERT_TRUE(std::abs(p1 - p0) == 1 || p1 == p0);
    }
  }
  EXPECT_GT(moved, 0);
}

TEST(Fgsm, LinearModelMatchesFirstOrderPrediction) {
  // pool -> linear probe is linear in the input, so the loss increase should
  // track the first-order term closely at a one-step budget
  Rng rng(83);
  Tensor<float> w(Shape{4, 3});
  Tensor<float> b(Shape{4});
  oracle::fill_uniform(w, rng, -0.5, 0.5);
  oracle::fill_uniform(b, rng, -0.1, 0.1);
  auto forward = [&](Tape<float>& tape, const Tensor<float>& x) {
    auto pooled = global_avg_pool(tape, x);
    return linear(tape, pooled, w, b);
  };

  auto ds = testutil::make_toy_dataset(16, 4, 84, 3, 8);
  // keep pixels far from 0/255 so nothing clips
  for (auto& v : ds.images) v = static_cast<uint8_t>(64 + (v % 128));
  compute_channel_stats(ds);
  Batcher<float> batcher(ds, 16, 0, false);
  batcher.begin_epoch(0);
  auto batch = *batcher.next();

  AttackConfig cfg;
  cfg.epsilon = 1.0 / 255.0;
  auto adv = fgsm_attack_fn<float>(forward, batch.x, std::span<const int32_t>(batch.labels), cfg,
                                   ds.channel_mean, ds.channel_std);

  auto loss_of = [&](const Tensor<float>& x) {
    Tape<float> t(false);
    auto logits = forward(t, x);
    auto l = softmax_cross_entropy(t, logits, std::span<const int32_t>(batch.labels),
                                   cfg.label_smoothing);
    return static_cast<double>(l.values()[0]);
  };

  // analytic input gradient for the prediction
  Tensor<float> probe = batch.x.clone();
  probe.set_requires_grad(true);
  Tape<float> tape;
  auto logits = forward(tape, probe);
  auto loss = softmax_cross_entropy(tape, logits, std::span<const int32_t>(batch.labels),
                                    cfg.label_smoothing);
  tape.backward(loss);

  double predicted = 0;
  for (size_t i = 0; i < probe.grad().size(); ++i) {
    predicted += static_cast<double>(probe.grad()[i]) *
                 (static_cast<double>(adv.values()[i]) - static_cast<double>(batch.x.values()[i]));
  }
  const double actual = loss_of(adv) - loss_of(batch.x);
  ASSERT_GT(actual, 0);
  EXPECT_NEAR(actual, predicted, 0.05 * std::abs(predicted));
}

TEST(RobustAccuracy, ZeroEpsilonEqualsCleanExactly) {
  AttackFixture fx;
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  const double clean = evaluate(fx.model, fx.ds, 8);
  const double robust = robust_accuracy(fx.model, fx.ds, 8, cfg);
  EXPECT_EQ(clean, robust);
}

TEST(RobustAccuracy, UntrainedModelNearChance) {
  AttackFixture fx;  // 4 balanced classes -> chance 0.25
  AttackConfig cfg;
  cfg.epsilon = 1.0 / 255.0;
  const double robust = robust_accuracy(fx.model, fx.ds, 8, cfg);
  EXPECT_GE(robust, 0.0);
  EXPECT_LE(robust, 0.6);
}

TEST(RobustAccuracy, NonIncreasingInEpsilonForTrainedModel) {
  ModelSpec spec = AttackFixture::make_spec();
  spec.num_classes = 2;
  ResNetLC<float> model(spec, 18);
  auto ds = testutil::make_toy_dataset(64, 2, 85, 3, 8);
  SgdState<float> opt;
  opt.init(model);
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 16;
  cfg.lr0 = 0.05;
  cfg.seed = 9;
  cfg.augment_enabled = false;
  train_loop(model, opt, ds, ds, cfg);
  ASSERT_GE(evaluate(model, ds, 16), 0.9);  // the sweep needs a competent model

  std::vector<double> accs;
  for (double eps : {0.0, 1.0 / 255.0, 2.0 / 255.0}) {
    AttackConfig acfg;
    acfg.epsilon = eps;
    accs.push_back(robust_accuracy(model, ds, 16, acfg));
  }
  EXPECT_GE(accs[0], accs[1]);
  EXPECT_GE(accs[1], accs[2]);
}
