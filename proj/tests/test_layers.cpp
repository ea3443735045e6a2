#include <gtest/gtest.h>

#include "stbl/layers.hpp"
#include "support.hpp"

using namespace stbl;
using namespace stbl::test;

namespace {

double pnorm(std::span<const double> v, int p) {
  return p == 1 ? l1(v) : p == 2 ? l2(v) : max_abs(v);
}

}  // namespace

TEST(Relu, Example) {
  EXPECT_EQ(relu(std::vector<double>{-1, 2, 0}), (std::vector<double>{0, 2, 0}));
  const std::vector<double> pos{0.0, 1.5, 3.0};
  EXPECT_EQ(relu(pos), pos);
}

TEST(Relu, NonExpansiveAndBounded) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> x(13), y(13);
    fill_normal(x, rng);
    fill_normal(y, rng);
    const auto rx = relu(x), ry = relu(y);
    std::vector<double> d(13), rd(13);
    for (int i = 0; i < 13; ++i) {
      d[i] = x[i] - y[i];
      rd[i] = rx[i] - ry[i];
    }
    for (int p : {1, 2, 0}) {
      EXPECT_LE(pnorm(rd, p), pnorm(d, p) + 1e-15);
      EXPECT_LE(pnorm(rx, p), pnorm(x, p));
    }
  }
}

TEST(BatchNorm, ConstantBatchGivesZeros) {
  std::vector<Feature> batch{Feature(2, 2, 1, {3, 3, 3, 3}), Feature(2, 2, 1, {3, 3, 3, 3})};
  const auto r = batchnorm(batch, BatchNormParams::identity(1), BatchNormMode::Train);
  for (const auto& y : r.outputs) EXPECT_EQ(max_abs(y.data()), 0.0);
  EXPECT_GT(r.stats.sigma[0], 0.0);
}

TEST(BatchNorm, TwoScalars) {
  std::vector<Feature> batch{Feature(1, 1, 1, {-1.0}), Feature(1, 1, 1, {1.0})};
  const auto r = batchnorm(batch, BatchNormParams::identity(1), BatchNormMode::Train);
  EXPECT_NEAR(r.stats.mean[0], 0.0, 1e-15);
  EXPECT_NEAR(r.outputs[0].data()[0], -1.0, 1e-9);
  EXPECT_NEAR(r.outputs[1].data()[0], 1.0, 1e-9);
}

TEST(BatchNorm, StatisticsArePerChannelOverBatchAndSpace) {
  std::mt19937_64 rng(2);
  std::vector<Feature> batch;
  for (int i = 0; i < 5; ++i) batch.push_back(random_feature(3, 2, 2, rng));
  const auto s = batch_statistics(batch, 0.0);
  for (std::size_t k = 0; k < 2; ++k) {
    double sum = 0.0, sq = 0.0;
    for (const auto& x : batch)
      for (double v : x.channel(k)) sum += v;
    const double mean = sum / 30.0;
    for (const auto& x : batch)
      for (double v : x.channel(k)) sq += (v - mean) * (v - mean);
    EXPECT_NEAR(s.mean[k], mean, 1e-14);
    EXPECT_NEAR(s.sigma[k], std::sqrt(sq / 30.0), 1e-14);
  }
}

TEST(BatchNorm, EvalModeEqualsFoldedConvolution) {
  std::mt19937_64 rng(3);
  const Filter k = random_filter(3, 2, 3, rng);
  std::vector<double> bias(3);
  fill_normal(bias, rng);
  BatchNormParams bn = BatchNormParams::identity(3);
  for (std::size_t c = 0; c < 3; ++c) {
    bn.gamma[c] = 0.5 + c;
    bn.beta[c] = 0.1 * c - 0.2;
    bn.mean[c] = 0.3 * c;
    bn.sigma[c] = 1.0 + 0.5 * c;
  }
  const Feature x = random_feature(4, 5, 2, rng);
  Feature z = conv2d(x, k);
  add_channel_bias(z, bias);
  std::vector<Feature> batch{z};
  const Feature want = batchnorm(batch, bn, BatchNormMode::Eval).outputs[0];
  const FoldedConv f = fold_batchnorm(k, bias, bn);
  Feature got = conv2d(x, f.filter);
  add_channel_bias(got, f.bias);
  EXPECT_LE(max_abs_diff(got.data(), want.data()), 1e-12);
}

TEST(PadChannels, Example) {
  std::mt19937_64 rng(4);
  const Feature x = random_feature(3, 3, 2, rng);
  const Feature y = pad_channels(x, 4);
  ASSERT_EQ(y.depth(), 4u);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_EQ(y(i, j, 0), 0.0);
      EXPECT_EQ(y(i, j, 1), x(i, j, 0));
      EXPECT_EQ(y(i, j, 2), x(i, j, 1));
      EXPECT_EQ(y(i, j, 3), 0.0);
    }
  EXPECT_EQ(max_abs(pad_channels(Feature(2, 2, 2), 4).data()), 0.0);
}

TEST(PadChannels, IsometryAndAdjoint) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 1000; ++t) {
    const Feature x = random_feature(2, 3, 3, rng);
    const Feature y = pad_channels(x, 6);
    for (int p : {1, 2, 0}) EXPECT_NEAR(pnorm(y.data(), p), pnorm(x.data(), p), 1e-12);
    const Feature u = random_feature(2, 3, 6, rng);
    EXPECT_NEAR(dot(y.data(), u.data()), dot(x.data(), pad_channels_adjoint(u, 3).data()), 1e-12);
  }
}

TEST(Pool2, Examples) {
  const Feature y = pool2(Feature(2, 2, 1, {1, 2, 3, 4}));
  ASSERT_EQ(y.size(), 1u);
  EXPECT_DOUBLE_EQ(y.data()[0], 2.5);
  const Feature z = pool2(Feature(3, 3, 1, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
  EXPECT_EQ(vectorize(z), (std::vector<double>{3.0, 2.25, 3.75, 2.25}));
}

TEST(Pool2, EdgeBlocksStillDivideByFour) {
  const Feature y = pool2(Feature(3, 1, 1, {4, 4, 4}));
  EXPECT_EQ(vectorize(y), (std::vector<double>{2.0, 1.0}));
}

TEST(Pool2, NonExpansive) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t h = 1 + t % 7, w = 1 + (t / 7) % 7;
    const Feature x = random_feature(h, w, 2, rng);
    const Feature y = pool2(x);
    EXPECT_LE(l2(y.data()), l2(x.data()) + 1e-15);
    EXPECT_LE(max_abs(y.data()), max_abs(x.data()));
  }
}

TEST(Pool2, AdjointIdentity) {
  std::mt19937_64 rng(7);
  for (std::size_t h : {2, 3, 5})
    for (std::size_t w : {1, 4, 7}) {
      const Feature x = random_feature(h, w, 2, rng);
      const Feature y = pool2(x);
      const Feature u = random_feature(y.height(), y.width(), 2, rng);
      EXPECT_NEAR(dot(y.data(), u.data()), dot(x.data(), pool2_adjoint(u, h, w).data()), 1e-12);
    }
}

TEST(PoolGlobal, Examples) {
  EXPECT_EQ(pool_global(Feature(3, 2, 4, std::vector<double>(24, 1.0))), std::vector<double>(4, 1.0));
  EXPECT_DOUBLE_EQ(pool_global(Feature(2, 2, 1, {1, 2, 3, 4}))[0], 2.5);
}

TEST(PoolGlobal, NonExpansive) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 1000; ++t) {
    const Feature x = random_feature(3, 4, 3, rng);
    const auto g = pool_global(x);
    EXPECT_LE(max_abs(g), max_abs(x.data()));
    EXPECT_LE(l2(g), l2(x.data()));
  }
}

TEST(BiasNorm, FeatureSpaceNorms) {
  const std::vector<double> b{1.0, -2.0};
  EXPECT_DOUBLE_EQ(bias_norm(b, 3, 4, Norm::linf()), 2.0);
  EXPECT_DOUBLE_EQ(bias_norm(b, 3, 4, Norm::l2()), std::sqrt(12.0 * 5.0));
  EXPECT_DOUBLE_EQ(bias_norm(b, 3, 4, Norm::l1()), 36.0);
}
