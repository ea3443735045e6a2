#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "stbl/train.hpp"
#include "support.hpp"

using namespace stbl;
using namespace stbl::test;

namespace {

NetworkSpec spec_of(Variant v, bool bn, Padding pad, std::size_t d1 = 2) {
  NetworkSpec s;
  s.variant = v;
  s.m = 1;
  s.d1 = d1;
  s.batchnorm = bn;
  s.padding = pad;
  return s;
}

ParamStore perturbed(const NetworkSpec& spec, std::uint64_t seed) {
  ParamStore p = init_params(spec, seed);
  std::mt19937_64 rng(seed + 17);
  fill_normal(p.first.b, rng, 0.1);
  for (auto& r : p.residual) {
    fill_normal(r.b1, rng, 0.1);
    fill_normal(r.b2, rng, 0.1);
    if (spec.batchnorm) {
      for (double& g : r.bn1.gamma) g += 0.2 * std::normal_distribution<double>(0.0, 1.0)(rng);
      fill_normal(r.bn1.beta, rng, 0.1);
    }
  }
  for (auto& c : p.pool) fill_normal(c.b, rng, 0.1);
  fill_normal(p.dense_bias, rng, 0.1);
  return p;
}

DatasetSplit tiny_bars(std::size_t train = 64, std::size_t test = 32) {
  SyntheticConfig cfg;
  cfg.train = train;
  cfg.test = test;
  cfg.noise = 0.2;
  DatasetSplit d = synthetic_bars(cfg);
  const Normalization n = fit_normalization(d.train);
  apply_normalization(d.train, n);
  apply_normalization(d.test, n);
  return d;
}

TrainConfig short_run() {
  TrainConfig c;
  c.batch_size = 16;
  c.learning_rate = 0.003;
  c.decay_steps = 20;
  c.total_steps = 40;
  c.eval_interval = 20;
  return c;
}

}  // namespace

TEST(Softmax, Examples) {
  const auto a = softmax(std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  const auto b = softmax(std::vector<double>{std::log(1.0), std::log(2.0), std::log(3.0)});
  EXPECT_NEAR(b[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(b[1], 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(b[2], 3.0 / 6.0, 1e-15);
  const auto c = softmax(std::vector<double>{1.0 + 40.0, 2.0 + 40.0, -1.0 + 40.0});
  const auto d = softmax(std::vector<double>{1.0, 2.0, -1.0});
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(c[i], d[i], 1e-15);
  const auto e = softmax(std::vector<double>{1000.0, 0.0});
  EXPECT_TRUE(std::isfinite(e[0]));
}

TEST(CrossEntropy, Examples) {
  const std::vector<double> e1{1.0, 0.0};
  EXPECT_EQ(cross_entropy(e1, e1), 0.0);
  EXPECT_NEAR(cross_entropy(e1, std::vector<double>{0.5, 0.5}), 0.693147180559945, 1e-12);
  EXPECT_NEAR(cross_entropy(std::vector<double>{0.5, 0.5}, std::vector<double>{0.25, 0.75}),
              -0.5 * (std::log(0.25) + std::log(0.75)), 1e-15);
  EXPECT_NEAR(cross_entropy(e1, std::vector<double>{0.0, 1.0}), -std::log(kLogClamp), 1e-9);
}

TEST(Loss, ConfidentCorrectLogitsGiveZero) {
  const NetworkSpec s = spec_of(Variant::ResNetS, false, Padding::Periodic);
  ParamStore p = zero_params(s);
  p.dense_bias = {60.0, -60.0};
  std::vector<Feature> xs{Feature(8, 8, 1)};
  std::vector<std::vector<double>> ys{one_hot(0, 2)};
  const LossResult r = loss_total(s, p, xs, ys, 0.0);
  EXPECT_LT(r.value, 1e-40);
  EXPECT_EQ(r.correct, 1u);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  for (Variant v : {Variant::ResNetD, Variant::ResNetS})
    for (bool bn : {false, true})
      for (Padding pad : {Padding::Periodic, Padding::Zero}) {
        const NetworkSpec s = spec_of(v, bn, pad);
        ParamStore p = perturbed(s, 3);
        std::vector<Feature> xs;
        std::vector<std::vector<double>> ys;
        for (int b = 0; b < 3; ++b) {
          xs.push_back(random_feature(8, 8, 1, rng));
          ys.push_back(one_hot(b % 2, 2));
        }
        const double alpha = 1e-2;
        const LossResult at = loss_total(s, p, xs, ys, alpha);
        std::vector<std::span<const double>> grads;
        for_each_trainable(s, static_cast<const ParamStore&>(at.gradient),
                           [&](const std::string&, std::span<const double> g) { grads.push_back(g); });
        std::size_t t = 0, checked = 0;
        for_each_trainable(s, p, [&](const std::string& name, std::span<double> w) {
          const auto g = grads[t++];
          for (std::size_t i = 0; i < w.size(); ++i) {
            const double o = w[i], h = 1e-5;
            w[i] = o + h;
            const double up = loss_total(s, p, xs, ys, alpha).value;
            w[i] = o - h;
            const double down = loss_total(s, p, xs, ys, alpha).value;
            w[i] = o;
            const double fd = (up - down) / (2 * h);
            // Absolute floor for entries whose gradient is rounding noise.
            const double scale = std::max({std::abs(fd), std::abs(g[i]), 1e-4});
            EXPECT_LE(std::abs(fd - g[i]) / scale, 1e-4)
                << to_string(v) << " bn=" << bn << " " << to_string(pad) << " " << name << "[" << i << "]";
            ++checked;
          }
        });
        EXPECT_GT(checked, 100u);
      }
}

TEST(Regularizer, ShrinksWhenAnyFilterShrinks) {
  for (Variant v : {Variant::ResNetD, Variant::ResNetS}) {
    const NetworkSpec s = spec_of(v, false, Padding::Periodic);
    const ParamStore p = perturbed(s, 4);
    const double base = regularizer(s, p, 1e-3);
    std::size_t tensors = 0;
    ParamStore probe = p;
    for_each_trainable(s, probe, [&](const std::string&, std::span<double>) { ++tensors; });
    for (std::size_t t = 0; t < tensors; ++t) {
      ParamStore q = p;
      std::size_t i = 0;
      std::string name;
      for_each_trainable(s, q, [&](const std::string& n, std::span<double> w) {
        if (i++ == t) {
          name = n;
          for (double& x : w) x *= 0.5;
        }
      });
      const double r = regularizer(s, q, 1e-3);
      EXPECT_LE(r, base) << name;
    }
  }
}

TEST(Regularizer, GradientAndPenaltyForms) {
  const NetworkSpec d = spec_of(Variant::ResNetD, false, Padding::Periodic);
  ParamStore p = zero_params(d);
  p.first.k.data()[0] = -2.0;
  p.w.data()[1] = 3.0;
  p.residual[0].k2.data()[0] = 4.0;
  ParamStore g = zero_params(d);
  EXPECT_DOUBLE_EQ(regularizer(d, p, 0.5, &g), 0.5 * (2.0 + 3.0) + 0.25 * 16.0);
  EXPECT_EQ(g.first.k.data()[0], -0.5);
  EXPECT_EQ(g.first.k.data()[1], 0.0);
  EXPECT_EQ(g.w.data()[1], 0.5);
  EXPECT_EQ(g.residual[0].k2.data()[0], 2.0);
}

TEST(Init, DenseTruncatedAtTwoSigma) {
  NetworkSpec s;
  s.d1 = 8;
  s.classes = 10;
  const double sigma = 1.0 / (32.0 * 10.0);
  for (std::uint64_t seed = 1; seed <= 20; ++seed)
    for (double w : init_params(s, seed).w.data()) EXPECT_LE(std::abs(w), 2.0 * sigma);
}

TEST(Init, VarianceScaling) {
  std::mt19937_64 rng(5);
  Filter k(3, 16, 70);  // 10080 samples, fan_in 144
  variance_scaling(k, rng);
  double sq = 0.0;
  for (double v : k.data()) sq += v * v;
  const double var = sq / static_cast<double>(k.size());
  EXPECT_NEAR(var / (2.0 / 144.0), 1.0, 0.2);
}

TEST(Init, UniformScaling) {
  std::mt19937_64 rng(6);
  Filter k(3, 16, 70);
  uniform_scaling(k, rng);
  double sq = 0.0;
  for (double v : k.data()) {
    sq += v * v;
    EXPECT_LE(std::abs(v), std::sqrt(3.0 / 144.0));
  }
  EXPECT_NEAR(sq / static_cast<double>(k.size()) / (1.0 / 144.0), 1.0, 0.2);
}

TEST(Init, DeterministicAndFeasible) {
  const NetworkSpec s = spec_of(Variant::ResNetD, true, Padding::Periodic);
  const ParamStore a = init_params(s, 9), b = init_params(s, 9);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == init_params(s, 10));
  for (const auto& r : a.residual) {
    for (double v : r.k2.data()) EXPECT_GE(v, 0.0);
    EXPECT_EQ(r.bn1.gamma, std::vector<double>(r.bn1.gamma.size(), 1.0));
  }
}

TEST(Projection, IdempotentAndSatisfiesFlags) {
  for (Variant v : {Variant::ResNetD, Variant::ResNetS}) {
    const NetworkSpec s = spec_of(v, false, Padding::Periodic);
    ParamStore p = perturbed(s, 11);
    for (auto& r : p.residual) {
      for (double& x : r.k1.data()) x *= 5.0;
      if (!r.k2.empty()) r.k2.data()[0] = -1.0;
    }
    for (double& x : p.w.data()) x *= 100.0;
    TrainConfig cfg;
    cfg.spectral_rescale = cfg.boundary_rescale = true;
    project(s, cfg, p);
    const ParamStore once = p;
    project(s, cfg, p);
    EXPECT_TRUE(p == once);
    const StabilityCertificate c = assemble_certificate(s, p);
    EXPECT_TRUE(c.flags.first_conv && c.flags.dense && c.flags.residual) << to_string(v);
  }
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  const NetworkSpec s = spec_of(Variant::ResNetS, false, Padding::Periodic);
  TrainConfig cfg = short_run();
  cfg.learning_rate = 0.0;
  cfg.total_steps = cfg.decay_steps = 5;
  const ParamStore init = init_params(s, 1);
  const TrainResult r = train(s, cfg, tiny_bars(), init);
  EXPECT_TRUE(r.params == init);
  EXPECT_EQ(r.history.size(), 5u);
}

TEST(Train, DeterministicHistory) {
  const NetworkSpec s = spec_of(Variant::ResNetD, true, Padding::Periodic);
  const DatasetSplit data = tiny_bars();
  const TrainResult a = train(s, short_run(), data), b = train(s, short_run(), data);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].loss, b.history[i].loss);
    EXPECT_EQ(a.history[i].learning_rate, b.history[i].learning_rate);
  }
  EXPECT_TRUE(a.params == b.params);
}

TEST(Train, StepDecaySchedule) {
  const NetworkSpec s = spec_of(Variant::ResNetS, false, Padding::Periodic);
  TrainConfig cfg = short_run();
  cfg.total_steps = 45;
  const TrainResult r = train(s, cfg, tiny_bars());
  EXPECT_DOUBLE_EQ(r.history[0].learning_rate, 0.003);
  EXPECT_DOUBLE_EQ(r.history[19].learning_rate, 0.003);
  EXPECT_NEAR(r.history[20].learning_rate, 0.0003, 1e-18);
  EXPECT_NEAR(r.history[44].learning_rate, 0.00003, 1e-18);
  EXPECT_FALSE(std::isnan(r.history[19].test_accuracy));
  EXPECT_TRUE(std::isnan(r.history[18].test_accuracy));
  EXPECT_FALSE(std::isnan(r.history.back().test_accuracy));
}

TEST(Train, SparsePenaltyStillDescends) {
  // ResNet-D uses l1 penalties on the boundary layers; with the zero
  // subgradient at 0 the loss still falls on a separable toy set.
  const NetworkSpec s = spec_of(Variant::ResNetD, false, Padding::Periodic, 4);
  TrainConfig cfg = short_run();
  cfg.total_steps = cfg.decay_steps = 100;
  cfg.alpha = 1e-3;
  cfg.certify_history = false;
  const TrainResult r = train(s, cfg, tiny_bars(128, 32));
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += r.history[i].loss;
    tail += r.history[r.history.size() - 1 - i].loss;
  }
  EXPECT_LT(tail, head);
}

TEST(Train, ProjectedRunKeepsFlags) {
  const NetworkSpec s = spec_of(Variant::ResNetS, false, Padding::Periodic);
  TrainConfig cfg = short_run();
  cfg.spectral_rescale = cfg.boundary_rescale = true;
  const TrainResult r = train(s, cfg, tiny_bars());
  EXPECT_TRUE(assemble_certificate(s, r.params).growth_valid);
}

TEST(Train, ConfigValidation) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.learning_rate = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.total_steps = 10;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(History, CsvColumns) {
  std::vector<HistoryEntry> h(2);
  h[0].step = 1;
  h[0].learning_rate = 0.5;
  h[0].loss = 2.0;
  h[1].step = 2;
  h[1].learning_rate = 0.5;
  h[1].loss = 1.0;
  h[1].test_accuracy = 0.75;
  h[1].c = 3.0;
  h[1].a = 4.0;
  std::ostringstream out;
  write_history(out, h);
  EXPECT_EQ(out.str(), "step,learning_rate,loss,test_accuracy,c,a\n1,0.5,2,,,\n2,0.5,1,0.75,3,4\n");
}

TEST(Data, SyntheticBarsAreSeededAndBalanced) {
  SyntheticConfig cfg;
  const DatasetSplit a = synthetic_bars(cfg), b = synthetic_bars(cfg);
  EXPECT_EQ(a.train.images, b.train.images);
  EXPECT_EQ(a.train.size(), 512u);
  EXPECT_EQ(a.test.size(), 256u);
  std::size_t ones = 0;
  for (std::size_t i = 0; i < a.train.size(); ++i) ones += a.train.label(i);
  EXPECT_EQ(ones, 256u);
  EXPECT_NO_THROW(a.train.validate());
  cfg.seed = 8;
  EXPECT_NE(synthetic_bars(cfg).train.images, a.train.images);
}

TEST(Data, NormalizationStandardizesTrainingSet) {
  DatasetSplit d = synthetic_bars(SyntheticConfig{});
  const Normalization n = fit_normalization(d.train);
  apply_normalization(d.train, n);
  double sum = 0.0, sq = 0.0, count = 0.0;
  for (const auto& x : d.train.images)
    for (double v : x.data()) {
      sum += v;
      sq += v * v;
      count += 1.0;
    }
  EXPECT_NEAR(sum / count, 0.0, 1e-12);
  EXPECT_NEAR(sq / count, 1.0, 1e-9);
}

TEST(Data, IdxRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "stbl_idx_test";
  std::filesystem::create_directories(dir);
  SyntheticConfig cfg;
  cfg.train = 10;
  cfg.test = 1;
  const Dataset d = synthetic_bars(cfg).train;
  const std::string img = (dir / "img.idx").string(), lab = (dir / "lab.idx").string();
  write_idx(img, lab, d);
  const Dataset back = read_idx(img, lab, 2);
  EXPECT_EQ(back.images, d.images);
  EXPECT_EQ(back.labels, d.labels);
  std::filesystem::remove_all(dir);
}

TEST(Data, IdxRejectsMissingFile) {
  EXPECT_ANY_THROW(read_idx("/nonexistent/a.idx", "/nonexistent/b.idx"));
}
