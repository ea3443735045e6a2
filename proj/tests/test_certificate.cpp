#include <gtest/gtest.h>

#include <sstream>

#include "stbl/certificate.hpp"
#include "stbl/train.hpp"
#include "support.hpp"

using namespace stbl;
using namespace stbl::test;

namespace {

NetworkSpec spec_of(Variant v, std::size_t m) {
  NetworkSpec s;
  s.variant = v;
  s.m = m;
  s.d1 = 2;
  return s;
}

ParamStore with_biases(const NetworkSpec& spec, std::uint64_t seed) {
  ParamStore p = init_params(spec, seed);
  std::mt19937_64 rng(seed * 7 + 1);
  fill_normal(p.first.b, rng, 0.1);
  for (auto& r : p.residual) {
    fill_normal(r.b1, rng, 0.1);
    fill_normal(r.b2, rng, 0.1);
  }
  for (auto& c : p.pool) fill_normal(c.b, rng, 0.1);
  fill_normal(p.dense_bias, rng, 0.1);
  return p;
}

double row_sum_norm(const DenseMatrix& a) {
  double best = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) best = std::max(best, l1(a.row(r)));
  return best;
}

}  // namespace

TEST(PowerIteration, DiagonalGram) {
  const std::vector<double> diag{1.0, 9.0, 4.0, 0.5};
  auto gram = [&](std::span<const double> v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) r[i] = diag[i] * v[i];
    return r;
  };
  EXPECT_NEAR(power_iteration(4, gram).value, 3.0, 1e-9);
}

TEST(PowerIteration, DegenerateTopPair) {
  // Two equal top eigenvalues and a close third stall plain power iteration.
  const std::vector<double> diag{2.0, 2.0, 1.999, 0.3, 1.998};
  auto gram = [&](std::span<const double> v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) r[i] = diag[i] * v[i];
    return r;
  };
  EXPECT_NEAR(power_iteration(5, gram).value, std::sqrt(2.0), 1e-9);
}

TEST(PowerIteration, ZeroOperator) {
  auto gram = [](std::span<const double> v) { return std::vector<double>(v.size(), 0.0); };
  EXPECT_EQ(power_iteration(6, gram).value, 0.0);
}

TEST(OpNormL2, ScaledIdentityAndZero) {
  Filter k(3, 2, 2);
  k(0, 0, 1, 1) = 2.0;
  k(1, 1, 1, 1) = 2.0;
  EXPECT_NEAR(opnorm_l2(k, 5, 5).value, 2.0, 1e-9);
  EXPECT_EQ(opnorm_l2(Filter(3, 2, 2), 5, 5).value, 0.0);
}

TEST(OpNormL2, MatchesDenseSvd) {
  std::mt19937_64 rng(1);
  for (std::size_t a : {1, 2})
    for (Padding p : {Padding::Zero, Padding::Periodic})
      for (int t = 0; t < 5; ++t) {
        const Filter k = random_filter(3, 2, 2 * a, rng);
        const double want = largest_singular_value(materialize(k, 6, 6, a, p));
        EXPECT_NEAR(opnorm_l2(k, 6, 6, a, p).value, want, 1e-8 * want);
      }
  DenseMatrix w(3, 7);
  fill_normal(w.data(), rng);
  EXPECT_NEAR(opnorm_l2(w).value, largest_singular_value(w), 1e-8);
}

TEST(OpNormLinf, Examples) {
  EXPECT_EQ(opnorm_linf(Filter(3, 1, 1, std::vector<double>(9, 1.0)), 5, 5), 9.0);
  Filter id(3, 1, 1);
  id(0, 0, 1, 1) = 1.0;
  EXPECT_EQ(opnorm_linf(id, 4, 4), 1.0);
}

TEST(OpNormLinf, ExactAgainstDenseRowSums) {
  // Entries are multiples of 1/8, so every row sum is exact in binary.
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> q(-16, 16);
  for (int t = 0; t < 100; ++t) {
    Filter k(2 + t % 2, 2, 3);
    for (double& v : k.data()) v = q(rng) / 8.0;
    const std::size_t h = 1 + t % 6, w = 1 + (t / 6) % 6;
    const double periodic = opnorm_linf(k, h, w, Padding::Periodic);
    const double zero = opnorm_linf(k, h, w, Padding::Zero);
    EXPECT_EQ(periodic, row_sum_norm(materialize(k, h, w, 1, Padding::Periodic)));
    EXPECT_EQ(zero, row_sum_norm(materialize(k, h, w, 1, Padding::Zero)));
    // With n <= h, w the periodic rows touch every tap once; smaller grids fold taps together.
    if (h >= k.n() && w >= k.n()) {
      EXPECT_LE(zero, periodic);
    }
  }
}

TEST(Certificate, ZeroBiasesGiveZeroC) {
  for (Variant v : {Variant::ResNetD, Variant::ResNetS}) {
    const NetworkSpec s = spec_of(v, 2);
    const StabilityCertificate c = assemble_certificate(s, init_params(s, 3));
    EXPECT_EQ(c.c, 0.0);
    EXPECT_EQ(c.layers.size(), s.num_layers());
  }
}

TEST(Certificate, ZeroModel) {
  const NetworkSpec s = spec_of(Variant::ResNetS, 1);
  const StabilityCertificate c = assemble_certificate(s, zero_params(s));
  EXPECT_EQ(c.c, 0.0);
  EXPECT_EQ(c.a, 1.0);
  EXPECT_TRUE(c.growth_valid && c.sensitivity_valid);
}

TEST(Certificate, ResnetDTermByTerm) {
  const NetworkSpec s = spec_of(Variant::ResNetD, 1);
  const ParamStore p = with_biases(s, 4);
  const StabilityCertificate cert = assemble_certificate(s, p);
  const StageDims s0 = s.stage(0), s1 = s.stage(1);
  const double first = largest_singular_value(materialize(p.first.k, 8, 8));
  const auto& r = p.residual[0];
  const double res = 1.0 + largest_singular_value(materialize(r.k1, s0.height, s0.width)) *
                               largest_singular_value(materialize(r.k2, s0.height, s0.width));
  const double pool0 = 1.0 + largest_singular_value(materialize(p.pool[0].k, s0.height, s0.width, 2));
  const double pool1 = 1.0 + largest_singular_value(materialize(p.pool[1].k, s1.height, s1.width, 2));
  const double dense = largest_singular_value(p.w);
  const double a = first * res * pool0 * pool1 * dense;
  EXPECT_NEAR(cert.a, a, 1e-8 * a);
  const double c = max_abs(p.first.b) + max_abs(r.b2) + max_abs(p.dense_bias);
  EXPECT_NEAR(cert.c, c, 1e-14);
}

TEST(Certificate, ResnetSTermByTerm) {
  const NetworkSpec s = spec_of(Variant::ResNetS, 2);
  const ParamStore p = with_biases(s, 5);
  const StabilityCertificate cert = assemble_certificate(s, p);
  const StageDims s0 = s.stage(0), s1 = s.stage(1);
  const double a = (1.0 + largest_singular_value(materialize(p.pool[0].k, s0.height, s0.width, 2))) *
                   (1.0 + largest_singular_value(materialize(p.pool[1].k, s1.height, s1.width, 2)));
  EXPECT_NEAR(cert.a, a, 1e-8 * a);
  double c = std::sqrt(64.0) * l2(p.first.b) + l2(p.dense_bias);
  for (const auto& info : s.schedule()) {
    if (info.kind != LayerKind::Residual) continue;
    const StageDims d = s.stage(info.stage);
    const double area = std::sqrt(static_cast<double>(d.height * d.width));
    c += std::sqrt(2.0) * area * l2(p.residual[info.slot].b1) + area * l2(p.residual[info.slot].b2);
  }
  EXPECT_NEAR(cert.c, c, 1e-12 * c);
}

TEST(Certificate, ResnetSConstantIndependentOfDepth) {
  NetworkSpec base = spec_of(Variant::ResNetS, 1);
  const ParamStore p1 = with_biases(base, 6);
  double a1 = 0.0;
  for (std::size_t m = 1; m <= 4; ++m) {
    NetworkSpec s = base;
    s.m = m;
    ParamStore p = with_biases(s, 100 + m);
    p.first = p1.first;
    p.pool = p1.pool;
    p.w = p1.w;
    p.dense_bias = p1.dense_bias;
    const double a = assemble_certificate(s, p).a;
    if (m == 1) a1 = a;
    EXPECT_EQ(a, a1);
  }
}

TEST(Certificate, MonotoneInBiasAndFilterScale) {
  for (Variant v : {Variant::ResNetD, Variant::ResNetS}) {
    const NetworkSpec s = spec_of(v, 1);
    const ParamStore p = with_biases(s, 7);
    const StabilityCertificate base = assemble_certificate(s, p);
    ParamStore q = p;
    for (double& b : q.residual[0].b2) b *= 2.0;
    EXPECT_GE(assemble_certificate(s, q).c, base.c);
    q = p;
    for (double& k : q.pool[0].k.data()) k *= 1.5;
    EXPECT_GE(assemble_certificate(s, q).a, base.a);
    q = p;
    for (double& k : q.residual[0].k1.data()) k *= 1.5;
    EXPECT_GE(assemble_certificate(s, q).a, base.a);
  }
}

TEST(Certificate, FlagsFollowConstraints) {
  const NetworkSpec s = spec_of(Variant::ResNetD, 1);
  ParamStore p = init_params(s, 8);
  TrainConfig cfg;
  cfg.boundary_rescale = true;
  project(s, cfg, p);
  EXPECT_TRUE(assemble_certificate(s, p).growth_valid);
  for (double& w : p.w.data()) w *= 50.0;
  const StabilityCertificate bad = assemble_certificate(s, p);
  EXPECT_FALSE(bad.flags.dense);
  EXPECT_FALSE(bad.growth_valid);
}

TEST(Certificate, WriteIsStable) {
  const NetworkSpec s = spec_of(Variant::ResNetS, 1);
  const StabilityCertificate c = assemble_certificate(s, with_biases(s, 9));
  std::ostringstream a, b;
  write_certificate(a, c);
  write_certificate(b, assemble_certificate(s, with_biases(s, 9), {PowerOptions{}, 3}));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_NE(a.str().find("a: "), std::string::npos);
}

TEST(Verify, ZeroNetworkGrowth) {
  const NetworkSpec s = spec_of(Variant::ResNetD, 1);
  const ParamStore p = zero_params(s);
  const StabilityCertificate c = assemble_certificate(s, p);
  std::mt19937_64 rng(10);
  std::vector<Feature> xs{random_feature(8, 8, 1, rng), random_feature(8, 8, 1, rng)};
  const VerifyReport r = verify_growth(s, p, xs, c);
  EXPECT_TRUE(r.passed());
  EXPECT_EQ(r.checked, 2u);
}

TEST(Verify, SkipsWithDiagnosticWhenFlagsFail) {
  const NetworkSpec s = spec_of(Variant::ResNetD, 1);
  ParamStore p = init_params(s, 11);
  TrainConfig cfg;
  cfg.boundary_rescale = true;
  project(s, cfg, p);
  const double scale = 5.0 / opnorm_linf(p.w);
  for (double& w : p.w.data()) w *= scale;
  const StabilityCertificate c = assemble_certificate(s, p);
  EXPECT_FALSE(c.flags.dense);
  std::mt19937_64 rng(12);
  std::vector<Feature> xs{random_feature(8, 8, 1, rng)};
  const VerifyReport r = verify_growth(s, p, xs, c);
  EXPECT_TRUE(r.skipped);
  EXPECT_FALSE(r.diagnostic.empty());
}

TEST(Verify, IdenticalPairsHaveZeroShift) {
  const NetworkSpec s = spec_of(Variant::ResNetS, 1);
  ParamStore p = with_biases(s, 13);
  TrainConfig cfg;
  cfg.spectral_rescale = cfg.boundary_rescale = true;
  project(s, cfg, p);
  std::mt19937_64 rng(14);
  const Feature x = random_feature(8, 8, 1, rng);
  std::vector<std::pair<Feature, Feature>> pairs{{x, x}};
  const VerifyReport r = verify_sensitivity(s, p, pairs, assemble_certificate(s, p));
  EXPECT_TRUE(r.passed());
}

TEST(Verify, ResnetDCampaign) {
  std::mt19937_64 rng(15);
  for (std::size_t m = 1; m <= 3; ++m) {
    const NetworkSpec s = spec_of(Variant::ResNetD, m);
    ParamStore p = with_biases(s, 20 + m);
    TrainConfig cfg;
    cfg.boundary_rescale = true;
    project(s, cfg, p);
    const StabilityCertificate c = assemble_certificate(s, p);
    ASSERT_TRUE(c.growth_valid);
    std::vector<Feature> xs;
    std::vector<std::pair<Feature, Feature>> pairs;
    for (int i = 0; i < 10; ++i) {
      xs.push_back(random_feature(8, 8, 1, rng));
      pairs.emplace_back(random_feature(8, 8, 1, rng), random_feature(8, 8, 1, rng));
    }
    EXPECT_TRUE(verify_growth(s, p, xs, c).passed());
    EXPECT_TRUE(verify_sensitivity(s, p, pairs, c).passed());
  }
}

TEST(Verify, ResnetSRatioBelowConstantAcrossDepths) {
  std::mt19937_64 rng(16);
  const NetworkSpec base = spec_of(Variant::ResNetS, 1);
  ParamStore shared = with_biases(base, 30);
  TrainConfig cfg;
  cfg.spectral_rescale = cfg.boundary_rescale = true;
  project(base, cfg, shared);
  double a_prev = -1.0;
  for (std::size_t m = 1; m <= 4; ++m) {
    NetworkSpec s = base;
    s.m = m;
    ParamStore p = with_biases(s, 40 + m);
    p.first = shared.first;
    p.pool = shared.pool;
    p.w = shared.w;
    p.dense_bias = shared.dense_bias;
    project(s, cfg, p);
    const StabilityCertificate c = assemble_certificate(s, p);
    ASSERT_TRUE(c.sensitivity_valid);
    if (a_prev >= 0.0) {
      EXPECT_EQ(c.a, a_prev);
    }
    a_prev = c.a;
    std::vector<std::pair<Feature, Feature>> pairs;
    for (int i = 0; i < 20; ++i) {
      Feature x = random_feature(8, 8, 1, rng), y = x;
      for (double& v : y.data()) v += 0.05 * std::normal_distribution<double>(0.0, 1.0)(rng);
      pairs.emplace_back(std::move(x), std::move(y));
    }
    const VerifyReport r = verify_sensitivity(s, p, pairs, c);
    EXPECT_TRUE(r.passed());
    EXPECT_LE(r.max_ratio, c.a);
  }
}

TEST(Lemma, ZeroOperatorIsIdentity) {
  const LemmaReport r = check_lemma_nonexpansive(DenseMatrix(1, 1), std::vector<double>{0.0}, 1000);
  EXPECT_EQ(r.violations, 0u);
  EXPECT_NEAR(r.max_ratio, 1.0, 1e-12);
}

TEST(Lemma, ScalarRootTwoHolds) {
  DenseMatrix a(1, 1, {std::sqrt(2.0)});
  const LemmaReport r = check_lemma_nonexpansive(a, std::vector<double>{0.0}, 100000);
  EXPECT_TRUE(r.hypothesis);
  EXPECT_EQ(r.violations, 0u);
  EXPECT_LE(r.max_ratio, 1.0 + 1e-9);
}

TEST(Lemma, ScalarAboveBoundExpands) {
  DenseMatrix a(1, 1, {2.1});
  const LemmaReport r = check_lemma_nonexpansive(a, std::vector<double>{0.0}, 10000);
  EXPECT_FALSE(r.hypothesis);
  EXPECT_GT(r.max_ratio, 1.0);
  EXPECT_LE(r.max_ratio, 3.41 + 1e-9);
  EXPECT_EQ(r.witness_x.size(), 1u);
}

TEST(Lemma, ScalarThreeHasSlopeMinusEight) {
  DenseMatrix a(1, 1, {3.0});
  const LemmaReport r = check_lemma_nonexpansive(a, std::vector<double>{0.0}, 10000);
  EXPECT_NEAR(r.max_ratio, 8.0, 1e-9);
}

TEST(Lemma, ConvolutionFormUnderSpectralBound) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 5; ++t) {
    Filter k = random_filter(3, 2, 2, rng);
    const double s = opnorm_l2(k, 4, 4).value;
    for (double& v : k.data()) v *= std::sqrt(2.0) / s * 0.999;
    std::vector<double> b(2);
    fill_normal(b, rng);
    const LemmaReport r = check_lemma_nonexpansive(k, 4, 4, b, 2000, t + 1);
    EXPECT_TRUE(r.hypothesis);
    EXPECT_EQ(r.violations, 0u);
  }
}
