#include "stbl/certificate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <utility>

#include <Eigen/Eigenvalues>

#include "stbl/parallel.hpp"

namespace stbl {

namespace {

const double kSqrt2 = std::sqrt(2.0);
constexpr std::size_t kStagnationWindow = 25;
constexpr std::size_t kStagnationBudget = 400;

std::vector<double> random_unit(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim);
  for (double& x : v) x = normal(rng);
  const double n = norm(v, Norm::l2());
  for (double& x : v) x /= n;
  return v;
}

// Lanczos with full reorthogonalization on the same Gram operator, started
// from v. Used when the power iterate contracts too slowly (clustered top
// singular values). Stops when the Ritz residual beta |s_k| of the largest
// Ritz value drops to tol * theta. Returns lambda_max, not its square root.
double lanczos_top(std::size_t dim,
                   const std::function<std::vector<double>(std::span<const double>)>& gram,
                   std::vector<double> v, double tol, std::size_t max_steps, std::size_t& steps) {
  std::vector<std::vector<double>> basis;
  std::vector<double> alpha, beta;
  const double nv = norm(v, Norm::l2());
  for (double& x : v) x /= nv;
  double theta = 0.0;
  const std::size_t limit = std::min(dim, max_steps);
  for (std::size_t k = 0; k < limit; ++k) {
    std::vector<double> w = gram(v);
    const double a = dot(w, v);
    basis.push_back(std::move(v));
    alpha.push_back(a);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& q : basis) {
        const double c = dot(w, q);
        for (std::size_t i = 0; i < dim; ++i) w[i] -= c * q[i];
      }
    }
    const double b = norm(w, Norm::l2());
    steps = k + 1;

    Eigen::VectorXd diag = Eigen::Map<const Eigen::VectorXd>(alpha.data(), static_cast<Eigen::Index>(alpha.size()));
    Eigen::VectorXd sub = Eigen::Map<const Eigen::VectorXd>(beta.data(), static_cast<Eigen::Index>(beta.size()));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> tri;
    tri.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
    const Eigen::Index top = diag.size() - 1;  // eigenvalues ascend
    theta = tri.eigenvalues()(top);
    const double residual = b * std::abs(tri.eigenvectors()(top, top));
    if (theta <= 0.0 && b == 0.0) return 0.0;
    if (residual <= tol * theta || b <= 1e-14 * std::max(theta, 1e-300)) return theta;

    beta.push_back(b);
    v = std::move(w);
    for (double& x : v) x /= b;
  }
  throw ConvergenceError("Lanczos safeguard did not converge in " + std::to_string(limit) + " steps",
                         std::sqrt(std::max(theta, 0.0)), steps);
}

bool within(double value, double limit) { return value <= limit * (1.0 + kFlagTolerance); }

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

OpNormEstimate power_iteration(std::size_t dim,
                               const std::function<std::vector<double>(std::span<const double>)>& gram,
                               const PowerOptions& options) {
  if (!(options.tol > 0.0)) throw std::invalid_argument("power iteration tolerance must be positive");
  if (dim == 0) return {};
  std::mt19937_64 rng(options.seed);
  std::vector<double> v = random_unit(dim, rng);
  bool restarted = false;
  double lambda_prev = -1.0;
  double delta_prev = std::numeric_limits<double>::infinity();
  double delta_window = 0.0;
  double lambda = 0.0;

  for (std::size_t it = 1; it <= options.max_iter; ++it) {
    std::vector<double> y = gram(v);
    const double ny = norm(y, Norm::l2());
    if (!std::isfinite(ny)) {
      throw ConvergenceError("power iteration produced a non-finite iterate", lambda, it);
    }
    if (ny == 0.0) {
      // Either the operator is zero or the start vector hit its null space.
      if (it == 1 && !restarted) {
        restarted = true;
        v = random_unit(dim, rng);
        continue;
      }
      return {0.0, it};
    }
    lambda = dot(v, y);
    if (lambda_prev >= 0.0) {
      // Rayleigh quotients of a PSD operator never decrease in exact
      // arithmetic; a drop means the iterate broke down, so start over once.
      if (lambda < lambda_prev * (1.0 - 1e-12) && !restarted) {
        restarted = true;
        v = random_unit(dim, rng);
        lambda_prev = -1.0;
        delta_prev = std::numeric_limits<double>::infinity();
        continue;
      }
      const double delta = std::abs(lambda - lambda_prev);
      // Geometric tail estimate: with contraction r the remaining change is
      // about delta r / (1 - r). Slow contraction needs more iterations.
      const double r = delta_prev > 0.0 ? delta / delta_prev : 0.0;
      if (delta <= options.tol * lambda) {
        const double tail = r < 1.0 ? delta * r / (1.0 - r) : std::numeric_limits<double>::infinity();
        if (delta == 0.0 || tail <= options.tol * lambda) return {std::sqrt(lambda), it};
      }
      // Stagnation: a projected constraint tends to pile singular values up at
      // the bound, and then r creeps toward 1. Rather than spend thousands of
      // products, hand the current iterate to a Krylov solve.
      if (it % kStagnationWindow == 0 && delta > 0.0) {
        bool slow = false;
        if (delta_window > 0.0) {
          const double ratio = std::pow(delta / delta_window, 1.0 / kStagnationWindow);
          slow = ratio >= 1.0 ||
                 std::log(options.tol * lambda * (1.0 - ratio) / delta) / std::log(ratio) >
                     static_cast<double>(kStagnationBudget);
        }
        if (slow) {
          for (std::size_t i = 0; i < dim; ++i) v[i] = y[i] / ny;
          std::size_t steps = 0;
          const std::size_t budget = options.max_iter > it ? options.max_iter - it : 1;
          const double top = lanczos_top(dim, gram, v, options.tol, budget, steps);
          return {std::sqrt(std::max(top, lambda)), it + steps};
        }
        delta_window = delta;
      }
      delta_prev = delta;
    }
    lambda_prev = lambda;
    for (std::size_t i = 0; i < dim; ++i) v[i] = y[i] / ny;
  }
  throw ConvergenceError("power iteration did not converge in " +
                             std::to_string(options.max_iter) + " iterations",
                         std::sqrt(std::max(lambda, 0.0)), options.max_iter);
}

OpNormEstimate opnorm_l2(const Filter& k, std::size_t height, std::size_t width, std::size_t stride,
                         Padding pad, const PowerOptions& options) {
  const std::size_t d_in = k.d_in();
  auto gram = [&](std::span<const double> v) {
    const Feature x = devectorize(v, height, width, d_in);
    return vectorize(adjoint_conv(conv2d(x, k, stride, pad), k, stride, pad, height, width));
  };
  return power_iteration(height * width * d_in, gram, options);
}

OpNormEstimate opnorm_l2(const DenseMatrix& a, const PowerOptions& options) {
  auto gram = [&](std::span<const double> v) { return a.multiply_transposed(a.multiply(v)); };
  return power_iteration(a.cols(), gram, options);
}

double opnorm_linf(const Filter& k, std::size_t height, std::size_t width, Padding pad) {
  // Taps are generated in the same order as the dense materialization so that
  // wrapped collisions accumulate identically; row sums then run in column order.
  const std::size_t n = k.n();
  const auto h = static_cast<std::ptrdiff_t>(height), w = static_cast<std::ptrdiff_t>(width);
  const auto c = static_cast<std::ptrdiff_t>((n - 1) / 2);
  auto resolve = [&](std::ptrdiff_t idx, std::ptrdiff_t len) -> std::ptrdiff_t {
    if (idx >= 0 && idx < len) return idx;
    if (pad == Padding::Zero) return -1;
    const std::ptrdiff_t r = idx % len;
    return r < 0 ? r + len : r;
  };
  std::vector<std::pair<std::size_t, double>> taps;
  taps.reserve(n * n * k.d_in());
  double best = 0.0;
  for (std::size_t j = 0; j < k.d_out(); ++j) {
    for (std::size_t oi = 0; oi < height; ++oi) {
      for (std::size_t oj = 0; oj < width; ++oj) {
        taps.clear();
        for (std::size_t i = 0; i < k.d_in(); ++i) {
          for (std::size_t u = 0; u < n; ++u) {
            const auto r = resolve(static_cast<std::ptrdiff_t>(oi + u) - c, h);
            if (r < 0) continue;
            for (std::size_t v = 0; v < n; ++v) {
              const auto s = resolve(static_cast<std::ptrdiff_t>(oj + v) - c, w);
              if (s < 0) continue;
              taps.emplace_back(i * height * width + static_cast<std::size_t>(r * w + s),
                                k(i, j, u, v));
            }
          }
        }
        std::stable_sort(taps.begin(), taps.end(),
                         [](const auto& x, const auto& y) { return x.first < y.first; });
        double row = 0.0;
        for (std::size_t t = 0; t < taps.size();) {
          double entry = 0.0;
          const std::size_t col = taps[t].first;
          for (; t < taps.size() && taps[t].first == col; ++t) entry += taps[t].second;
          row += std::abs(entry);
        }
        best = std::max(best, row);
      }
    }
  }
  return best;
}

double opnorm_linf(const DenseMatrix& a) {
  double best = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) best = std::max(best, norm(a.row(r), Norm::l1()));
  return best;
}

// ---------------------------------------------------------------------------

StabilityCertificate assemble_certificate(const NetworkSpec& spec, const ParamStore& params,
                                          const CertifyOptions& options) {
  const EffectiveNetwork net = effective_network(spec, params);
  const bool is_d = spec.variant == Variant::ResNetD;
  const Norm bias_kind = is_d ? Norm::linf() : Norm::l2();
  const auto schedule = spec.schedule();

  StabilityCertificate cert;
  cert.variant = spec.variant;
  cert.m = spec.m;
  cert.growth_norm = bias_kind;
  cert.layers.resize(schedule.size());

  // Each layer is independent; results land in fixed slots.
  parallel_for(schedule.size(), options.threads, [&](std::size_t idx) {
    const LayerInfo& info = schedule[idx];
    LayerCertificate& lc = cert.layers[idx];
    lc.layer = info.index;
    lc.kind = info.kind;
    lc.stage = info.stage;
    const StageDims dims = spec.stage(info.stage);
    switch (info.kind) {
      case LayerKind::Conv: {
        lc.norm_a = opnorm_l2(net.first.k, spec.height, spec.width, 1, spec.padding,
                              options.power).value;
        lc.norm_linf = opnorm_linf(net.first.k, spec.height, spec.width, spec.padding);
        lc.bias_norm = bias_norm(net.first.b, spec.height, spec.width, bias_kind);
        lc.factor = is_d ? lc.norm_a : 1.0;
        lc.constraint_ok = is_d ? within(lc.norm_linf, 1.0) : within(lc.norm_a, 1.0);
        break;
      }
      case LayerKind::Residual: {
        const EffectiveResidual& r = net.residual[info.slot];
        lc.norm_a = opnorm_l2(r.k1, dims.height, dims.width, 1, spec.padding, options.power).value;
        lc.norm_b = r.symmetric() ? lc.norm_a
                                  : opnorm_l2(r.k2, dims.height, dims.width, 1, spec.padding,
                                              options.power)
                                        .value;
        if (is_d) {
          lc.bias_norm = bias_norm(r.b2, dims.height, dims.width, bias_kind);
          lc.factor = 1.0 + lc.norm_a * lc.norm_b;
          lc.constraint_ok = std::all_of(r.k2.data().begin(), r.k2.data().end(),
                                         [](double v) { return v >= 0.0; });
        } else {
          lc.bias_norm = kSqrt2 * bias_norm(r.b1, dims.height, dims.width, bias_kind) +
                         bias_norm(r.b2, dims.height, dims.width, bias_kind);
          lc.factor = 1.0;
          lc.constraint_ok = r.symmetric() && within(lc.norm_a, kSqrt2);
        }
        break;
      }
      case LayerKind::Pool: {
        const ConvParams& p = net.pool[info.slot];
        lc.norm_a = opnorm_l2(p.k, dims.height, dims.width, 2, spec.padding, options.power).value;
        lc.factor = 1.0 + lc.norm_a;
        break;
      }
      case LayerKind::Global:
        break;
      case LayerKind::Dense: {
        lc.norm_a = opnorm_l2(net.w, options.power).value;
        lc.norm_linf = opnorm_linf(net.w);
        lc.bias_norm = norm(net.dense_bias, bias_kind);
        lc.factor = is_d ? lc.norm_a : 1.0;
        lc.constraint_ok = is_d ? within(lc.norm_linf, 1.0) : within(lc.norm_a, 1.0);
        break;
      }
    }
  });

  cert.c = 0.0;
  cert.a = 1.0;
  for (const auto& lc : cert.layers) {
    cert.c += lc.bias_norm;
    cert.a *= lc.factor;
    switch (lc.kind) {
      case LayerKind::Conv: cert.flags.first_conv = lc.constraint_ok; break;
      case LayerKind::Dense: cert.flags.dense = lc.constraint_ok; break;
      case LayerKind::Residual: cert.flags.residual = cert.flags.residual && lc.constraint_ok; break;
      default: break;
    }
  }
  const bool all = cert.flags.first_conv && cert.flags.dense && cert.flags.residual;
  cert.growth_valid = all;
  // The ResNet-D sensitivity constant carries every factor and needs no hypothesis.
  cert.sensitivity_valid = is_d ? true : all;
  return cert;
}

void write_certificate(std::ostream& out, const StabilityCertificate& cert) {
  const bool is_d = cert.variant == Variant::ResNetD;
  auto flag = [](bool ok) { return ok ? "pass" : "FAIL"; };
  out << "certificate-version: 1\n"
      << "variant: " << to_string(cert.variant) << '\n'
      << "m: " << cert.m << '\n'
      << "growth-norm: " << (is_d ? "linf" : "l2") << '\n'
      << "sensitivity-norm: l2\n"
      << "c: " << fmt(cert.c) << '\n'
      << "a: " << fmt(cert.a) << '\n'
      << "flag.first-conv: " << flag(cert.flags.first_conv) << '\n'
      << "flag.dense: " << flag(cert.flags.dense) << '\n'
      << "flag.residual: " << flag(cert.flags.residual) << '\n'
      << "growth-bound: " << (cert.growth_valid ? "valid" : "conditional") << '\n'
      << "sensitivity-bound: " << (cert.sensitivity_valid ? "valid" : "conditional") << '\n'
      << "layers: " << cert.layers.size() << '\n'
      << "layer\tkind\tstage\tnorm_a\tnorm_b\tnorm_linf\tbias_term\tfactor\tconstraint\n";
  for (const auto& lc : cert.layers) {
    out << lc.layer << '\t' << to_string(lc.kind) << '\t' << lc.stage << '\t' << fmt(lc.norm_a)
        << '\t' << fmt(lc.norm_b) << '\t' << fmt(lc.norm_linf) << '\t' << fmt(lc.bias_norm) << '\t'
        << fmt(lc.factor) << '\t' << flag(lc.constraint_ok) << '\n';
  }
}

// ---------------------------------------------------------------------------

bool bound_holds(double lhs, double rhs) { return lhs <= rhs * (1.0 + 1e-9) + 1e-12; }

namespace {

std::string failed_flags(const StabilityCertificate& cert) {
  std::string s;
  if (!cert.flags.first_conv) s += " first-conv";
  if (!cert.flags.dense) s += " dense";
  if (!cert.flags.residual) s += " residual";
  return "hypothesis flags failed:" + s;
}

void finish(VerifyReport& report) {
  report.min_slack = std::numeric_limits<double>::infinity();
  for (const auto& e : report.entries) report.min_slack = std::min(report.min_slack, e.slack);
  if (report.entries.empty()) report.min_slack = 0.0;
}

}  // namespace

VerifyReport verify_growth(const NetworkSpec& spec, const ParamStore& params,
                           std::span<const Feature> inputs, const StabilityCertificate& cert) {
  VerifyReport report;
  if (!cert.growth_valid) {
    report.skipped = true;
    report.diagnostic = failed_flags(cert);
    return report;
  }
  const bool linf = cert.variant == Variant::ResNetD;
  const EffectiveNetwork net = effective_network(spec, params);
  for (const auto& x0 : inputs) {
    const ForwardTrace trace = forward(spec, net, x0);
    GrowthEntry e;
    e.input_norm = linf ? trace.linf.front() : trace.l2.front();
    e.output_norm = linf ? trace.linf.back() : trace.l2.back();
    e.bound = e.input_norm + cert.c;
    e.slack = e.bound - e.output_norm;
    e.ok = bound_holds(e.output_norm, e.bound);
    if (!e.ok) {
      ++report.violations;
      e.trace = linf ? trace.linf : trace.l2;
    }
    ++report.checked;
    report.entries.push_back(std::move(e));
  }
  finish(report);
  return report;
}

VerifyReport verify_sensitivity(const NetworkSpec& spec, const ParamStore& params,
                                std::span<const std::pair<Feature, Feature>> pairs,
                                const StabilityCertificate& cert) {
  VerifyReport report;
  if (!cert.sensitivity_valid) {
    report.skipped = true;
    report.diagnostic = failed_flags(cert);
    return report;
  }
  const EffectiveNetwork net = effective_network(spec, params);
  for (const auto& [x0, y0] : pairs) {
    const ForwardTrace tx = forward(spec, net, x0, true);
    const ForwardTrace ty = forward(spec, net, y0, true);
    std::vector<double> diff(x0.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = x0.data()[i] - y0.data()[i];
    GrowthEntry e;
    e.input_norm = norm(diff, Norm::l2());
    diff.resize(tx.logits.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = tx.logits[i] - ty.logits[i];
    e.output_norm = norm(diff, Norm::l2());
    e.bound = cert.a * e.input_norm;
    e.slack = e.bound - e.output_norm;
    e.ok = bound_holds(e.output_norm, e.bound);
    if (e.input_norm > 0.0) report.max_ratio = std::max(report.max_ratio, e.output_norm / e.input_norm);
    if (!e.ok) {
      ++report.violations;
      for (std::size_t s = 0; s < tx.features.size(); ++s) {
        const auto a = tx.features[s].data();
        const auto b = ty.features[s].data();
        double sq = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
        e.trace.push_back(std::sqrt(sq));
      }
    }
    ++report.checked;
    report.entries.push_back(std::move(e));
  }
  finish(report);
  return report;
}

// ---------------------------------------------------------------------------

namespace {

using Map = std::function<std::vector<double>(std::span<const double>)>;

LemmaReport sample_lemma(std::size_t dim, const Map& f, double opnorm, std::size_t trials,
                         std::uint64_t seed) {
  LemmaReport report;
  report.opnorm = opnorm;
  report.hypothesis = within(opnorm, kSqrt2);
  report.trials = trials;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> x(dim), y(dim);
  for (std::size_t t = 0; t < trials; ++t) {
    for (double& v : x) v = normal(rng);
    // Alternate far pairs with near pairs; near pairs probe local slopes.
    const double spread = (t % 2 == 0) ? 1.0 : 1e-3;
    // The offset has length exactly spread, so rounding in f stays far below
    // the violation tolerance even for near pairs.
    double len = 0.0;
    for (double& v : y) {
      v = normal(rng);
      len += v * v;
    }
    len = std::sqrt(len);
    if (len == 0.0) continue;
    for (std::size_t i = 0; i < dim; ++i) y[i] = x[i] + spread * y[i] / len;
    const auto fx = f(x);
    const auto fy = f(y);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      num += (fx[i] - fy[i]) * (fx[i] - fy[i]);
      den += (x[i] - y[i]) * (x[i] - y[i]);
    }
    if (den == 0.0) continue;
    const double ratio = std::sqrt(num / den);
    if (ratio > report.max_ratio) {
      report.max_ratio = ratio;
      report.witness_x = x;
      report.witness_y = y;
    }
    if (report.hypothesis && ratio > 1.0 + 1e-9) ++report.violations;
  }
  return report;
}

}  // namespace

LemmaReport check_lemma_nonexpansive(const DenseMatrix& a, std::span<const double> b,
                                     std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw std::invalid_argument("lemma check needs at least one trial");
  if (a.rows() != a.cols()) throw ShapeError("lemma check needs a square matrix");
  if (b.size() != a.rows()) throw ShapeError("lemma bias length mismatch");
  auto f = [&](std::span<const double> x) {
    std::vector<double> z = a.multiply(x);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = std::max(z[i] + b[i], 0.0);
    const std::vector<double> s = a.multiply_transposed(z);
    std::vector<double> out(x.begin(), x.end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= s[i];
    return out;
  };
  return sample_lemma(a.cols(), f, opnorm_l2(a).value, trials, seed);
}

LemmaReport check_lemma_nonexpansive(const Filter& k, std::size_t height, std::size_t width,
                                     std::span<const double> b, std::size_t trials,
                                     std::uint64_t seed, Padding pad) {
  if (trials == 0) throw std::invalid_argument("lemma check needs at least one trial");
  if (k.d_in() != k.d_out()) throw ShapeError("lemma check needs d_in = d_out");
  if (b.size() != k.d_out()) throw ShapeError("lemma bias length mismatch");
  auto f = [&](std::span<const double> v) {
    const Feature x = devectorize(v, height, width, k.d_in());
    Feature z = conv2d(x, k, 1, pad);
    add_channel_bias(z, b);
    for (double& e : z.data()) e = std::max(e, 0.0);
    const Feature s = adjoint_conv(z, k, pad);
    std::vector<double> out(v.begin(), v.end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= s.data()[i];
    return out;
  };
  return sample_lemma(height * width * k.d_in(), f, opnorm_l2(k, height, width, 1, pad).value,
                      trials, seed);
}

}  // namespace stbl
