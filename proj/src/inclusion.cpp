#include "stbl/inclusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>

#include "stbl/certificate.hpp"

namespace stbl {

namespace {

double l2(std::span<const double> v) { return norm(v, Norm::l2()); }

std::vector<double> positive_part(std::vector<double> v) {
  for (double& x : v) x = std::max(x, 0.0);
  return v;
}

double value_at(const PiecewiseConstant& pc, double t) {
  // Piece p covers [knots[p], knots[p+1]); outside the grid the end values extend.
  const auto it = std::upper_bound(pc.knots.begin(), pc.knots.end(), t);
  std::size_t p = it == pc.knots.begin() ? 0 : static_cast<std::size_t>(it - pc.knots.begin()) - 1;
  return pc.values[std::min(p, pc.values.size() - 1)];
}

void check_piecewise(const PiecewiseConstant& pc, const char* name) {
  if (pc.values.empty() || pc.knots.size() != pc.values.size() + 1) {
    throw std::invalid_argument(std::string(name) + ": need values.size() + 1 knots");
  }
  if (!std::is_sorted(pc.knots.begin(), pc.knots.end())) {
    throw std::invalid_argument(std::string(name) + ": knots must ascend");
  }
  for (double v : pc.values) {
    if (!(v >= 0.0)) throw std::invalid_argument(std::string(name) + " must be nonnegative");
  }
}

std::size_t step_count(double horizon, double tau) {
  const double r = horizon / tau;
  const double nearest = std::round(r);
  if (std::abs(r - nearest) <= 1e-9 * std::max(1.0, r)) return static_cast<std::size_t>(nearest);
  return static_cast<std::size_t>(std::ceil(r));
}

}  // namespace

const char* to_string(InclusionVariant v) {
  switch (v) {
    case InclusionVariant::General: return "general";
    case InclusionVariant::D: return "d";
    case InclusionVariant::S: return "s";
  }
  return "?";
}

InclusionVariant inclusion_variant_from_string(const std::string& name) {
  if (name == "general") return InclusionVariant::General;
  if (name == "d" || name == "D") return InclusionVariant::D;
  if (name == "s" || name == "S") return InclusionVariant::S;
  throw std::invalid_argument("unknown inclusion variant '" + name + "'");
}

double relu_scalar(double x) { return x > 0.0 ? x : 0.0; }

std::size_t InclusionProblem::piece_at(double t) const {
  const auto it = std::upper_bound(knots.begin(), knots.end(), t);
  if (it == knots.begin()) return 0;
  return std::min(static_cast<std::size_t>(it - knots.begin()) - 1, pieces() - 1);
}

DenseMatrix InclusionProblem::second(std::size_t p) const {
  return variant == InclusionVariant::S ? a1[p].transposed() : a2[p];
}

void InclusionProblem::validate_shapes() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
  };
  need(dim >= 1, "problem dimension must be positive");
  need(!a1.empty(), "problem needs at least one piece");
  need(knots.size() == a1.size() + 1, "need one more knot than pieces");
  need(knots.front() == 0.0, "first knot must be 0");
  for (std::size_t p = 0; p + 1 < knots.size(); ++p) need(knots[p] < knots[p + 1], "knots must increase");
  need(b1.size() == a1.size() && b2.size() == a1.size(), "bias schedules must match the pieces");
  if (variant != InclusionVariant::S) need(a2.size() == a1.size(), "A2 schedule must match the pieces");
  for (std::size_t p = 0; p < a1.size(); ++p) {
    need(a1[p].rows() == dim && a1[p].cols() == dim, "A1 must be d x d");
    if (variant != InclusionVariant::S) need(a2[p].rows() == dim && a2[p].cols() == dim, "A2 must be d x d");
    need(b1[p].size() == dim && b2[p].size() == dim, "biases must have length d");
  }
  need(x0.size() == dim, "x0 must have length d");
  need(static_cast<bool>(activation), "activation must be set");
}

InclusionProblem constant_problem(InclusionVariant variant, DenseMatrix a1, DenseMatrix a2,
                                  std::vector<double> b1, std::vector<double> b2,
                                  std::vector<double> x0, double horizon) {
  InclusionProblem p;
  p.dim = x0.size();
  p.variant = variant;
  p.knots = {0.0, horizon};
  p.a1 = {std::move(a1)};
  if (variant != InclusionVariant::S) p.a2 = {std::move(a2)};
  p.b1 = {std::move(b1)};
  p.b2 = {std::move(b2)};
  p.x0 = std::move(x0);
  p.validate_shapes();
  return p;
}

InclusionProblem random_problem(InclusionVariant variant, std::size_t max_dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  InclusionProblem p;
  p.variant = variant;
  p.dim = 1 + static_cast<std::size_t>(rng() % std::max<std::size_t>(max_dim, 1));
  const std::size_t pieces = 1 + static_cast<std::size_t>(rng() % 3);
  const double horizon = 0.5 + 1.5 * unit(rng);
  p.knots = {0.0};
  std::vector<double> interior;
  for (std::size_t i = 1; i < pieces; ++i) interior.push_back(horizon * (0.1 + 0.8 * unit(rng)));
  std::sort(interior.begin(), interior.end());
  for (double t : interior) p.knots.push_back(t);
  p.knots.push_back(horizon);
  for (std::size_t i = 1; i < p.knots.size(); ++i) {
    if (!(p.knots[i] > p.knots[i - 1])) p.knots[i] = p.knots[i - 1] + 1e-3;
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(p.dim));
  auto matrix = [&](bool nonneg) {
    DenseMatrix m(p.dim, p.dim);
    const double s = scale * (0.3 + 0.9 * unit(rng));
    for (double& v : m.data()) v = nonneg ? std::abs(s * normal(rng)) : s * normal(rng);
    return m;
  };
  auto vec = [&](double s) {
    std::vector<double> v(p.dim);
    for (double& x : v) x = s * normal(rng);
    return v;
  };
  for (std::size_t q = 0; q < pieces; ++q) {
    p.a1.push_back(matrix(false));
    if (variant != InclusionVariant::S) p.a2.push_back(matrix(variant == InclusionVariant::D));
    p.b1.push_back(vec(0.5));
    p.b2.push_back(vec(0.5));
  }
  p.x0 = vec(1.0);
  for (double& x : p.x0) x = std::abs(x);
  p.validate_shapes();
  return p;
}

std::vector<double> step_fb(std::span<const double> x, double tau, const DenseMatrix& a1,
                            const DenseMatrix& a2, std::span<const double> b1,
                            std::span<const double> b2, const Activation& activation) {
  if (!(tau > 0.0)) throw std::invalid_argument("step size must be positive");
  std::vector<double> z = a1.multiply(x);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = activation(z[i] + b1[i]);
  const std::vector<double> force = a2.multiply(z);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::max(x[i] - tau * force[i] + tau * b2[i], 0.0);
  }
  return out;
}

HypothesesReport hypotheses_check(const InclusionProblem& problem) {
  problem.validate_shapes();
  HypothesesReport r;
  const Activation& s = problem.activation;
  if (s(0.0) != 0.0) {
    r.activation_fixes_zero = false;
    r.messages.push_back("activation does not fix 0");
  }
  // Contractivity on a deterministic sample of pairs in [-10, 10].
  for (int i = -40; i <= 40 && r.activation_contractive; ++i) {
    for (int j = -40; j <= 40; ++j) {
      if (i == j) continue;
      const double x = 0.25 * i, y = 0.25 * j + 0.01;
      if (std::abs(s(x) - s(y)) > std::abs(x - y) * (1.0 + 1e-12)) {
        r.activation_contractive = false;
        r.messages.push_back("activation is not contractive near " + std::to_string(x));
        break;
      }
    }
  }
  for (double v : problem.x0) {
    if (v < 0.0) {
      r.x0_nonnegative = false;
      r.messages.push_back("x0 has a negative component");
      break;
    }
  }
  for (std::size_t p = 0; p < problem.pieces(); ++p) {
    const DenseMatrix a2 = problem.second(p);
    if (problem.variant == InclusionVariant::D &&
        std::any_of(a2.data().begin(), a2.data().end(), [](double v) { return v < 0.0; })) {
      r.structure_ok = false;
      r.messages.push_back("A2 has a negative entry on piece " + std::to_string(p));
    }
    const double n1 = opnorm_l2(problem.a1[p]).value;
    const double n2 = problem.variant == InclusionVariant::S ? n1 : opnorm_l2(a2).value;
    r.lipschitz_c = std::max(r.lipschitz_c, n1 * n2);
  }
  for (std::size_t p = 0; p < problem.pieces(); ++p) {
    const double n2 = opnorm_l2(problem.second(p)).value;
    r.beta.push_back(std::max(r.lipschitz_c, n2 * l2(problem.b1[p]) + l2(problem.b2[p])));
  }
  return r;
}

Trajectory integrate(const InclusionProblem& problem, double tau, const IntegrateOptions& options) {
  return integrate_from(problem, problem.x0, tau, options);
}

Trajectory integrate_from(const InclusionProblem& problem, std::span<const double> x0, double tau,
                          const IntegrateOptions& options) {
  if (!(tau > 0.0)) throw std::invalid_argument("step size must be positive");
  problem.validate_shapes();
  if (x0.size() != problem.dim) throw ShapeError("initial state has the wrong length");
  Trajectory traj;
  traj.tau = tau;
  InclusionProblem started = problem;
  started.x0.assign(x0.begin(), x0.end());
  const HypothesesReport hyp = hypotheses_check(started);
  if (!hyp.passed()) {
    if (!options.force) {
      std::string msg = "hypotheses failed:";
      for (const auto& m : hyp.messages) msg += " " + m + ";";
      throw std::invalid_argument(msg);
    }
    traj.warnings = hyp.messages;
  }

  const double horizon = problem.horizon();
  const std::size_t steps = step_count(horizon, tau);
  std::vector<DenseMatrix> second(problem.pieces());
  for (std::size_t p = 0; p < problem.pieces(); ++p) second[p] = problem.second(p);

  std::vector<double> x(x0.begin(), x0.end());
  traj.times.reserve(steps + 1);
  traj.states.reserve(steps + 1);
  traj.times.push_back(0.0);
  traj.norms.push_back(l2(x));
  traj.states.push_back(x);
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) * tau;
    const double t_next = (k + 1 == steps) ? horizon : static_cast<double>(k + 1) * tau;
    const std::size_t p = problem.piece_at(t);
    x = step_fb(x, t_next - t, problem.a1[p], second[p], problem.b1[p], problem.b2[p],
                problem.activation);
    for (double v : x) {
      if (!std::isfinite(v)) throw IntegrationError("non-finite state", k + 1);
    }
    traj.times.push_back(t_next);
    traj.norms.push_back(l2(x));
    traj.states.push_back(x);
  }
  return traj;
}

// ---------------------------------------------------------------------------

std::vector<double> gronwall(double c, const PiecewiseConstant& f, const PiecewiseConstant& g,
                             double alpha, std::span<const double> t_grid) {
  if (!(c >= 0.0)) throw std::invalid_argument("gronwall: c must be nonnegative");
  if (!(alpha >= 0.0)) throw std::invalid_argument("gronwall: alpha must be nonnegative");
  if (alpha > 1.0) throw std::invalid_argument("gronwall: alpha > 1 is not supported");
  check_piecewise(f, "gronwall f");
  check_piecewise(g, "gronwall g");

  // Breakpoints where either function may jump.
  std::vector<double> breaks = f.knots;
  breaks.insert(breaks.end(), g.knots.begin(), g.knots.end());
  std::sort(breaks.begin(), breaks.end());

  const bool linear = alpha == 1.0;
  const double q = 1.0 - alpha;
  double t = std::min(f.knots.front(), g.knots.front());
  double v = linear ? c : std::pow(c, q);

  // V' = q f V + q g (alpha < 1, V = u^q) or V' = (f + g) V (alpha = 1),
  // integrated exactly over an interval where f and g are constant.
  auto advance = [&](double to) {
    while (t < to) {
      const auto nb = std::upper_bound(breaks.begin(), breaks.end(), t);
      const double end = nb == breaks.end() ? to : std::min(to, *nb);
      const double dt = end - t;
      const double fv = value_at(f, t), gv = value_at(g, t);
      if (linear) {
        v *= std::exp((fv + gv) * dt);
      } else if (fv > 0.0) {
        v = v * std::exp(q * fv * dt) + gv * std::expm1(q * fv * dt) / fv;
      } else {
        v += q * gv * dt;
      }
      t = end;
    }
  };

  std::vector<double> out;
  out.reserve(t_grid.size());
  for (double target : t_grid) {
    if (target < t) throw std::invalid_argument("gronwall: time grid must ascend from t0");
    advance(target);
    out.push_back(linear || q == 1.0 ? v : std::pow(std::max(v, 0.0), 1.0 / q));
  }
  return out;
}

const char* to_string(BoundKind kind) {
  switch (kind) {
    case BoundKind::GrowthGeneral: return "growth-general";
    case BoundKind::SensitivityGeneral: return "sensitivity-general";
    case BoundKind::GrowthD: return "growth-d";
    case BoundKind::GrowthS: return "growth-s";
    case BoundKind::SensitivityS: return "sensitivity-s";
  }
  return "?";
}

BoundKind bound_kind_from_string(const std::string& name) {
  for (BoundKind k : {BoundKind::GrowthGeneral, BoundKind::SensitivityGeneral, BoundKind::GrowthD,
                      BoundKind::GrowthS, BoundKind::SensitivityS}) {
    if (name == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown bound kind '" + name + "'");
}

bool is_sensitivity(BoundKind kind) {
  return kind == BoundKind::SensitivityGeneral || kind == BoundKind::SensitivityS;
}

Envelope bound_envelope(const InclusionProblem& problem, const Trajectory& trajectory,
                        BoundKind kind, const Trajectory* other) {
  problem.validate_shapes();
  if (kind == BoundKind::GrowthD && problem.variant != InclusionVariant::D) {
    throw std::invalid_argument("the ResNet-D growth bound needs a D-variant problem");
  }
  if ((kind == BoundKind::GrowthS || kind == BoundKind::SensitivityS) &&
      problem.variant != InclusionVariant::S) {
    throw std::invalid_argument("the ResNet-S bounds need an S-variant problem");
  }
  if (is_sensitivity(kind)) {
    if (!other) throw std::invalid_argument("sensitivity bounds need a second trajectory");
    if (other->times != trajectory.times) throw std::invalid_argument("trajectories differ in time grid");
  }

  const std::size_t pieces = problem.pieces();
  PiecewiseConstant f{problem.knots, std::vector<double>(pieces, 0.0)};
  PiecewiseConstant g{problem.knots, std::vector<double>(pieces, 0.0)};
  for (std::size_t p = 0; p < pieces; ++p) {
    const DenseMatrix a2 = problem.second(p);
    switch (kind) {
      case BoundKind::GrowthGeneral: {
        const double n1 = opnorm_l2(problem.a1[p]).value, n2 = opnorm_l2(a2).value;
        f.values[p] = n1 * n2;
        g.values[p] = n2 * l2(problem.b1[p]) + l2(positive_part(problem.b2[p]));
        break;
      }
      case BoundKind::SensitivityGeneral:
        f.values[p] = opnorm_l2(problem.a1[p]).value * opnorm_l2(a2).value;
        break;
      case BoundKind::GrowthD:
        g.values[p] = l2(positive_part(problem.b2[p]));
        break;
      case BoundKind::GrowthS: {
        std::vector<double> sb(problem.dim);
        for (std::size_t i = 0; i < sb.size(); ++i) sb[i] = problem.activation(problem.b1[p][i]);
        std::vector<double> w = a2.multiply(sb);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = -w[i] + problem.b2[p][i];
        g.values[p] = l2(positive_part(std::move(w)));
        break;
      }
      case BoundKind::SensitivityS:
        break;
    }
  }

  Envelope env;
  env.kind = kind;
  const std::size_t n = trajectory.times.size();
  env.value.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (is_sensitivity(kind)) {
      std::vector<double> d(problem.dim);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = trajectory.states[k][i] - other->states[k][i];
      env.value[k] = l2(d);
    } else {
      env.value[k] = trajectory.norms[k];
    }
  }
  // GrowthGeneral and SensitivityGeneral are the alpha = 0 Gronwall envelope with
  // f = ||A1|| ||A2||; the variant bounds are the same with f = 0.
  env.bound = gronwall(env.value.front(), f, g, 0.0, trajectory.times);

  const HypothesesReport hyp = hypotheses_check(problem);
  double max_state = 0.0;
  for (double v : trajectory.norms) max_state = std::max(max_state, v);
  if (other) {
    for (double v : other->norms) max_state = std::max(max_state, v);
  }
  const double beta = hyp.beta.empty() ? 0.0 : *std::max_element(hyp.beta.begin(), hyp.beta.end());
  env.tolerance = std::max(1e-9, 5.0 * trajectory.tau * beta * (1.0 + max_state));

  env.slack.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    env.slack[k] = env.bound[k] - env.value[k];
    if (env.value[k] > env.bound[k] + env.tolerance) {
      if (env.violations == 0) {
        env.first_violation = k;
        char buf[160];
        std::snprintf(buf, sizeof buf, "t=%.9g value=%.17g bound=%.17g tolerance=%.3g",
                      trajectory.times[k], env.value[k], env.bound[k], env.tolerance);
        env.detail = buf;
      }
      ++env.violations;
    }
  }
  return env;
}

void write_trajectory(std::ostream& out, const Trajectory& trajectory, std::span<const double> bound) {
  const std::size_t d = trajectory.states.empty() ? 0 : trajectory.states.front().size();
  out << "t";
  for (std::size_t i = 1; i <= d; ++i) out << ",x" << i;
  out << ",norm,bound\n";
  char buf[40];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  };
  for (std::size_t k = 0; k < trajectory.times.size(); ++k) {
    out << num(trajectory.times[k]);
    for (double v : trajectory.states[k]) out << ',' << num(v);
    out << ',' << num(trajectory.norms[k]) << ',';
    if (k < bound.size()) out << num(bound[k]);
    out << '\n';
  }
}

}  // namespace stbl
