#pragma once

// Continuous-time residual dynamics as a sweeping process on the orthant:
//
//   -x'(t) in N(x(t)) + A2(t) sigma(A1(t) x + b1(t)) - b2(t),   x(0) = x0 >= 0
//
// integrated by the projected forward step
//
//   x_{k+1} = (x_k - tau A2 sigma(A1 x_k + b1) + tau b2)_+ .
//
// Weights and biases are piecewise constant on a knot grid; piece p is active
// on [knots[p], knots[p+1]). All envelope integrals are therefore exact.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stbl/tensor.hpp"

namespace stbl {

enum class InclusionVariant { General, D, S };
const char* to_string(InclusionVariant v);
InclusionVariant inclusion_variant_from_string(const std::string& name);

using Activation = std::function<double(double)>;
double relu_scalar(double x);

struct InclusionProblem {
  std::size_t dim = 0;
  InclusionVariant variant = InclusionVariant::General;
  std::vector<double> knots;  // 0 = knots[0] < ... < knots[P] = T
  std::vector<DenseMatrix> a1;
  std::vector<DenseMatrix> a2;  // unused for S, where A2 = A1^T
  std::vector<std::vector<double>> b1;
  std::vector<std::vector<double>> b2;
  std::vector<double> x0;
  Activation activation = relu_scalar;

  std::size_t pieces() const { return a1.size(); }
  double horizon() const { return knots.empty() ? 0.0 : knots.back(); }
  /// Piece active at time t (the last piece for t >= T).
  std::size_t piece_at(double t) const;
  /// The second operator of piece p (A1^T for the S variant).
  DenseMatrix second(std::size_t p) const;
  /// Shape consistency; throws std::invalid_argument.
  void validate_shapes() const;
};

/// Single constant-weight problem on [0, T].
InclusionProblem constant_problem(InclusionVariant variant, DenseMatrix a1, DenseMatrix a2,
                                  std::vector<double> b1, std::vector<double> b2,
                                  std::vector<double> x0, double horizon);

/// Random admissible problem: d in [1, max_dim], a few pieces, x0 >= 0,
/// nonnegative A2 for D. Weight scale keeps sup ||A1|| ||A2|| moderate.
InclusionProblem random_problem(InclusionVariant variant, std::size_t max_dim, std::uint64_t seed);

// ---------------------------------------------------------------------------

std::vector<double> step_fb(std::span<const double> x, double tau, const DenseMatrix& a1,
                            const DenseMatrix& a2, std::span<const double> b1,
                            std::span<const double> b2, const Activation& activation = relu_scalar);

struct HypothesesReport {
  bool activation_contractive = true;
  bool activation_fixes_zero = true;
  bool x0_nonnegative = true;
  bool structure_ok = true;  // D: A2 >= 0 at every piece
  double lipschitz_c = 0.0;  // sup_t ||A1||_2 ||A2||_2
  std::vector<double> beta;  // per piece: max{c, ||A2|| ||b1|| + ||b2||}
  std::vector<std::string> messages;

  bool passed() const {
    return activation_contractive && activation_fixes_zero && x0_nonnegative && structure_ok;
  }
};

HypothesesReport hypotheses_check(const InclusionProblem& problem);

struct Trajectory {
  double tau = 0.0;
  std::vector<double> times;
  std::vector<std::vector<double>> states;
  std::vector<double> norms;  // ||x(t_k)||_2
  std::vector<std::string> warnings;

  std::size_t steps() const { return times.empty() ? 0 : times.size() - 1; }
};

class IntegrationError : public std::runtime_error {
 public:
  IntegrationError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct IntegrateOptions {
  bool force = false;  // integrate even when hypotheses fail (recorded as warnings)
};

/// K = ceil(T / tau) projected steps; the last step is shortened to land on T.
Trajectory integrate(const InclusionProblem& problem, double tau, const IntegrateOptions& options = {});
/// Same problem started from another initial state.
Trajectory integrate_from(const InclusionProblem& problem, std::span<const double> x0, double tau,
                          const IntegrateOptions& options = {});

// ---------------------------------------------------------------------------

/// Piecewise-constant nonnegative function on a knot grid.
struct PiecewiseConstant {
  std::vector<double> knots;
  std::vector<double> values;
};

/// Nonlinear Gronwall envelope for u(t) <= c + int f u + g u^alpha:
///   0 <= alpha < 1:  u^{1-alpha} <= c^{1-alpha} e^{(1-alpha) F(t)}
///                                  + (1-alpha) int g(s) e^{(1-alpha)(F(t)-F(s))} ds
///   alpha = 1:       u <= c exp(int (f + g)).
/// Evaluated at each entry of t_grid (ascending, starting at or after knots[0]).
std::vector<double> gronwall(double c, const PiecewiseConstant& f, const PiecewiseConstant& g,
                             double alpha, std::span<const double> t_grid);

enum class BoundKind { GrowthGeneral, SensitivityGeneral, GrowthD, GrowthS, SensitivityS };
const char* to_string(BoundKind kind);
BoundKind bound_kind_from_string(const std::string& name);
bool is_sensitivity(BoundKind kind);

struct Envelope {
  BoundKind kind = BoundKind::GrowthGeneral;
  std::vector<double> value;
  std::vector<double> bound;
  std::vector<double> slack;
  double tolerance = 0.0;
  std::size_t violations = 0;
  std::size_t first_violation = 0;  // step index, meaningful when violations > 0
  std::string detail;

  bool passed() const { return violations == 0; }
};

/// Right-hand side of the selected bound evaluated along the trajectory's
/// time grid and compared with the trajectory. Sensitivity kinds need a second
/// trajectory on the same grid. Tolerance: max(1e-9, 5 tau scale), with scale
/// the force magnitude sup beta(t) (1 + max ||x_k||).
Envelope bound_envelope(const InclusionProblem& problem, const Trajectory& trajectory,
                        BoundKind kind, const Trajectory* other = nullptr);

/// Delimited text with columns t, x1..xd, norm, bound (bound may be empty).
void write_trajectory(std::ostream& out, const Trajectory& trajectory,
                      std::span<const double> bound = {});

}  // namespace stbl
