#pragma once

// Operator norms and the forward-stability certificates.
//
// Growth:       ||x^N|| <= ||x^0|| + c      (l-inf for ResNet-D, l2 for ResNet-S)
// Sensitivity:  ||x^N - y^N||_2 <= a ||x^0 - y^0||_2
//
// c sums feature-space bias norms; a multiplies per-layer expansion factors
// built from induced l2 norms. For ResNet-S the residual layers contribute no
// factor to a, which is why a does not depend on m.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stbl/network.hpp"

namespace stbl {

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double estimate, std::size_t iterations)
      : std::runtime_error(what), estimate_(estimate), iterations_(iterations) {}
  double estimate() const { return estimate_; }
  std::size_t iterations() const { return iterations_; }

 private:
  double estimate_;
  std::size_t iterations_;
};

struct PowerOptions {
  double tol = 1e-9;
  std::size_t max_iter = 5000;
  std::uint64_t seed = 0x9e3779b97f4a7c15ull;
};

struct OpNormEstimate {
  double value = 0.0;
  std::size_t iterations = 0;
};

/// Largest eigenvalue of a symmetric positive semidefinite operator G = A^T A
/// (given as v -> G v), returned as sqrt(lambda_max) = ||A||_2.
OpNormEstimate power_iteration(std::size_t dim,
                               const std::function<std::vector<double>(std::span<const double>)>& gram,
                               const PowerOptions& options = {});

/// ||A||_2 of the convolution matrix of K on h x w inputs, matrix-free.
OpNormEstimate opnorm_l2(const Filter& k, std::size_t height, std::size_t width,
                         std::size_t stride = 1, Padding pad = Padding::Periodic,
                         const PowerOptions& options = {});
OpNormEstimate opnorm_l2(const DenseMatrix& a, const PowerOptions& options = {});

/// Exact induced l-inf norm (max absolute row sum) of the stride-1
/// convolution matrix, by row enumeration without materializing.
double opnorm_linf(const Filter& k, std::size_t height, std::size_t width,
                   Padding pad = Padding::Periodic);
double opnorm_linf(const DenseMatrix& a);

// ---------------------------------------------------------------------------

/// Relative slack allowed when comparing a computed norm to its limit.
inline constexpr double kFlagTolerance = 1e-8;

struct LayerCertificate {
  std::size_t layer = 0;
  LayerKind kind = LayerKind::Conv;
  std::size_t stage = 0;
  double norm_a = 0.0;     // ||A||_2 (first operator for residual layers)
  double norm_b = 0.0;     // ||A_2||_2 or ||B||_2 of the second residual operator
  double norm_linf = 0.0;  // induced l-inf norm (first conv and dense only)
  double bias_norm = 0.0;  // contribution to c
  double factor = 1.0;     // contribution to a
  bool constraint_ok = true;
};

struct CertificateFlags {
  bool first_conv = true;  // ||A^0|| <= 1 (l-inf for D, l2 for S)
  bool dense = true;       // ||W|| <= 1  (l-inf for D, l2 for S)
  bool residual = true;    // D: K2 >= 0; S: ||A^n||_2 <= sqrt 2 and symmetric structure
};

struct StabilityCertificate {
  Variant variant = Variant::ResNetS;
  std::size_t m = 0;
  Norm growth_norm = Norm::l2();
  std::vector<LayerCertificate> layers;
  double c = 0.0;
  double a = 0.0;
  CertificateFlags flags;
  bool growth_valid = false;
  bool sensitivity_valid = false;
};

struct CertifyOptions {
  PowerOptions power;
  std::size_t threads = 1;
};

/// Builds the certificate of the effective (eval-mode, batch-norm folded)
/// network. Violated hypotheses set flags; assembly never aborts on them.
StabilityCertificate assemble_certificate(const NetworkSpec& spec, const ParamStore& params,
                                          const CertifyOptions& options = {});

void write_certificate(std::ostream& out, const StabilityCertificate& cert);

// ---------------------------------------------------------------------------

/// lhs <= rhs (1 + 1e-9) + 1e-12.
bool bound_holds(double lhs, double rhs);

struct GrowthEntry {
  double input_norm = 0.0;
  double output_norm = 0.0;
  double bound = 0.0;
  double slack = 0.0;  // bound - output_norm
  bool ok = true;
  std::vector<double> trace;  // per-state norms, only filled on violation
};

struct VerifyReport {
  bool skipped = false;
  std::string diagnostic;
  std::size_t checked = 0;
  std::size_t violations = 0;
  double min_slack = 0.0;
  double max_ratio = 0.0;  // sensitivity only: worst ||dx^N|| / ||dx^0||
  std::vector<GrowthEntry> entries;

  bool passed() const { return !skipped && violations == 0; }
};

VerifyReport verify_growth(const NetworkSpec& spec, const ParamStore& params,
                           std::span<const Feature> inputs, const StabilityCertificate& cert);
VerifyReport verify_sensitivity(const NetworkSpec& spec, const ParamStore& params,
                                std::span<const std::pair<Feature, Feature>> pairs,
                                const StabilityCertificate& cert);

// ---------------------------------------------------------------------------

struct LemmaReport {
  double opnorm = 0.0;
  bool hypothesis = false;  // ||A||_2 <= sqrt 2
  std::size_t trials = 0;
  std::size_t violations = 0;
  double max_ratio = 0.0;
  std::vector<double> witness_x;  // pair attaining max_ratio
  std::vector<double> witness_y;
};

/// Samples pairs and measures ||F(x) - F(y)||_2 / ||x - y||_2 for
/// F(x) = x - A^T (A x + b)_+. A violation is a ratio above 1 + 1e-9 while
/// the hypothesis holds.
LemmaReport check_lemma_nonexpansive(const DenseMatrix& a, std::span<const double> b,
                                     std::size_t trials, std::uint64_t seed = 1);
LemmaReport check_lemma_nonexpansive(const Filter& k, std::size_t height, std::size_t width,
                                     std::span<const double> b, std::size_t trials,
                                     std::uint64_t seed = 1, Padding pad = Padding::Periodic);

}  // namespace stbl
