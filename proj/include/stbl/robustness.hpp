#pragma once

// Perturbation protocol: additive noise x -> x + eta on test images, with the
// measured output shift compared against the sensitivity bound a ||eta||_2.
//
//   Unstructured: eta ~ N(0, sigma^2) i.i.d. per element
//   Structured:   eta = epsilon x0 for a fixed image x0
//
// Noise is added to the network input as given, i.e. after any dataset
// normalization, so the comparison with a is exact.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "stbl/certificate.hpp"
#include "stbl/train.hpp"

namespace stbl {

enum class NoiseKind { Unstructured, Structured };
const char* to_string(NoiseKind kind);
NoiseKind noise_kind_from_string(const std::string& name);

struct NoiseSpec {
  NoiseKind kind = NoiseKind::Unstructured;
  double level = 0.0;  // sigma (unstructured) or epsilon (structured)
  Feature pattern;     // x0, structured only
  std::uint64_t seed = 0;

  static NoiseSpec unstructured(double sigma, std::uint64_t seed = 0);
  static NoiseSpec structured(double epsilon, Feature x0);
};

/// Corrupted copy of x. Unstructured draws come from a generator seeded by
/// (spec.seed, index), so image i gets the same noise in any evaluation order.
Feature corrupt(const Feature& x, const NoiseSpec& noise, std::size_t index = 0);

struct NoiseRow {
  NoiseKind kind = NoiseKind::Unstructured;
  double level = 0.0;
  std::size_t count = 0;
  double accuracy = 0.0;
  double mean_shift = 0.0;      // mean ||x^N_clean - x^N_noisy||_2
  double mean_bound = 0.0;      // mean a ||eta||_2
  double min_slack = 0.0;       // min over images of a ||eta|| - shift
  double max_ratio = 0.0;       // max shift / ||eta||
  std::size_t violations = 0;   // counted only when the certificate is valid
};

struct RobustnessTable {
  StabilityCertificate certificate;
  double clean_accuracy = 0.0;
  std::vector<NoiseRow> rows;

  bool bound_checked() const { return certificate.sensitivity_valid; }
  std::size_t violations() const;
};

RobustnessTable evaluate_under_noise(const NetworkSpec& spec, const ParamStore& params,
                                     const Dataset& data, const std::vector<NoiseSpec>& noise,
                                     std::size_t threads = 1);

/// Tab-separated: kind, level, accuracy, mean shift, mean bound, min slack,
/// max ratio, violations.
void write_robustness(std::ostream& out, const RobustnessTable& table);

}  // namespace stbl
