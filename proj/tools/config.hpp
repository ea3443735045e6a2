#pragma once

// JSON run configuration for the stbl command. Every section is optional and
// falls back to the defaults below; unknown keys are rejected.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "stbl/certificate.hpp"
#include "stbl/inclusion.hpp"
#include "stbl/network.hpp"
#include "stbl/train.hpp"

namespace stbl::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string source = "synthetic";  // or "idx"
  SyntheticConfig synthetic;
  std::string train_images, train_labels, test_images, test_labels;
  bool normalize = true;
};

struct CertifyConfig {
  PowerOptions power;
  std::size_t inputs = 100;     // growth campaign size for verify
  std::size_t pairs = 100;      // sensitivity campaign size for verify
  double input_scale = 1.0;     // inputs ~ N(0, scale^2) per element
  double perturbation = 0.1;    // pair offsets ~ N(0, perturbation^2)
  bool require_valid = false;   // certify exits 1 when a flag fails
};

struct InclusionPiece {
  double end = 1.0;
  DenseMatrix a1, a2;
  std::vector<double> b1, b2;
};

struct IntegrateConfig {
  std::string problem = "exponential";  // exponential | random | explicit
  InclusionVariant variant = InclusionVariant::General;
  double tau = 1e-4;
  double horizon = 1.0;            // exponential problem only
  std::size_t max_dim = 4;         // random problem only
  std::string bound = "auto";      // auto | none | one of the bound kinds
  bool force = false;
  std::vector<InclusionPiece> pieces;  // explicit problem
  std::vector<double> x0;
  std::vector<double> y0;          // second start for sensitivity bounds
};

struct PerturbConfig {
  std::vector<double> sigmas{0.0, 0.02, 0.05};
  std::vector<double> epsilons;    // structured noise levels
  std::size_t pattern_image = 0;   // test image used as x0 for structured noise
  std::size_t limit = 0;           // 0 = whole test set
};

struct RunConfig {
  std::uint64_t seed = 1;
  NetworkSpec network;
  DataConfig data;
  TrainConfig train;
  InitOptions init;
  CertifyConfig certify;
  IntegrateConfig integrate;
  PerturbConfig perturb;
};

/// Parses and validates; throws ConfigError on unknown keys, wrong types or
/// out-of-range values.
RunConfig parse_config(const nlohmann::json& doc);
RunConfig load_config(const std::string& path);  // "" -> defaults

nlohmann::json to_json(const RunConfig& config);

}  // namespace stbl::cli
