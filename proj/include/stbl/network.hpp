#pragma once

// ResNet-D / ResNet-S assembly:
//
//   x^0 -> conv -> m residual -> pool -> (m-1) residual -> pool
//       -> (m-1) residual -> global pool -> dense -> x^N,   N = 3m + 3
//
// Layer n maps x^n to x^{n+1}. Stage s in {0,1,2} has extent (h_s, w_s, d_s)
// with h_{s+1} = ceil(h_s / 2), d_{s+1} = 2 d_s.

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stbl/conv.hpp"
#include "stbl/layers.hpp"
#include "stbl/tensor.hpp"

namespace stbl {

enum class Variant { ResNetD, ResNetS };

const char* to_string(Variant v);
Variant variant_from_string(const std::string& name);

struct StageDims {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t depth = 0;
};

enum class LayerKind { Conv, Residual, Pool, Global, Dense };
const char* to_string(LayerKind kind);

struct LayerInfo {
  LayerKind kind;
  std::size_t index;  // n, the layer number
  std::size_t stage;  // stage whose dims the layer's input has
  std::size_t slot;   // position among layers of the same kind
};

struct NetworkSpec {
  Variant variant = Variant::ResNetS;
  std::size_t m = 1;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t d0 = 1;
  std::size_t d1 = 4;
  std::size_t classes = 2;
  bool batchnorm = false;
  Padding padding = Padding::Periodic;
  std::size_t kernel = 3;

  /// Throws std::invalid_argument describing the first bad field.
  void validate() const;

  std::size_t num_layers() const { return 3 * m + 3; }
  std::size_t num_residual() const { return 3 * m - 2; }
  StageDims stage(std::size_t s) const;
  std::size_t final_depth() const { return 4 * d1; }
  std::vector<LayerInfo> schedule() const;

  bool operator==(const NetworkSpec&) const = default;
};

struct ConvParams {
  Filter k;
  std::vector<double> b;
  bool operator==(const ConvParams&) const = default;
};

/// ResNet-S layers leave k2 empty: the second operator is the adjoint of k1.
/// bn1 / bn2 are used only when the spec enables batch normalization; bn2's
/// gamma and beta stay at 1 and 0.
struct ResidualParams {
  Filter k1;
  Filter k2;
  std::vector<double> b1;
  std::vector<double> b2;
  BatchNormParams bn1;
  BatchNormParams bn2;
  bool operator==(const ResidualParams&) const = default;
};

struct ParamStore {
  ConvParams first;
  std::vector<ResidualParams> residual;  // 3m - 2 entries, in layer order
  std::array<ConvParams, 2> pool;
  DenseMatrix w;  // C x d3
  std::vector<double> dense_bias;

  bool operator==(const ParamStore&) const = default;
};

/// All-zero parameters of the right shapes (batch-norm parameters identity).
ParamStore zero_params(const NetworkSpec& spec);
/// Throws ShapeError if any parameter shape disagrees with spec.
void check_shapes(const NetworkSpec& spec, const ParamStore& params);

// ---------------------------------------------------------------------------
// Errors

/// A hypothesis of a layer equation does not hold (e.g. a negative entry in
/// the second ResNet-D filter).
class ConstraintError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Wraps any other failure inside forward with the offending layer index.
class LayerError : public std::runtime_error {
 public:
  LayerError(std::size_t layer, const std::string& what)
      : std::runtime_error("layer " + std::to_string(layer) + ": " + what), layer_(layer) {}
  std::size_t layer() const { return layer_; }

 private:
  std::size_t layer_;
};

// ---------------------------------------------------------------------------
// Single layers

/// x' = (x - A2 (A1 x + b1)_+ + b2)_+, with A_i = conv(K_i). Throws
/// ConstraintError if K2 has a negative entry.
Feature layer_resnet_d(const Feature& x, const Filter& k1, const Filter& k2,
                       std::span<const double> b1, std::span<const double> b2,
                       Padding pad = Padding::Periodic);

/// x' = (x - A^T (A x + b1)_+ + b2)_+, with A^T realized by adjoint_conv.
Feature layer_resnet_s(const Feature& x, const Filter& k, std::span<const double> b1,
                       std::span<const double> b2, Padding pad = Padding::Periodic);

/// x' = (E(P2 x) - (A_{s=2} x + b)_+)_+ where K maps d -> 2d.
Feature layer_pool2d(const Feature& x, const Filter& k, std::span<const double> b,
                     Padding pad = Padding::Periodic);

Feature layer_conv_first(const Feature& x, const Filter& k, std::span<const double> b,
                         Padding pad = Padding::Periodic);
std::vector<double> layer_global(const Feature& x);
std::vector<double> layer_dense(std::span<const double> x, const DenseMatrix& w,
                                std::span<const double> b);

// ---------------------------------------------------------------------------
// Effective (batch-norm folded) network

/// Residual layer in effective form x' = (x - B (A x + b1)_+ + b2)_+ where
/// A = conv(k1) and B = conv(k2) or, when second_adjoint, B = conv(k2)^T.
struct EffectiveResidual {
  Filter k1;
  Filter k2;
  bool second_adjoint = false;
  std::vector<double> b1;
  std::vector<double> b2;

  /// For the S variant: the two operators are exactly A and A^T.
  bool symmetric() const { return second_adjoint && k1 == k2; }
};

struct EffectiveNetwork {
  ConvParams first;
  std::vector<EffectiveResidual> residual;
  std::array<ConvParams, 2> pool;
  DenseMatrix w;
  std::vector<double> dense_bias;
};

/// Folds eval-mode batch normalization (running statistics) into the
/// residual operators. Without batch normalization it only re-labels.
EffectiveNetwork effective_network(const NetworkSpec& spec, const ParamStore& params);

Feature apply_residual(const Feature& x, const EffectiveResidual& layer, Variant variant,
                       Padding pad);

// ---------------------------------------------------------------------------
// Forward pass

struct ForwardTrace {
  std::vector<double> l2;    // ||x^n||_2, n = 0..N
  std::vector<double> linf;  // ||x^n||_inf
  std::vector<Feature> features;  // x^n when requested; vectors stored as 1x1xd
  std::vector<double> logits;     // x^N

  std::size_t states() const { return l2.size(); }
};

ForwardTrace forward(const NetworkSpec& spec, const ParamStore& params, const Feature& x0,
                     bool record_features = false);
ForwardTrace forward(const NetworkSpec& spec, const EffectiveNetwork& net, const Feature& x0,
                     bool record_features = false);

/// Logits for each input, evaluated in parallel with per-input determinism.
std::vector<std::vector<double>> forward_batch(const NetworkSpec& spec, const ParamStore& params,
                                               std::span<const Feature> inputs,
                                               std::size_t threads = 1);

// ---------------------------------------------------------------------------
// Model files: "STBLNET" magic, version byte, spec header, ordered tensor
// records (see write_model for the order).

inline constexpr unsigned char kModelVersion = 1;

void write_model(std::ostream& out, const NetworkSpec& spec, const ParamStore& params);
std::pair<NetworkSpec, ParamStore> read_model(std::istream& in);
void save_model(const std::string& path, const NetworkSpec& spec, const ParamStore& params);
std::pair<NetworkSpec, ParamStore> load_model(const std::string& path);

}  // namespace stbl
