#pragma once

// Nonlinearities and dimension-changing operators: ReLU, batch normalization
// (per-channel statistics, with folding into a preceding convolution), channel
// zero-padding E, 2x2 average pooling P2 and global average pooling Pg.

#include <cstddef>
#include <span>
#include <vector>

#include "stbl/tensor.hpp"

namespace stbl {

/// max(x, 0), i.e. the projection onto the nonnegative orthant.
Feature relu(const Feature& x);
std::vector<double> relu(std::span<const double> x);

// ---------------------------------------------------------------------------
// Batch normalization. Statistics are per channel over batch and spatial
// positions. sigma = sqrt(var + epsilon^2), so sigma >= epsilon always.

inline constexpr double kBatchNormEpsilon = 1e-5;

struct BatchNormParams {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> mean;   // running / stored batch mean
  std::vector<double> sigma;  // running / stored batch std
  double epsilon = kBatchNormEpsilon;

  static BatchNormParams identity(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
  bool operator==(const BatchNormParams&) const = default;
};

struct BatchStatistics {
  std::vector<double> mean;
  std::vector<double> sigma;
};

enum class BatchNormMode { Train, Eval };

BatchStatistics batch_statistics(std::span<const Feature> batch, double epsilon);

/// gamma (x - mean) / sigma + beta, channel by channel.
Feature batchnorm_apply(const Feature& x, std::span<const double> gamma,
                        std::span<const double> beta, std::span<const double> mean,
                        std::span<const double> sigma);

struct BatchNormResult {
  std::vector<Feature> outputs;
  BatchStatistics stats;  // the statistics actually used
};

/// Train mode normalizes with the batch's own statistics (batch must be
/// nonempty); eval mode uses params.mean / params.sigma.
BatchNormResult batchnorm(std::span<const Feature> batch, const BatchNormParams& params,
                          BatchNormMode mode);

/// Folds y = BN(conv(x, K) + b) in eval mode into conv(x, K~) + b~ with
/// K~_{i,j} = s_j K_{i,j}, b~ = s (b - mean) + beta, s = gamma / sigma.
struct FoldedConv {
  Filter filter;
  std::vector<double> bias;
};
FoldedConv fold_batchnorm(const Filter& k, std::span<const double> bias,
                          const BatchNormParams& params);

// ---------------------------------------------------------------------------

/// Operator E: embeds a depth-d1 feature into depth d2 > d1, copying x into
/// channels d .. d+d1-1 (0-based) with d = floor((d2 - d1) / 2).
Feature pad_channels(const Feature& x, std::size_t d2);
/// E^T: extracts the embedded channels back out.
Feature pad_channels_adjoint(const Feature& y, std::size_t d1);

/// Operator P2: 2x2 average with stride 2 and zero padding. Edge blocks that
/// are only partially inside the feature are still divided by 4.
Feature pool2(const Feature& x);
/// P2^T, for an original extent of in_height x in_width.
Feature pool2_adjoint(const Feature& y, std::size_t in_height, std::size_t in_width);

/// Operator Pg: per-channel mean.
std::vector<double> pool_global(const Feature& x);

/// Adds a per-channel bias in place.
void add_channel_bias(Feature& x, std::span<const double> bias);
/// Per-channel sum over spatial positions (the gradient of a per-channel bias).
std::vector<double> channel_sums(const Feature& g);

/// Feature-space norm of a per-channel bias broadcast over h x w positions.
double bias_norm(std::span<const double> bias, std::size_t height, std::size_t width, Norm kind);

}  // namespace stbl
