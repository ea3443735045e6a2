#pragma once

// Objective, reverse-mode gradients and mini-batch gradient descent.
//
// loss = sum_batch H(y, S(x^N)) + sum_n R_n
//
//   layer        ResNet-D                     ResNet-S
//   first conv   alpha |K|_1                  alpha/2 |K|^2
//   residual     alpha/2 (|K1|^2 + |K2|^2)    alpha/2 |K|^2
//   pool conv    alpha/2 |K|^2                alpha/2 |K|^2
//   dense        alpha |W|_1                  alpha/2 |W|^2
//
// K2 >= 0 is enforced by projection after each step, not by the gradient.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stbl/certificate.hpp"
#include "stbl/network.hpp"

namespace stbl {

inline constexpr double kLogClamp = 1e-12;

/// Max-shifted softmax.
std::vector<double> softmax(std::span<const double> u);
/// -u^T log(max(v, 1e-12)).
double cross_entropy(std::span<const double> u, std::span<const double> v);

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  std::vector<Feature> images;
  std::vector<std::vector<double>> labels;  // one-hot, length C
  std::size_t classes = 0;

  std::size_t size() const { return images.size(); }
  std::size_t label(std::size_t i) const;  // index of the 1 in labels[i]
  /// Uniform image dims, one-hot labels summing to exactly 1.
  void validate() const;
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

std::vector<double> one_hot(std::size_t label, std::size_t classes);

/// IDX files: images as N x h x w (unsigned byte, scaled to [0, 1], or
/// float64) or N x h x w x d; labels as N unsigned bytes.
Dataset read_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t classes = 0);
void write_idx(const std::string& images_path, const std::string& labels_path,
               const Dataset& data);

/// Two-class bar images: class 0 holds a horizontal bar, class 1 a vertical
/// bar, each at a random position, plus i.i.d. Gaussian pixel noise. The
/// classes differ by orientation only, so they are separable by shift-
/// invariant features.
struct SyntheticConfig {
  std::size_t train = 512;
  std::size_t test = 256;
  std::size_t height = 8;
  std::size_t width = 8;
  double noise = 0.25;
  std::uint64_t seed = 7;
};
DatasetSplit synthetic_bars(const SyntheticConfig& config);

/// Per-channel mean / standard deviation fitted on a dataset.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stdev;
};
Normalization fit_normalization(const Dataset& data);
void apply_normalization(Dataset& data, const Normalization& norm);

// ---------------------------------------------------------------------------
// Parameters

/// Visits every trainable tensor in a fixed order: first conv K, b; per
/// residual layer K1, [K2], b1, b2, [bn1 gamma, beta]; pool K, b; W; dense b.
void for_each_trainable(const NetworkSpec& spec, ParamStore& params,
                        const std::function<void(const std::string&, std::span<double>)>& fn);
void for_each_trainable(const NetworkSpec& spec, const ParamStore& params,
                        const std::function<void(const std::string&, std::span<const double>)>& fn);

void variance_scaling(Filter& k, std::mt19937_64& rng);  // N(0, 2 / fan_in)
void uniform_scaling(Filter& k, std::mt19937_64& rng);   // U(-sqrt(3/fan_in), sqrt(3/fan_in))
void truncated_normal(std::span<double> values, double sigma, std::mt19937_64& rng);

struct InitOptions {
  double dense_sigma = 0.0;  // 0 selects 1 / (d3 C)
};
/// Residual and pooling filters variance-scaled (ResNet-D K2 takes absolute
/// values so it starts feasible), first conv uniform-scaled, dense weight
/// truncated normal, biases 0, batch-norm gamma 1 and beta 0.
ParamStore init_params(const NetworkSpec& spec, std::uint64_t seed, const InitOptions& options = {});

// ---------------------------------------------------------------------------
// Loss and gradients

enum class StatsMode { Batch, Running };

struct LossResult {
  double value = 0.0;
  double data_term = 0.0;
  double regularizer = 0.0;
  ParamStore gradient;  // same shapes as the parameters; frozen entries stay 0
  std::vector<BatchStatistics> bn1_stats;  // per residual layer, when batch norm is on
  std::vector<BatchStatistics> bn2_stats;
  std::size_t correct = 0;
};

double regularizer(const NetworkSpec& spec, const ParamStore& params, double alpha,
                   ParamStore* gradient = nullptr);

/// Value and gradient over a nonempty batch. Batch mode normalizes with the
/// batch's statistics (training); Running mode uses the stored ones.
LossResult loss_total(const NetworkSpec& spec, const ParamStore& params,
                      std::span<const Feature> images, std::span<const std::vector<double>> labels,
                      double alpha, StatsMode mode = StatsMode::Batch);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t batch_size = 128;
  double learning_rate = 0.1;
  std::size_t decay_steps = 24000;   // T0
  std::size_t total_steps = 70000;   // T1
  double alpha = 1e-4;
  bool clamp_k2 = true;              // ResNet-D K2 >= 0
  bool spectral_rescale = false;     // ResNet-S ||A||_2 <= sqrt 2
  bool boundary_rescale = false;     // ||A^0||, ||W|| <= 1 in the certificate norm
  std::size_t eval_interval = 500;
  bool certify_history = true;       // record c and a at each evaluation
  double bn_momentum = 0.9;
  std::uint64_t seed = 1;

  void validate() const;
};

struct HistoryEntry {
  std::size_t step = 0;
  double learning_rate = 0.0;
  double loss = 0.0;
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
  double c = std::numeric_limits<double>::quiet_NaN();
  double a = std::numeric_limits<double>::quiet_NaN();
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, std::vector<HistoryEntry> history)
      : std::runtime_error("loss became non-finite at step " + std::to_string(step)),
        step_(step),
        history_(std::move(history)) {}
  std::size_t step() const { return step_; }
  const std::vector<HistoryEntry>& history() const { return history_; }

 private:
  std::size_t step_;
  std::vector<HistoryEntry> history_;
};

struct TrainResult {
  ParamStore params;
  std::vector<HistoryEntry> history;
};

/// Projections applied after each step, per the config flags. Idempotent.
void project(const NetworkSpec& spec, const TrainConfig& config, ParamStore& params);

double accuracy(const NetworkSpec& spec, const ParamStore& params, const Dataset& data,
                std::size_t threads = 1);

TrainResult train(const NetworkSpec& spec, const TrainConfig& config, const DatasetSplit& data,
                  ParamStore initial);
TrainResult train(const NetworkSpec& spec, const TrainConfig& config, const DatasetSplit& data);

void write_history(std::ostream& out, const std::vector<HistoryEntry>& history);

}  // namespace stbl
