#include "stbl/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "stbl/conv.hpp"

namespace stbl {

Feature relu(const Feature& x) {
  Feature y = x;
  for (double& v : y.data()) v = std::max(v, 0.0);
  return y;
}

std::vector<double> relu(std::span<const double> x) {
  std::vector<double> y(x.begin(), x.end());
  for (double& v : y) v = std::max(v, 0.0);
  return y;
}

BatchNormParams BatchNormParams::identity(std::size_t channels) {
  BatchNormParams p;
  p.gamma.assign(channels, 1.0);
  p.beta.assign(channels, 0.0);
  p.mean.assign(channels, 0.0);
  p.sigma.assign(channels, 1.0);
  return p;
}

BatchStatistics batch_statistics(std::span<const Feature> batch, double epsilon) {
  if (batch.empty()) throw std::invalid_argument("batch statistics of an empty batch");
  const Feature& first = batch.front();
  for (const auto& x : batch) {
    if (!x.same_shape(first)) throw ShapeError("batch features differ in shape");
  }
  const std::size_t depth = first.depth();
  const double count = static_cast<double>(batch.size() * first.channel_size());
  BatchStatistics stats;
  stats.mean.assign(depth, 0.0);
  stats.sigma.assign(depth, 0.0);
  for (std::size_t k = 0; k < depth; ++k) {
    double sum = 0.0;
    for (const auto& x : batch)
      for (double v : x.channel(k)) sum += v;
    const double mu = sum / count;
    double sq = 0.0;
    for (const auto& x : batch)
      for (double v : x.channel(k)) sq += (v - mu) * (v - mu);
    stats.mean[k] = mu;
    stats.sigma[k] = std::sqrt(sq / count + epsilon * epsilon);
  }
  return stats;
}

Feature batchnorm_apply(const Feature& x, std::span<const double> gamma,
                        std::span<const double> beta, std::span<const double> mean,
                        std::span<const double> sigma) {
  const std::size_t depth = x.depth();
  if (gamma.size() != depth || beta.size() != depth || mean.size() != depth ||
      sigma.size() != depth) {
    throw ShapeError("batch-norm parameters do not match feature depth");
  }
  Feature y = x;
  for (std::size_t k = 0; k < depth; ++k) {
    const double scale = gamma[k] / sigma[k];
    for (double& v : y.channel(k)) v = scale * (v - mean[k]) + beta[k];
  }
  return y;
}

BatchNormResult batchnorm(std::span<const Feature> batch, const BatchNormParams& params,
                          BatchNormMode mode) {
  BatchNormResult result;
  if (mode == BatchNormMode::Train) {
    if (batch.empty()) throw std::invalid_argument("train-mode batch normalization needs a batch");
    result.stats = batch_statistics(batch, params.epsilon);
  } else {
    result.stats = {params.mean, params.sigma};
  }
  result.outputs.reserve(batch.size());
  for (const auto& x : batch) {
    result.outputs.push_back(
        batchnorm_apply(x, params.gamma, params.beta, result.stats.mean, result.stats.sigma));
  }
  return result;
}

FoldedConv fold_batchnorm(const Filter& k, std::span<const double> bias,
                          const BatchNormParams& params) {
  if (params.channels() != k.d_out() || bias.size() != k.d_out()) {
    throw ShapeError("fold_batchnorm: channel count mismatch");
  }
  FoldedConv out{k, std::vector<double>(k.d_out())};
  for (std::size_t j = 0; j < k.d_out(); ++j) {
    const double s = params.gamma[j] / params.sigma[j];
    for (std::size_t i = 0; i < k.d_in(); ++i)
      for (double& v : out.filter.subfilter(i, j)) v *= s;
    out.bias[j] = s * (bias[j] - params.mean[j]) + params.beta[j];
  }
  return out;
}

Feature pad_channels(const Feature& x, std::size_t d2) {
  const std::size_t d1 = x.depth();
  if (d2 <= d1) {
    throw std::invalid_argument("pad_channels: target depth " + std::to_string(d2) +
                                " must exceed " + std::to_string(d1));
  }
  const std::size_t offset = (d2 - d1) / 2;
  Feature y(x.height(), x.width(), d2);
  for (std::size_t k = 0; k < d1; ++k) {
    const auto src = x.channel(k);
    std::copy(src.begin(), src.end(), y.channel(offset + k).begin());
  }
  return y;
}

Feature pad_channels_adjoint(const Feature& y, std::size_t d1) {
  if (y.depth() <= d1) throw std::invalid_argument("pad_channels_adjoint: depth too small");
  const std::size_t offset = (y.depth() - d1) / 2;
  Feature x(y.height(), y.width(), d1);
  for (std::size_t k = 0; k < d1; ++k) {
    const auto src = y.channel(offset + k);
    std::copy(src.begin(), src.end(), x.channel(k).begin());
  }
  return x;
}

Feature pool2(const Feature& x) {
  const std::size_t h = x.height(), w = x.width();
  const std::size_t oh = strided_extent(h, 2), ow = strided_extent(w, 2);
  Feature y(oh, ow, x.depth());
  for (std::size_t k = 0; k < x.depth(); ++k) {
    const auto xc = x.channel(k);
    auto yc = y.channel(k);
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double s = 0.0;
        for (std::size_t r = 2 * i; r < std::min(2 * i + 2, h); ++r)
          for (std::size_t c = 2 * j; c < std::min(2 * j + 2, w); ++c) s += xc[r * w + c];
        yc[i * ow + j] = 0.25 * s;
      }
    }
  }
  return y;
}

Feature pool2_adjoint(const Feature& y, std::size_t in_height, std::size_t in_width) {
  if (y.height() != strided_extent(in_height, 2) || y.width() != strided_extent(in_width, 2)) {
    throw ShapeError("pool2_adjoint: extent mismatch");
  }
  Feature x(in_height, in_width, y.depth());
  for (std::size_t k = 0; k < y.depth(); ++k) {
    const auto yc = y.channel(k);
    auto xc = x.channel(k);
    for (std::size_t r = 0; r < in_height; ++r)
      for (std::size_t c = 0; c < in_width; ++c)
        xc[r * in_width + c] = 0.25 * yc[(r / 2) * y.width() + c / 2];
  }
  return x;
}

std::vector<double> pool_global(const Feature& x) {
  std::vector<double> y(x.depth(), 0.0);
  const double inv = 1.0 / static_cast<double>(x.channel_size());
  for (std::size_t k = 0; k < x.depth(); ++k) {
    double s = 0.0;
    for (double v : x.channel(k)) s += v;
    y[k] = s * inv;
  }
  return y;
}

void add_channel_bias(Feature& x, std::span<const double> bias) {
  if (bias.size() != x.depth()) throw ShapeError("bias length does not match feature depth");
  for (std::size_t k = 0; k < x.depth(); ++k)
    for (double& v : x.channel(k)) v += bias[k];
}

std::vector<double> channel_sums(const Feature& g) {
  std::vector<double> s(g.depth(), 0.0);
  for (std::size_t k = 0; k < g.depth(); ++k)
    for (double v : g.channel(k)) s[k] += v;
  return s;
}

double bias_norm(std::span<const double> bias, std::size_t height, std::size_t width, Norm kind) {
  const double positions = static_cast<double>(height * width);
  switch (kind.kind) {
    case Norm::Kind::Linf:
      return norm(bias, kind);
    case Norm::Kind::L1:
      return positions * norm(bias, kind);
    case Norm::Kind::L2:
    case Norm::Kind::Frobenius:
      return std::sqrt(positions) * norm(bias, kind);
    case Norm::Kind::Lpp:
      return std::pow(positions, 1.0 / kind.p) * norm(bias, kind);
  }
  return 0.0;
}

}  // namespace stbl
