#include "stbl/conv.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace stbl {

namespace {

using Index = std::ptrdiff_t;

// Resolves a possibly out-of-range coordinate; -1 means "reads zero".
inline Index resolve(Index idx, Index len, Padding pad) {
  if (idx >= 0 && idx < len) return idx;
  if (pad == Padding::Zero) return -1;
  Index r = idx % len;
  return r < 0 ? r + len : r;
}

inline Index tap_offset(std::size_t n) { return static_cast<Index>((n - 1) / 2); }

void check_stride(std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("stride must be positive");
}

}  // namespace

const char* to_string(Padding pad) { return pad == Padding::Zero ? "zero" : "periodic"; }

Padding padding_from_string(const std::string& name) {
  if (name == "zero") return Padding::Zero;
  if (name == "periodic") return Padding::Periodic;
  throw std::invalid_argument("unknown padding mode '" + name + "'");
}

std::vector<double> conv_channel(std::span<const double> x, std::size_t height, std::size_t width,
                                 std::span<const double> kernel, std::size_t n, std::size_t stride,
                                 Padding pad) {
  check_stride(stride);
  if (x.size() != height * width) throw ShapeError("channel slice size mismatch");
  if (kernel.size() != n * n) throw ShapeError("kernel size mismatch");
  const std::size_t out_h = strided_extent(height, stride);
  const std::size_t out_w = strided_extent(width, stride);
  const Index h = static_cast<Index>(height), w = static_cast<Index>(width);
  const Index a = static_cast<Index>(stride), c = tap_offset(n);
  std::vector<double> y(out_h * out_w, 0.0);
  for (std::size_t oi = 0; oi < out_h; ++oi) {
    for (std::size_t oj = 0; oj < out_w; ++oj) {
      double acc = 0.0;
      for (std::size_t u = 0; u < n; ++u) {
        const Index r = resolve(a * static_cast<Index>(oi) + static_cast<Index>(u) - c, h, pad);
        if (r < 0) continue;
        for (std::size_t v = 0; v < n; ++v) {
          const Index s = resolve(a * static_cast<Index>(oj) + static_cast<Index>(v) - c, w, pad);
          if (s < 0) continue;
          acc += kernel[u * n + v] * x[static_cast<std::size_t>(r * w + s)];
        }
      }
      y[oi * out_w + oj] = acc;
    }
  }
  return y;
}

Feature conv2d(const Feature& x, const Filter& k, std::size_t stride, Padding pad) {
  check_stride(stride);
  if (x.depth() != k.d_in()) {
    throw ShapeError("conv2d: input depth " + std::to_string(x.depth()) +
                     " does not match filter d_in " + std::to_string(k.d_in()));
  }
  Feature y(strided_extent(x.height(), stride), strided_extent(x.width(), stride), k.d_out());
  for (std::size_t j = 0; j < k.d_out(); ++j) {
    auto out = y.channel(j);
    for (std::size_t i = 0; i < k.d_in(); ++i) {
      const auto part =
          conv_channel(x.channel(i), x.height(), x.width(), k.subfilter(i, j), k.n(), stride, pad);
      for (std::size_t p = 0; p < out.size(); ++p) out[p] += part[p];
    }
  }
  return y;
}

Feature adjoint_conv(const Feature& y, const Filter& k, Padding pad) {
  return adjoint_conv(y, k, 1, pad, y.height(), y.width());
}

Feature adjoint_conv(const Feature& y, const Filter& k, std::size_t stride, Padding pad,
                     std::size_t in_height, std::size_t in_width) {
  check_stride(stride);
  if (y.depth() != k.d_out()) {
    throw ShapeError("adjoint_conv: input depth " + std::to_string(y.depth()) +
                     " does not match filter d_out " + std::to_string(k.d_out()));
  }
  if (y.height() != strided_extent(in_height, stride) ||
      y.width() != strided_extent(in_width, stride)) {
    throw ShapeError("adjoint_conv: spatial extent inconsistent with stride");
  }
  const std::size_t n = k.n();
  const Index h = static_cast<Index>(in_height), w = static_cast<Index>(in_width);
  const Index a = static_cast<Index>(stride), c = tap_offset(n);
  Feature z(in_height, in_width, k.d_in());
  for (std::size_t i = 0; i < k.d_in(); ++i) {
    auto out = z.channel(i);
    for (std::size_t j = 0; j < k.d_out(); ++j) {
      const auto kij = k.subfilter(i, j);
      const auto yj = y.channel(j);
      for (std::size_t oi = 0; oi < y.height(); ++oi) {
        for (std::size_t oj = 0; oj < y.width(); ++oj) {
          const double g = yj[oi * y.width() + oj];
          if (g == 0.0) continue;
          for (std::size_t u = 0; u < n; ++u) {
            const Index r = resolve(a * static_cast<Index>(oi) + static_cast<Index>(u) - c, h, pad);
            if (r < 0) continue;
            for (std::size_t v = 0; v < n; ++v) {
              const Index s =
                  resolve(a * static_cast<Index>(oj) + static_cast<Index>(v) - c, w, pad);
              if (s < 0) continue;
              out[static_cast<std::size_t>(r * w + s)] += kij[u * n + v] * g;
            }
          }
        }
      }
    }
  }
  return z;
}

Filter filter_gradient(const Feature& x, const Feature& g, std::size_t n, std::size_t stride,
                       Padding pad) {
  check_stride(stride);
  if (g.height() != strided_extent(x.height(), stride) ||
      g.width() != strided_extent(x.width(), stride)) {
    throw ShapeError("filter_gradient: gradient extent inconsistent with input and stride");
  }
  const Index h = static_cast<Index>(x.height()), w = static_cast<Index>(x.width());
  const Index a = static_cast<Index>(stride), c = tap_offset(n);
  Filter dk(n, x.depth(), g.depth());
  for (std::size_t j = 0; j < g.depth(); ++j) {
    const auto gj = g.channel(j);
    for (std::size_t i = 0; i < x.depth(); ++i) {
      const auto xi = x.channel(i);
      auto dkij = dk.subfilter(i, j);
      for (std::size_t oi = 0; oi < g.height(); ++oi) {
        for (std::size_t oj = 0; oj < g.width(); ++oj) {
          const double go = gj[oi * g.width() + oj];
          if (go == 0.0) continue;
          for (std::size_t u = 0; u < n; ++u) {
            const Index r = resolve(a * static_cast<Index>(oi) + static_cast<Index>(u) - c, h, pad);
            if (r < 0) continue;
            for (std::size_t v = 0; v < n; ++v) {
              const Index s =
                  resolve(a * static_cast<Index>(oj) + static_cast<Index>(v) - c, w, pad);
              if (s < 0) continue;
              dkij[u * n + v] += go * xi[static_cast<std::size_t>(r * w + s)];
            }
          }
        }
      }
    }
  }
  return dk;
}

DenseMatrix materialize(const Filter& k, std::size_t height, std::size_t width, std::size_t stride,
                        Padding pad) {
  check_stride(stride);
  const std::size_t out_h = strided_extent(height, stride);
  const std::size_t out_w = strided_extent(width, stride);
  const std::size_t rows = out_h * out_w * k.d_out();
  const std::size_t cols = height * width * k.d_in();
  if (rows != 0 && cols > kMaxMaterializedEntries / rows) {
    throw std::length_error("materialize: matrix would exceed 1e8 entries");
  }
  DenseMatrix m(rows, cols);
  const std::size_t n = k.n();
  const Index h = static_cast<Index>(height), w = static_cast<Index>(width);
  const Index a = static_cast<Index>(stride), c = tap_offset(n);
  // Block (j, i) of A is the channel-wise operator of subfilter K_{i,j}.
  for (std::size_t j = 0; j < k.d_out(); ++j) {
    for (std::size_t oi = 0; oi < out_h; ++oi) {
      for (std::size_t oj = 0; oj < out_w; ++oj) {
        const std::size_t row = j * out_h * out_w + oi * out_w + oj;
        for (std::size_t i = 0; i < k.d_in(); ++i) {
          for (std::size_t u = 0; u < n; ++u) {
            const Index r = resolve(a * static_cast<Index>(oi) + static_cast<Index>(u) - c, h, pad);
            if (r < 0) continue;
            for (std::size_t v = 0; v < n; ++v) {
              const Index s =
                  resolve(a * static_cast<Index>(oj) + static_cast<Index>(v) - c, w, pad);
              if (s < 0) continue;
              const std::size_t col = i * height * width + static_cast<std::size_t>(r * w + s);
              m(row, col) += k(i, j, u, v);
            }
          }
        }
      }
    }
  }
  return m;
}

NormRelation norm_relation_check(const Filter& k, std::size_t height, std::size_t width, double p,
                                 Padding pad) {
  if (pad != Padding::Periodic) {
    throw std::invalid_argument("norm relation holds only for periodic padding");
  }
  if (!(p >= 1.0) || std::isinf(p)) throw std::invalid_argument("norm relation needs 1 <= p < inf");
  const DenseMatrix a = materialize(k, height, width, 1, pad);
  NormRelation rel;
  for (double v : a.data()) rel.lhs += std::pow(std::abs(v), p);
  double kp = 0.0;
  for (double v : k.data()) kp += std::pow(std::abs(v), p);
  rel.rhs = static_cast<double>(height * width) * kp;
  const double scale = std::max(std::abs(rel.lhs), std::abs(rel.rhs));
  rel.equal = std::abs(rel.lhs - rel.rhs) <= 1e-12 * scale;
  return rel;
}

}  // namespace stbl
