#pragma once

// Channel-wise and 2D convolution (cross-correlation) with stride, their
// adjoints and the explicit matrix form.
//
// Window convention, 0-based, for output position i and stride a:
//
//   odd n  (n = 3):   taps at a*i + {-1, 0, +1}      kernel rows 0..2
//   even n (n = 2):   taps at a*i + { 0, +1}         kernel rows 0..1
//   even n (n = 4):   taps at a*i + {-1, 0, +1, +2}  kernel rows 0..3
//
// i.e. kernel row u reads input row a*i + u - (n-1)/2 (integer division).
// Even kernels extend one further toward the bottom/right than the top/left,
// which most frameworks do the other way round. Out-of-range reads resolve
// through the padding mode; with Zero padding and odd extents the last
// strided window reads past the edge and sees zeros.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "stbl/tensor.hpp"

namespace stbl {

enum class Padding { Zero, Periodic };

const char* to_string(Padding pad);
Padding padding_from_string(const std::string& name);

inline std::size_t strided_extent(std::size_t length, std::size_t stride) {
  return (length + stride - 1) / stride;
}

/// Single-channel convolution of an h x w slice; returns the ceil(h/a) x ceil(w/a)
/// result in row-major order.
std::vector<double> conv_channel(std::span<const double> x, std::size_t height, std::size_t width,
                                 std::span<const double> kernel, std::size_t n, std::size_t stride,
                                 Padding pad);

/// Channel j of the result is sum_i K_{i,j} (x) x_i, accumulated in ascending i.
Feature conv2d(const Feature& x, const Filter& k, std::size_t stride = 1,
               Padding pad = Padding::Periodic);

/// Transpose of the stride-1 convolution matrix applied to y (depth d_out).
Feature adjoint_conv(const Feature& y, const Filter& k, Padding pad = Padding::Periodic);

/// Transpose of the strided convolution matrix. The input extent of the
/// forward map is not recoverable from y alone, so it is passed explicitly.
Feature adjoint_conv(const Feature& y, const Filter& k, std::size_t stride, Padding pad,
                     std::size_t in_height, std::size_t in_width);

/// Gradient of <g, conv2d(x, K)> with respect to K, shaped like a filter with
/// d_in = x.depth() and d_out = g.depth().
Filter filter_gradient(const Feature& x, const Feature& g, std::size_t n, std::size_t stride,
                       Padding pad);

/// Dense matrix A with vec(conv2d(x, K, stride, pad)) = A vec(x). Refuses to
/// build more than 1e8 entries.
DenseMatrix materialize(const Filter& k, std::size_t height, std::size_t width,
                        std::size_t stride = 1, Padding pad = Padding::Periodic);

inline constexpr std::size_t kMaxMaterializedEntries = 100'000'000;

struct NormRelation {
  double lhs = 0.0;  // ||A||_{p,p}^p
  double rhs = 0.0;  // h w ||K||_{p,p}^p
  bool equal = false;
};

/// Checks ||A||_{p,p}^p = hw ||K||_{p,p}^p for the stride-1 periodic matrix.
/// Equality is exact only when n <= h and n <= w (no wrapped taps collide).
NormRelation norm_relation_check(const Filter& k, std::size_t height, std::size_t width, double p,
                                 Padding pad = Padding::Periodic);

}  // namespace stbl
