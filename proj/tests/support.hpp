#pragma once

// Test-side oracles. Nothing here calls into the library's convolution or
// norm code, so agreement with the library is a real cross-check.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "stbl/conv.hpp"
#include "stbl/tensor.hpp"

namespace stbl::test {

inline void fill_normal(std::span<double> v, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  for (double& x : v) x = normal(rng);
}

inline Feature random_feature(std::size_t h, std::size_t w, std::size_t d, std::mt19937_64& rng,
                              double scale = 1.0) {
  Feature x(h, w, d);
  fill_normal(x.data(), rng, scale);
  return x;
}

inline Filter random_filter(std::size_t n, std::size_t d_in, std::size_t d_out, std::mt19937_64& rng,
                            double scale = 1.0) {
  Filter k(n, d_in, d_out);
  fill_normal(k.data(), rng, scale);
  return k;
}

// Direct evaluation of the definition: output pixel (p, q) of channel j sums
// K_{i,j}(u, v) x_i(a p + u - c, a q + v - c) with c = floor((n - 1) / 2);
// out-of-range taps wrap (periodic) or read zero.
inline Feature naive_conv(const Feature& x, const Filter& k, std::size_t a, Padding pad) {
  const long h = static_cast<long>(x.height()), w = static_cast<long>(x.width());
  const long n = static_cast<long>(k.n()), c = (n - 1) / 2;
  const long oh = (h + static_cast<long>(a) - 1) / static_cast<long>(a);
  const long ow = (w + static_cast<long>(a) - 1) / static_cast<long>(a);
  Feature y(oh, ow, k.d_out());
  for (std::size_t j = 0; j < k.d_out(); ++j)
    for (long p = 0; p < oh; ++p)
      for (long q = 0; q < ow; ++q) {
        double s = 0.0;
        for (std::size_t i = 0; i < k.d_in(); ++i)
          for (long u = 0; u < n; ++u)
            for (long v = 0; v < n; ++v) {
              long r = static_cast<long>(a) * p + u - c, t = static_cast<long>(a) * q + v - c;
              if (pad == Padding::Periodic) {
                r = ((r % h) + h) % h;
                t = ((t % w) + w) % w;
              } else if (r < 0 || r >= h || t < 0 || t >= w) {
                continue;
              }
              s += k(i, j, u, v) * x(r, t, i);
            }
        y(p, q, j) = s;
      }
  return y;
}

inline Eigen::MatrixXd to_eigen(const DenseMatrix& a) {
  Eigen::MatrixXd m(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) m(r, c) = a(r, c);
  return m;
}

inline double largest_singular_value(const DenseMatrix& a) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(a));
  return svd.singularValues()(0);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

inline double max_abs(std::span<const double> a) {
  double d = 0.0;
  for (double v : a) d = std::max(d, std::abs(v));
  return d;
}

inline double l2(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

inline double l1(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += std::abs(v);
  return s;
}

}  // namespace stbl::test
