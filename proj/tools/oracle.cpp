#include "oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>

#include "stbl/certificate.hpp"
#include "stbl/conv.hpp"
#include "stbl/layers.hpp"

namespace stbl::cli {

namespace {

struct Shape {
  std::size_t h, w, d_in, d_out, n, stride;
  Padding pad;
};

std::vector<Shape> shape_grid() {
  std::vector<Shape> grid;
  for (std::size_t h = 1; h <= 8; ++h)
    for (std::size_t w = 1; w <= 8; ++w)
      for (std::size_t di = 1; di <= 3; ++di)
        for (std::size_t dout = 1; dout <= 3; ++dout)
          for (std::size_t n : {2, 3})
            for (std::size_t s : {1, 2})
              for (Padding p : {Padding::Zero, Padding::Periodic}) grid.push_back({h, w, di, dout, n, s, p});
  return grid;
}

void fill(std::span<double> v, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& x : v) x = normal(rng);
}

double rel_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return scale > 0.0 ? diff / scale : diff;
}

void record(OracleResult& r, double err) {
  ++r.cases;
  r.max_error = std::max(r.max_error, err);
  if (!(err <= r.tolerance)) ++r.failures;
}

}  // namespace

std::vector<OracleResult> run_oracles(std::uint64_t seed, std::size_t instances) {
  std::mt19937_64 rng(seed);
  OracleResult matrix{"conv2d = materialize * vec", 0, 0, 0.0, 1e-12};
  OracleResult adjoint{"adjoint_conv = materialize^T * vec", 0, 0, 0.0, 1e-12};
  OracleResult linf{"opnorm_linf = max row sum", 0, 0, 0.0, 0.0};
  OracleResult relation{"||A||_pp^p = hw ||K||_pp^p", 0, 0, 0.0, 1e-12};
  OracleResult grad{"filter_gradient = <g, conv(x, e_k)>", 0, 0, 0.0, 1e-12};
  OracleResult pool{"pool2_adjoint = P2^T", 0, 0, 0.0, 1e-12};

  for (const Shape& s : shape_grid()) {
    const std::size_t oh = strided_extent(s.h, s.stride), ow = strided_extent(s.w, s.stride);
    for (std::size_t t = 0; t < instances; ++t) {
      Filter k(s.n, s.d_in, s.d_out);
      fill(k.data(), rng);
      Feature x(s.h, s.w, s.d_in);
      fill(x.data(), rng);
      Feature u(oh, ow, s.d_out);
      fill(u.data(), rng);
      const DenseMatrix a = materialize(k, s.h, s.w, s.stride, s.pad);
      record(matrix, rel_error(vectorize(conv2d(x, k, s.stride, s.pad)), a.multiply(vectorize(x))));
      record(adjoint, rel_error(vectorize(adjoint_conv(u, k, s.stride, s.pad, s.h, s.w)),
                                a.multiply_transposed(vectorize(u))));
      if (s.stride == 1) {
        double best = 0.0;
        for (std::size_t r = 0; r < a.rows(); ++r) {
          double row = 0.0;
          for (double v : a.row(r)) row += std::abs(v);
          best = std::max(best, row);
        }
        const double got = opnorm_linf(k, s.h, s.w, s.pad);
        record(linf, best > 0.0 ? std::abs(got - best) / best : std::abs(got));
        if (s.pad == Padding::Periodic && s.n <= s.h && s.n <= s.w) {
          for (double p : {1.0, 2.0}) {
            const auto rel = norm_relation_check(k, s.h, s.w, p, s.pad);
            record(relation, std::abs(rel.lhs - rel.rhs) / std::max(rel.rhs, 1e-300));
          }
        }
      }
      // Gradient with respect to each filter entry, via unit filters.
      if (t == 0 && s.h <= 4 && s.w <= 4) {
        const Filter g = filter_gradient(x, u, s.n, s.stride, s.pad);
        std::vector<double> brute(k.size());
        Filter e(s.n, s.d_in, s.d_out);
        for (std::size_t i = 0; i < k.size(); ++i) {
          std::fill(e.data().begin(), e.data().end(), 0.0);
          e.data()[i] = 1.0;
          brute[i] = dot(u.data(), conv2d(x, e, s.stride, s.pad).data());
        }
        record(grad, rel_error(g.data(), brute));
      }
    }
    if (s.d_out == 1 && s.n == 2 && s.stride == 1 && s.pad == Padding::Zero) {
      Feature x(s.h, s.w, s.d_in);
      fill(x.data(), rng);
      const Feature y0 = pool2(x);
      Feature y(y0.height(), y0.width(), y0.depth());
      fill(y.data(), rng);
      record(pool, std::abs(dot(pool2(x).data(), y.data()) - dot(x.data(), pool2_adjoint(y, s.h, s.w).data())) /
                       std::max(1.0, std::abs(dot(x.data(), pool2_adjoint(y, s.h, s.w).data()))));
    }
  }
  return {matrix, adjoint, linf, relation, grad, pool};
}

void write_oracles(std::ostream& out, const std::vector<OracleResult>& results) {
  for (const auto& r : results) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s\t%s\tcases=%zu\tfailures=%zu\tmax_error=%.3g\ttol=%.3g\n",
                  r.failures == 0 ? "PASS" : "FAIL", r.name.c_str(), r.cases, r.failures, r.max_error,
                  r.tolerance);
    out << buf;
  }
}

}  // namespace stbl::cli
