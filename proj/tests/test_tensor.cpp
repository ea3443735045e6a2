#include <gtest/gtest.h>

#include <sstream>

#include "stbl/tensor.hpp"
#include "support.hpp"

using namespace stbl;
using namespace stbl::test;

TEST(Vectorize, SinglePixel) {
  Feature x(1, 1, 1, {5.0});
  EXPECT_EQ(vectorize(x), std::vector<double>{5.0});
}

TEST(Vectorize, RowMajorWithinChannel) {
  Feature x(2, 2, 1);
  x(0, 0, 0) = 1;
  x(0, 1, 0) = 2;
  x(1, 0, 0) = 3;
  x(1, 1, 0) = 4;
  EXPECT_EQ(vectorize(x), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Vectorize, ChannelMajorIndex) {
  Feature x(2, 3, 2);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 3; ++j) x(i, j, k) = 100.0 * k + 10.0 * i + j;
  const auto v = vectorize(x);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(v[k * 6 + i * 3 + j], 100.0 * k + 10.0 * i + j);
}

TEST(Vectorize, NormIsometryAndRoundTrip) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 1000; ++t) {
    std::uniform_int_distribution<std::size_t> dim(1, 6);
    const Feature x = random_feature(dim(rng), dim(rng), dim(rng), rng);
    const auto v = vectorize(x);
    double fro = 0.0, mx = 0.0;
    for (std::size_t k = 0; k < x.depth(); ++k)
      for (std::size_t i = 0; i < x.height(); ++i)
        for (std::size_t j = 0; j < x.width(); ++j) {
          fro += x(i, j, k) * x(i, j, k);
          mx = std::max(mx, std::abs(x(i, j, k)));
        }
    EXPECT_NEAR(norm(v, Norm::l2()), std::sqrt(fro), 1e-12 * std::sqrt(fro));
    EXPECT_EQ(norm(v, Norm::linf()), mx);
    const Feature back = devectorize(v, x.height(), x.width(), x.depth());
    EXPECT_TRUE(back == x);
  }
}

TEST(Vectorize, DevectorizeRejectsWrongLength) {
  std::vector<double> v(5);
  EXPECT_THROW(devectorize(v, 2, 2, 1), ShapeError);
}

TEST(Norm, Examples) {
  EXPECT_DOUBLE_EQ(norm(std::vector<double>{3, -4}, Norm::l2()), 5.0);
  EXPECT_DOUBLE_EQ(norm(std::vector<double>{1, -1, 1}, Norm::l1()), 3.0);
  const std::vector<double> z(7, 0.0);
  for (Norm n : {Norm::l1(), Norm::l2(), Norm::linf(), Norm::frobenius(), Norm::lpp(3.0)})
    EXPECT_EQ(norm(z, n), 0.0);
  EXPECT_DOUBLE_EQ(norm(std::vector<double>{-2, 1}, Norm::linf()), 2.0);
  EXPECT_THROW(Norm::lpp(0.5), std::invalid_argument);
}

TEST(Norm, LppMatchesL1AndL2) {
  std::mt19937_64 rng(3);
  std::vector<double> v(20);
  fill_normal(v, rng);
  EXPECT_NEAR(norm(v, Norm::lpp(1.0)), l1(v), 1e-12);
  EXPECT_NEAR(norm(v, Norm::lpp(2.0)), l2(v), 1e-12);
}

TEST(Shapes, ConstructorsValidate) {
  EXPECT_THROW(Feature(0, 2, 1), ShapeError);
  EXPECT_THROW(Feature(2, 2, 1, std::vector<double>(3)), ShapeError);
  EXPECT_THROW(Filter(0, 1, 1), ShapeError);
  EXPECT_THROW(Filter(3, 1, 1, std::vector<double>(8)), ShapeError);
  EXPECT_THROW(DenseMatrix(2, 2, std::vector<double>(3)), ShapeError);
}

TEST(Filter, SubfilterLayout) {
  Filter k(2, 3, 2);
  k(1, 1, 0, 1) = 7.0;
  // (j d_in + i) n^2 + u n + v
  EXPECT_EQ(k.data()[(1 * 3 + 1) * 4 + 1], 7.0);
  EXPECT_EQ(k.subfilter(1, 1)[1], 7.0);
}

TEST(DenseMatrix, MultiplyAndTranspose) {
  DenseMatrix a(2, 3, {1, 2, 3, 4, 5, 6});
  const std::vector<double> x{1, 0, -1};
  EXPECT_EQ(a.multiply(x), (std::vector<double>{-2, -2}));
  const std::vector<double> y{1, 1};
  EXPECT_EQ(a.multiply_transposed(y), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(a.transposed().multiply(y), a.multiply_transposed(y));
  EXPECT_THROW(a.multiply(y), ShapeError);
}

TEST(Blob, RoundTripAllKinds) {
  std::mt19937_64 rng(5);
  const Feature x = random_feature(3, 4, 2, rng);
  const Filter k = random_filter(3, 2, 2, rng);
  DenseMatrix m(2, 3);
  fill_normal(m.data(), rng);
  std::stringstream s;
  write_blob(s, to_blob(x));
  write_blob(s, to_blob(k));
  write_blob(s, to_blob(m));
  EXPECT_TRUE(feature_from_blob(read_blob(s)) == x);
  EXPECT_TRUE(filter_from_blob(read_blob(s)) == k);
  EXPECT_TRUE(matrix_from_blob(read_blob(s)) == m);
}

TEST(Blob, RejectsTruncatedStream) {
  std::stringstream s;
  write_blob(s, to_blob(Feature(2, 2, 1)));
  std::string bytes = s.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream t(bytes);
  EXPECT_ANY_THROW(read_blob(t));
}
