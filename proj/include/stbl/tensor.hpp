#pragma once

// Dense feature / filter containers, vectorization and the entrywise norms.
//
// Layout convention (0-based): element (i, j, k) of an h x w x d feature lives
// at flat index k*h*w + i*w + j. This is the 1-based vectorization
// (k-1)hw + (i-1)w + j shifted once at this boundary, so `vectorize` is a copy
// of the storage and `devectorize` its inverse.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stbl {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Feature {
 public:
  Feature() = default;
  Feature(std::size_t height, std::size_t width, std::size_t depth);
  Feature(std::size_t height, std::size_t width, std::size_t depth, std::vector<double> data);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t depth() const { return depth_; }
  std::size_t size() const { return data_.size(); }
  std::size_t channel_size() const { return height_ * width_; }
  bool empty() const { return data_.empty(); }

  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[k * height_ * width_ + i * width_ + j];
  }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[k * height_ * width_ + i * width_ + j];
  }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  std::span<const double> channel(std::size_t k) const {
    return std::span<const double>(data_).subspan(k * channel_size(), channel_size());
  }
  std::span<double> channel(std::size_t k) {
    return std::span<double>(data_).subspan(k * channel_size(), channel_size());
  }

  bool same_shape(const Feature& other) const {
    return height_ == other.height_ && width_ == other.width_ && depth_ == other.depth_;
  }

  bool operator==(const Feature&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t depth_ = 0;
  std::vector<double> data_;
};

/// n x n x d_in x d_out convolution kernel. Subfilter K_{i,j} (input channel i,
/// output channel j) is a contiguous n x n row-major block at offset
/// (j*d_in + i)*n*n.
class Filter {
 public:
  Filter() = default;
  Filter(std::size_t n, std::size_t d_in, std::size_t d_out);
  Filter(std::size_t n, std::size_t d_in, std::size_t d_out, std::vector<double> data);

  std::size_t n() const { return n_; }
  std::size_t d_in() const { return d_in_; }
  std::size_t d_out() const { return d_out_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double operator()(std::size_t i, std::size_t j, std::size_t u, std::size_t v) const {
    return data_[((j * d_in_ + i) * n_ + u) * n_ + v];
  }
  double& operator()(std::size_t i, std::size_t j, std::size_t u, std::size_t v) {
    return data_[((j * d_in_ + i) * n_ + u) * n_ + v];
  }

  std::span<const double> subfilter(std::size_t i, std::size_t j) const {
    return std::span<const double>(data_).subspan((j * d_in_ + i) * n_ * n_, n_ * n_);
  }
  std::span<double> subfilter(std::size_t i, std::size_t j) {
    return std::span<double>(data_).subspan((j * d_in_ + i) * n_ * n_, n_ * n_);
  }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  bool same_shape(const Filter& other) const {
    return n_ == other.n_ && d_in_ == other.d_in_ && d_out_ == other.d_out_;
  }

  bool operator==(const Filter&) const = default;

 private:
  std::size_t n_ = 0;
  std::size_t d_in_ = 0;
  std::size_t d_out_ = 0;
  std::vector<double> data_;
};

/// Row-major dense matrix. Used for materialized convolutions, the fully
/// connected weight and the continuous-time weight schedules.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols);
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static DenseMatrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }

  std::vector<double> multiply(std::span<const double> x) const;
  std::vector<double> multiply_transposed(std::span<const double> y) const;
  DenseMatrix transposed() const;

  bool operator==(const DenseMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

std::vector<double> vectorize(const Feature& x);
Feature devectorize(std::span<const double> v, std::size_t height, std::size_t width,
                    std::size_t depth);

struct Norm {
  enum class Kind { L1, L2, Linf, Frobenius, Lpp };
  Kind kind = Kind::L2;
  double p = 2.0;

  static Norm l1() { return {Kind::L1, 1.0}; }
  static Norm l2() { return {Kind::L2, 2.0}; }
  static Norm linf() { return {Kind::Linf, 0.0}; }
  static Norm frobenius() { return {Kind::Frobenius, 2.0}; }
  /// Entrywise p-norm (sum |v|^p)^(1/p); p >= 1.
  static Norm lpp(double p);
};

double norm(std::span<const double> v, Norm kind);
double norm(const Feature& x, Norm kind);

double dot(std::span<const double> a, std::span<const double> b);

// ---------------------------------------------------------------------------
// Binary tensor records: "STBL", u32 rank, u32 dims[rank], f64 data[], all
// little-endian. Data follows the vectorization order: the first two dims are
// row-major and every later dim is slower than all earlier ones.

struct TensorBlob {
  std::vector<std::uint32_t> dims;
  std::vector<double> data;
};

void write_blob(std::ostream& out, const TensorBlob& blob);
TensorBlob read_blob(std::istream& in);

TensorBlob to_blob(const Feature& x);
TensorBlob to_blob(const Filter& k);
TensorBlob to_blob(const DenseMatrix& m);
TensorBlob to_blob(std::span<const double> v);

Feature feature_from_blob(const TensorBlob& blob);
Filter filter_from_blob(const TensorBlob& blob);
DenseMatrix matrix_from_blob(const TensorBlob& blob);
std::vector<double> vector_from_blob(const TensorBlob& blob);

void save_feature(const std::string& path, const Feature& x);
Feature load_feature(const std::string& path);

}  // namespace stbl
