#include "stbl/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

namespace stbl {

namespace {

constexpr std::array<char, 4> kMagic = {'S', 'T', 'B', 'L'};
constexpr std::uint32_t kMaxRank = 4;

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> bytes{};
  for (int b = 0; b < 4; ++b) bytes[b] = static_cast<char>((v >> (8 * b)) & 0xffu);
  out.write(bytes.data(), bytes.size());
}

void put_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  std::array<char, 8> bytes{};
  for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  out.write(bytes.data(), bytes.size());
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw std::runtime_error("tensor record truncated");
  }
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[b]) << (8 * b);
  return v;
}

double get_f64(std::istream& in) {
  std::array<unsigned char, 8> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw std::runtime_error("tensor record truncated");
  }
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
  return std::bit_cast<double>(bits);
}

void require_rank(const TensorBlob& blob, std::size_t rank, const char* what) {
  if (blob.dims.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     std::to_string(blob.dims.size()));
  }
}

}  // namespace

Feature::Feature(std::size_t height, std::size_t width, std::size_t depth)
    : Feature(height, width, depth, std::vector<double>(height * width * depth, 0.0)) {}

Feature::Feature(std::size_t height, std::size_t width, std::size_t depth, std::vector<double> data)
    : height_(height), width_(width), depth_(depth), data_(std::move(data)) {
  if (height == 0 || width == 0 || depth == 0) {
    throw ShapeError("feature dimensions must be positive");
  }
  if (data_.size() != height * width * depth) {
    throw ShapeError("feature data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(height) + "x" + std::to_string(width) +
                     "x" + std::to_string(depth));
  }
}

Filter::Filter(std::size_t n, std::size_t d_in, std::size_t d_out)
    : Filter(n, d_in, d_out, std::vector<double>(n * n * d_in * d_out, 0.0)) {}

Filter::Filter(std::size_t n, std::size_t d_in, std::size_t d_out, std::vector<double> data)
    : n_(n), d_in_(d_in), d_out_(d_out), data_(std::move(data)) {
  if (n == 0 || d_in == 0 || d_out == 0) throw ShapeError("filter dimensions must be positive");
  if (data_.size() != n * n * d_in * d_out) {
    throw ShapeError("filter data length does not match its dimensions");
  }
}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) throw ShapeError("matrix data length does not match its shape");
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::vector<double> DenseMatrix::multiply(std::span<const double> x) const {
  if (x.size() != cols_) throw ShapeError("matrix-vector size mismatch");
  std::vector<double> y(rows_, 0.0);
  for (std::size_t r = 0; r < rows_; ++r) {
    const double* a = data_.data() + r * cols_;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols_; ++c) acc += a[c] * x[c];
    y[r] = acc;
  }
  return y;
}

std::vector<double> DenseMatrix::multiply_transposed(std::span<const double> y) const {
  if (y.size() != rows_) throw ShapeError("transposed matrix-vector size mismatch");
  std::vector<double> x(cols_, 0.0);
  for (std::size_t r = 0; r < rows_; ++r) {
    const double* a = data_.data() + r * cols_;
    const double yr = y[r];
    if (yr == 0.0) continue;
    for (std::size_t c = 0; c < cols_; ++c) x[c] += a[c] * yr;
  }
  return x;
}

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

std::vector<double> vectorize(const Feature& x) {
  return std::vector<double>(x.data().begin(), x.data().end());
}

Feature devectorize(std::span<const double> v, std::size_t height, std::size_t width,
                    std::size_t depth) {
  return Feature(height, width, depth, std::vector<double>(v.begin(), v.end()));
}

Norm Norm::lpp(double p) {
  if (!(p >= 1.0)) throw std::invalid_argument("lpp norm requires p >= 1");
  return {Kind::Lpp, p};
}

double norm(std::span<const double> v, Norm kind) {
  switch (kind.kind) {
    case Norm::Kind::L1: {
      double s = 0.0;
      for (double x : v) s += std::abs(x);
      return s;
    }
    case Norm::Kind::L2:
    case Norm::Kind::Frobenius: {
      double s = 0.0;
      for (double x : v) s += x * x;
      return std::sqrt(s);
    }
    case Norm::Kind::Linf: {
      double m = 0.0;
      for (double x : v) m = std::max(m, std::abs(x));
      return m;
    }
    case Norm::Kind::Lpp: {
      if (!(kind.p >= 1.0)) throw std::invalid_argument("lpp norm requires p >= 1");
      double s = 0.0;
      for (double x : v) s += std::pow(std::abs(x), kind.p);
      return std::pow(s, 1.0 / kind.p);
    }
  }
  return 0.0;
}

double norm(const Feature& x, Norm kind) { return norm(x.data(), kind); }

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot product size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void write_blob(std::ostream& out, const TensorBlob& blob) {
  std::size_t count = 1;
  for (auto d : blob.dims) count *= d;
  if (count != blob.data.size()) throw ShapeError("blob data does not match its dims");
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, static_cast<std::uint32_t>(blob.dims.size()));
  for (auto d : blob.dims) put_u32(out, d);
  for (double v : blob.data) put_f64(out, v);
  if (!out) throw std::runtime_error("failed writing tensor record");
}

TensorBlob read_blob(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw std::runtime_error("not an STBL tensor record");
  }
  TensorBlob blob;
  const auto rank = get_u32(in);
  if (rank == 0 || rank > kMaxRank) throw std::runtime_error("unsupported tensor rank");
  std::size_t count = 1;
  for (std::uint32_t r = 0; r < rank; ++r) {
    blob.dims.push_back(get_u32(in));
    count *= blob.dims.back();
  }
  blob.data.resize(count);
  for (auto& v : blob.data) v = get_f64(in);
  return blob;
}

TensorBlob to_blob(const Feature& x) {
  return {{static_cast<std::uint32_t>(x.height()), static_cast<std::uint32_t>(x.width()),
           static_cast<std::uint32_t>(x.depth())},
          vectorize(x)};
}

TensorBlob to_blob(const Filter& k) {
  return {{static_cast<std::uint32_t>(k.n()), static_cast<std::uint32_t>(k.n()),
           static_cast<std::uint32_t>(k.d_in()), static_cast<std::uint32_t>(k.d_out())},
          std::vector<double>(k.data().begin(), k.data().end())};
}

TensorBlob to_blob(const DenseMatrix& m) {
  return {{static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())},
          std::vector<double>(m.data().begin(), m.data().end())};
}

TensorBlob to_blob(std::span<const double> v) {
  return {{static_cast<std::uint32_t>(v.size())}, std::vector<double>(v.begin(), v.end())};
}

Feature feature_from_blob(const TensorBlob& blob) {
  require_rank(blob, 3, "feature");
  return Feature(blob.dims[0], blob.dims[1], blob.dims[2], blob.data);
}

Filter filter_from_blob(const TensorBlob& blob) {
  require_rank(blob, 4, "filter");
  if (blob.dims[0] != blob.dims[1]) throw ShapeError("filter must be square");
  return Filter(blob.dims[0], blob.dims[2], blob.dims[3], blob.data);
}

DenseMatrix matrix_from_blob(const TensorBlob& blob) {
  require_rank(blob, 2, "matrix");
  return DenseMatrix(blob.dims[0], blob.dims[1], blob.data);
}

std::vector<double> vector_from_blob(const TensorBlob& blob) {
  require_rank(blob, 1, "vector");
  return blob.data;
}

void save_feature(const std::string& path, const Feature& x) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_blob(out, to_blob(x));
}

Feature load_feature(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return feature_from_blob(read_blob(in));
}

}  // namespace stbl
