#include "stbl/train.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>

#include "stbl/parallel.hpp"

namespace stbl {

std::vector<double> softmax(std::span<const double> u) {
  std::vector<double> out(u.size());
  if (u.empty()) return out;
  const double top = *std::max_element(u.begin(), u.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    out[i] = std::exp(u[i] - top);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

double cross_entropy(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ShapeError("cross_entropy: length mismatch");
  double h = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (u[i] == 0.0) continue;
    h -= u[i] * std::log(std::max(v[i], kLogClamp));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Datasets

std::vector<double> one_hot(std::size_t label, std::size_t classes) {
  if (label >= classes) throw std::invalid_argument("label out of range");
  std::vector<double> y(classes, 0.0);
  y[label] = 1.0;
  return y;
}

std::size_t Dataset::label(std::size_t i) const {
  const auto& y = labels.at(i);
  return static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
}

void Dataset::validate() const {
  if (images.size() != labels.size()) throw std::invalid_argument("dataset: image/label count mismatch");
  if (classes == 0) throw std::invalid_argument("dataset: no classes");
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i].same_shape(images.front())) throw ShapeError("dataset: image dims not uniform");
    const auto& y = labels[i];
    if (y.size() != classes) throw std::invalid_argument("dataset: label length differs from class count");
    std::size_t ones = 0;
    for (double v : y) {
      if (v == 1.0) ++ones;
      else if (v != 0.0) throw std::invalid_argument("dataset: label is not one-hot");
    }
    if (ones != 1) throw std::invalid_argument("dataset: label is not one-hot");
  }
}

namespace {

std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("idx: truncated header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) | b[3];
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

struct IdxArray {
  unsigned char type = 0;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;
};

IdxArray read_idx_array(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  const std::uint32_t magic = read_be32(in);
  if ((magic >> 16) != 0) throw std::runtime_error("idx: bad magic in " + path);
  IdxArray arr;
  arr.type = static_cast<unsigned char>((magic >> 8) & 0xff);
  const std::size_t rank = magic & 0xff;
  if (rank == 0) throw std::runtime_error("idx: zero rank in " + path);
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    arr.dims.push_back(read_be32(in));
    count *= arr.dims.back();
  }
  arr.values.resize(count);
  auto need = [&](bool ok) {
    if (!ok) throw std::runtime_error("idx: truncated data in " + path);
  };
  switch (arr.type) {
    case 0x08: {
      std::vector<unsigned char> raw(count);
      need(static_cast<bool>(in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count))));
      for (std::size_t i = 0; i < count; ++i) arr.values[i] = raw[i];
      break;
    }
    case 0x0D:
    case 0x0E: {
      const std::size_t width = arr.type == 0x0D ? 4 : 8;
      unsigned char b[8];
      for (std::size_t i = 0; i < count; ++i) {
        need(static_cast<bool>(in.read(reinterpret_cast<char*>(b), static_cast<std::streamsize>(width))));
        std::uint64_t bits = 0;
        for (std::size_t k = 0; k < width; ++k) bits = (bits << 8) | b[k];
        if (width == 4) {
          const auto u = static_cast<std::uint32_t>(bits);
          float f;
          std::memcpy(&f, &u, 4);
          arr.values[i] = f;
        } else {
          std::memcpy(&arr.values[i], &bits, 8);
        }
      }
      break;
    }
    default:
      throw std::runtime_error("idx: unsupported element type in " + path);
  }
  return arr;
}

}  // namespace

Dataset read_idx(const std::string& images_path, const std::string& labels_path, std::size_t classes) {
  const IdxArray img = read_idx_array(images_path);
  const IdxArray lab = read_idx_array(labels_path);
  if (img.dims.size() != 3 && img.dims.size() != 4)
    throw std::runtime_error("idx: images must have rank 3 or 4");
  if (lab.dims.size() != 1 || lab.type != 0x08) throw std::runtime_error("idx: labels must be rank-1 bytes");
  const std::size_t n = img.dims[0], h = img.dims[1], w = img.dims[2];
  const std::size_t d = img.dims.size() == 4 ? img.dims[3] : 1;
  if (lab.dims[0] != n) throw std::runtime_error("idx: image and label counts differ");
  const double scale = img.type == 0x08 ? 1.0 / 255.0 : 1.0;

  Dataset data;
  std::size_t top = 0;
  for (double v : lab.values) top = std::max(top, static_cast<std::size_t>(v));
  data.classes = classes == 0 ? top + 1 : classes;
  if (top >= data.classes) throw std::runtime_error("idx: label exceeds class count");
  data.images.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    Feature x(h, w, d);
    // IDX stores channels innermost.
    const double* src = img.values.data() + s * h * w * d;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t k = 0; k < d; ++k) x(i, j, k) = src[(i * w + j) * d + k] * scale;
    data.images.push_back(std::move(x));
    data.labels.push_back(one_hot(static_cast<std::size_t>(lab.values[s]), data.classes));
  }
  return data;
}

void write_idx(const std::string& images_path, const std::string& labels_path, const Dataset& data) {
  data.validate();
  if (data.classes > 256) throw std::invalid_argument("idx: more than 256 classes");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw std::runtime_error("cannot open idx output");
  const std::size_t n = data.size();
  const std::size_t h = n ? data.images[0].height() : 0;
  const std::size_t w = n ? data.images[0].width() : 0;
  const std::size_t d = n ? data.images[0].depth() : 1;
  const bool rank4 = d > 1;
  write_be32(img, 0x0E00u | (rank4 ? 4u : 3u));
  write_be32(img, static_cast<std::uint32_t>(n));
  write_be32(img, static_cast<std::uint32_t>(h));
  write_be32(img, static_cast<std::uint32_t>(w));
  if (rank4) write_be32(img, static_cast<std::uint32_t>(d));
  for (const auto& x : data.images)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t k = 0; k < d; ++k) {
          std::uint64_t bits;
          const double v = x(i, j, k);
          std::memcpy(&bits, &v, 8);
          unsigned char b[8];
          for (int t = 7; t >= 0; --t) {
            b[t] = static_cast<unsigned char>(bits & 0xff);
            bits >>= 8;
          }
          img.write(reinterpret_cast<const char*>(b), 8);
        }
  write_be32(lab, 0x0801u);
  write_be32(lab, static_cast<std::uint32_t>(n));
  for (std::size_t s = 0; s < n; ++s) lab.put(static_cast<char>(data.label(s)));
  if (!img || !lab) throw std::runtime_error("idx: write failed");
}

DatasetSplit synthetic_bars(const SyntheticConfig& config) {
  if (config.height < 2 || config.width < 2) throw std::invalid_argument("synthetic: images must be at least 2x2");
  if (config.noise < 0.0) throw std::invalid_argument("synthetic: negative noise");
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  auto make = [&](std::size_t count) {
    Dataset data;
    data.classes = 2;
    for (std::size_t s = 0; s < count; ++s) {
      const std::size_t label = s % 2;
      Feature x(config.height, config.width, 1);
      if (label == 0) {
        const std::size_t row = std::uniform_int_distribution<std::size_t>(0, config.height - 1)(rng);
        for (std::size_t j = 0; j < config.width; ++j) x(row, j, 0) = 1.0;
      } else {
        const std::size_t col = std::uniform_int_distribution<std::size_t>(0, config.width - 1)(rng);
        for (std::size_t i = 0; i < config.height; ++i) x(i, col, 0) = 1.0;
      }
      for (double& v : x.data()) v += config.noise * noise(rng);
      data.images.push_back(std::move(x));
      data.labels.push_back(one_hot(label, 2));
    }
    return data;
  };
  DatasetSplit split;
  split.train = make(config.train);
  split.test = make(config.test);
  return split;
}

Normalization fit_normalization(const Dataset& data) {
  if (data.images.empty()) throw std::invalid_argument("normalization of an empty dataset");
  const std::size_t d = data.images[0].depth();
  Normalization norm{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  const double count = static_cast<double>(data.size() * data.images[0].channel_size());
  for (std::size_t k = 0; k < d; ++k) {
    double sum = 0.0;
    for (const auto& x : data.images)
      for (double v : x.channel(k)) sum += v;
    const double mu = sum / count;
    double sq = 0.0;
    for (const auto& x : data.images)
      for (double v : x.channel(k)) sq += (v - mu) * (v - mu);
    norm.mean[k] = mu;
    const double sd = std::sqrt(sq / count);
    norm.stdev[k] = sd > 0.0 ? sd : 1.0;
  }
  return norm;
}

void apply_normalization(Dataset& data, const Normalization& norm) {
  for (auto& x : data.images) {
    if (x.depth() != norm.mean.size()) throw ShapeError("normalization depth mismatch");
    for (std::size_t k = 0; k < x.depth(); ++k)
      for (double& v : x.channel(k)) v = (v - norm.mean[k]) / norm.stdev[k];
  }
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

template <class P, class Fn>
void visit_trainable(const NetworkSpec& spec, P& params, Fn&& fn) {
  fn("first.k", params.first.k.data());
  fn("first.b", std::span(params.first.b));
  for (std::size_t r = 0; r < params.residual.size(); ++r) {
    auto& layer = params.residual[r];
    const std::string p = "residual" + std::to_string(r) + ".";
    fn(p + "k1", layer.k1.data());
    if (spec.variant == Variant::ResNetD) fn(p + "k2", layer.k2.data());
    fn(p + "b1", std::span(layer.b1));
    fn(p + "b2", std::span(layer.b2));
    if (spec.batchnorm) {
      fn(p + "bn1.gamma", std::span(layer.bn1.gamma));
      fn(p + "bn1.beta", std::span(layer.bn1.beta));
    }
  }
  for (std::size_t s = 0; s < 2; ++s) {
    fn("pool" + std::to_string(s) + ".k", params.pool[s].k.data());
    fn("pool" + std::to_string(s) + ".b", std::span(params.pool[s].b));
  }
  fn("dense.w", params.w.data());
  fn("dense.b", std::span(params.dense_bias));
}

std::vector<std::span<double>> trainable_spans(const NetworkSpec& spec, ParamStore& params) {
  std::vector<std::span<double>> out;
  visit_trainable(spec, params, [&](const std::string&, std::span<double> v) { out.push_back(v); });
  return out;
}

// Zero-filled copy with the same shapes, including batch-norm fields.
ParamStore zeros_like(const ParamStore& params) {
  ParamStore g = params;
  auto clear = [](auto&& v) { std::fill(v.begin(), v.end(), 0.0); };
  clear(g.first.k.data());
  clear(g.first.b);
  for (auto& r : g.residual) {
    clear(r.k1.data());
    clear(r.k2.data());
    clear(r.b1);
    clear(r.b2);
    for (auto* bn : {&r.bn1, &r.bn2}) {
      clear(bn->gamma);
      clear(bn->beta);
      clear(bn->mean);
      clear(bn->sigma);
    }
  }
  for (auto& p : g.pool) {
    clear(p.k.data());
    clear(p.b);
  }
  clear(g.w.data());
  clear(g.dense_bias);
  return g;
}

}  // namespace

void for_each_trainable(const NetworkSpec& spec, ParamStore& params,
                        const std::function<void(const std::string&, std::span<double>)>& fn) {
  visit_trainable(spec, params, fn);
}

void for_each_trainable(const NetworkSpec& spec, const ParamStore& params,
                        const std::function<void(const std::string&, std::span<const double>)>& fn) {
  visit_trainable(spec, params, fn);
}

void variance_scaling(Filter& k, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(k.n() * k.n() * k.d_in());
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (double& v : k.data()) v = dist(rng);
}

void uniform_scaling(Filter& k, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(k.n() * k.n() * k.d_in());
  const double limit = std::sqrt(3.0 / fan_in);
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : k.data()) v = dist(rng);
}

void truncated_normal(std::span<double> values, double sigma, std::mt19937_64& rng) {
  if (!(sigma > 0.0)) throw std::invalid_argument("truncated_normal: sigma must be positive");
  std::normal_distribution<double> dist(0.0, sigma);
  for (double& v : values) {
    do {
      v = dist(rng);
    } while (std::abs(v) > 2.0 * sigma);
  }
}

ParamStore init_params(const NetworkSpec& spec, std::uint64_t seed, const InitOptions& options) {
  spec.validate();
  ParamStore params = zero_params(spec);
  std::mt19937_64 rng(seed);
  uniform_scaling(params.first.k, rng);
  for (auto& r : params.residual) {
    variance_scaling(r.k1, rng);
    if (spec.variant == Variant::ResNetD) {
      variance_scaling(r.k2, rng);
      for (double& v : r.k2.data()) v = std::abs(v);
    }
  }
  for (auto& p : params.pool) variance_scaling(p.k, rng);
  const double sigma = options.dense_sigma > 0.0
                           ? options.dense_sigma
                           : 1.0 / static_cast<double>(spec.final_depth() * spec.classes);
  truncated_normal(params.w.data(), sigma, rng);
  return params;
}

// ---------------------------------------------------------------------------
// Loss and gradients

double regularizer(const NetworkSpec& spec, const ParamStore& params, double alpha,
                   ParamStore* gradient) {
  if (alpha < 0.0) throw std::invalid_argument("regularizer weight must be nonnegative");
  double value = 0.0;
  auto l1 = [&](std::span<const double> v, std::span<double> g) -> void {
    for (std::size_t i = 0; i < v.size(); ++i) {
      value += alpha * std::abs(v[i]);
      if (!g.empty()) g[i] += v[i] > 0.0 ? alpha : (v[i] < 0.0 ? -alpha : 0.0);
    }
  };
  auto sq = [&](std::span<const double> v, std::span<double> g) -> void {
    for (std::size_t i = 0; i < v.size(); ++i) {
      value += 0.5 * alpha * v[i] * v[i];
      if (!g.empty()) g[i] += alpha * v[i];
    }
  };
  auto grad = [&](auto get) -> std::span<double> {
    if (!gradient) return {};
    return get(*gradient);
  };
  const bool d = spec.variant == Variant::ResNetD;
  const std::function<void(std::span<const double>, std::span<double>)> outer =
      d ? std::function<void(std::span<const double>, std::span<double>)>(l1)
        : std::function<void(std::span<const double>, std::span<double>)>(sq);
  outer(params.first.k.data(), grad([](ParamStore& g) { return g.first.k.data(); }));
  for (std::size_t r = 0; r < params.residual.size(); ++r) {
    sq(params.residual[r].k1.data(), grad([r](ParamStore& g) { return g.residual[r].k1.data(); }));
    if (d) sq(params.residual[r].k2.data(), grad([r](ParamStore& g) { return g.residual[r].k2.data(); }));
  }
  for (std::size_t s = 0; s < 2; ++s)
    sq(params.pool[s].k.data(), grad([s](ParamStore& g) { return g.pool[s].k.data(); }));
  outer(params.w.data(), grad([](ParamStore& g) { return g.w.data(); }));
  return value;
}

namespace {

using Batch = std::vector<Feature>;

void add_scaled(std::span<double> y, double a, std::span<const double> x) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

void add_to(std::vector<double>& y, const std::vector<double>& x) { add_scaled(y, 1.0, x); }

struct ResidualCache {
  Batch x, xhat1, r, xhat2, o;
  BatchStatistics st1, st2;
};

struct PoolCache {
  Batch x, z, o;
};

// Replaces z by its normalization x^ = (z - mu) / sigma; returns the statistics used.
BatchStatistics normalize(Batch& z, const BatchNormParams& bn, StatsMode mode) {
  BatchStatistics st = mode == StatsMode::Batch ? batch_statistics(z, bn.epsilon)
                                                : BatchStatistics{bn.mean, bn.sigma};
  for (auto& f : z)
    for (std::size_t c = 0; c < f.depth(); ++c)
      for (double& v : f.channel(c)) v = (v - st.mean[c]) / st.sigma[c];
  return st;
}

Feature scale_shift(const Feature& xhat, std::span<const double> gamma, std::span<const double> beta) {
  Feature y = xhat;
  for (std::size_t c = 0; c < y.depth(); ++c)
    for (double& v : y.channel(c)) v = gamma[c] * v + beta[c];
  return y;
}

// In: dL/d(gamma x^ + beta). Out: dL/dz. With batch statistics the mean and
// sigma depend on every example, giving the two correction terms.
void batchnorm_backward(Batch& d, const Batch& xhat, std::span<const double> gamma,
                        std::span<const double> sigma, StatsMode mode, std::vector<double>* dgamma,
                        std::vector<double>* dbeta) {
  const std::size_t depth = d.front().depth();
  const double count = static_cast<double>(d.size() * d.front().channel_size());
  for (std::size_t c = 0; c < depth; ++c) {
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t b = 0; b < d.size(); ++b) {
      const auto g = d[b].channel(c);
      const auto xh = xhat[b].channel(c);
      for (std::size_t p = 0; p < g.size(); ++p) {
        s1 += g[p];
        s2 += g[p] * xh[p];
      }
    }
    if (dgamma) (*dgamma)[c] += s2;
    if (dbeta) (*dbeta)[c] += s1;
    const double scale = gamma[c] / sigma[c];
    for (std::size_t b = 0; b < d.size(); ++b) {
      auto g = d[b].channel(c);
      const auto xh = xhat[b].channel(c);
      for (std::size_t p = 0; p < g.size(); ++p) {
        g[p] = mode == StatsMode::Batch ? scale * (g[p] - s1 / count - xh[p] * s2 / count)
                                        : scale * g[p];
      }
    }
  }
}

void mask_positive(Feature& g, const Feature& ref) {
  auto gd = g.data();
  const auto rd = ref.data();
  for (std::size_t i = 0; i < gd.size(); ++i)
    if (!(rd[i] > 0.0)) gd[i] = 0.0;
}

}  // namespace

LossResult loss_total(const NetworkSpec& spec, const ParamStore& params,
                      std::span<const Feature> images, std::span<const std::vector<double>> labels,
                      double alpha, StatsMode mode) {
  spec.validate();
  check_shapes(spec, params);
  if (images.empty()) throw std::invalid_argument("loss_total: empty batch");
  if (images.size() != labels.size()) throw std::invalid_argument("loss_total: image/label count mismatch");
  for (const auto& x : images) {
    if (x.height() != spec.height || x.width() != spec.width || x.depth() != spec.d0)
      throw ShapeError("loss_total: input does not match the network's input dimensions");
  }
  for (const auto& y : labels)
    if (y.size() != spec.classes) throw ShapeError("loss_total: label length differs from class count");

  const std::size_t batch = images.size();
  const Padding pad = spec.padding;
  const std::size_t n = spec.kernel;
  const bool d_variant = spec.variant == Variant::ResNetD;
  const auto schedule = spec.schedule();

  LossResult result;
  result.gradient = zeros_like(params);
  ParamStore& grad = result.gradient;
  if (spec.batchnorm) {
    result.bn1_stats.resize(params.residual.size());
    result.bn2_stats.resize(params.residual.size());
  }

  Batch first_input;
  std::vector<ResidualCache> rcache(params.residual.size());
  std::array<PoolCache, 2> pcache;
  Batch global_input;
  std::vector<std::vector<double>> pooled(batch);

  // ---- forward
  Batch x(images.begin(), images.end());
  for (const auto& layer : schedule) {
    switch (layer.kind) {
      case LayerKind::Conv: {
        first_input = x;
        for (auto& f : x) {
          f = conv2d(f, params.first.k, 1, pad);
          add_channel_bias(f, params.first.b);
        }
        break;
      }
      case LayerKind::Residual: {
        const auto& p = params.residual[layer.slot];
        auto& c = rcache[layer.slot];
        c.x = x;
        Batch z(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          z[b] = conv2d(x[b], p.k1, 1, pad);
          add_channel_bias(z[b], p.b1);
        }
        c.r.resize(batch);
        if (spec.batchnorm) {
          c.st1 = normalize(z, p.bn1, mode);
          c.xhat1 = z;
          for (std::size_t b = 0; b < batch; ++b) c.r[b] = relu(scale_shift(z[b], p.bn1.gamma, p.bn1.beta));
        } else {
          for (std::size_t b = 0; b < batch; ++b) c.r[b] = relu(z[b]);
        }
        Batch s(batch);
        for (std::size_t b = 0; b < batch; ++b)
          s[b] = d_variant ? conv2d(c.r[b], p.k2, 1, pad) : adjoint_conv(c.r[b], p.k1, pad);
        if (spec.batchnorm) {
          c.st2 = normalize(s, p.bn2, mode);
          c.xhat2 = s;
          for (auto& f : s) f = scale_shift(f, p.bn2.gamma, p.bn2.beta);
        }
        c.o.resize(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          Feature o = x[b];
          add_scaled(o.data(), -1.0, s[b].data());
          add_channel_bias(o, p.b2);
          x[b] = relu(o);
          c.o[b] = std::move(o);
        }
        if (spec.batchnorm) {
          result.bn1_stats[layer.slot] = c.st1;
          result.bn2_stats[layer.slot] = c.st2;
        }
        break;
      }
      case LayerKind::Pool: {
        const auto& p = params.pool[layer.slot];
        auto& c = pcache[layer.slot];
        c.x = x;
        c.z.resize(batch);
        c.o.resize(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          c.z[b] = conv2d(x[b], p.k, 2, pad);
          add_channel_bias(c.z[b], p.b);
          Feature o = pad_channels(pool2(x[b]), p.k.d_out());
          add_scaled(o.data(), -1.0, relu(c.z[b]).data());
          x[b] = relu(o);
          c.o[b] = std::move(o);
        }
        break;
      }
      case LayerKind::Global: {
        global_input = x;
        for (std::size_t b = 0; b < batch; ++b) pooled[b] = layer_global(x[b]);
        break;
      }
      case LayerKind::Dense:
        break;
    }
  }

  // ---- loss and dL/dlogits
  std::vector<std::vector<double>> dlogits(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto logits = layer_dense(pooled[b], params.w, params.dense_bias);
    const auto prob = softmax(logits);
    const auto& y = labels[b];
    result.data_term += cross_entropy(y, prob);
    const std::size_t guess = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    const std::size_t truth = static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
    if (guess == truth) ++result.correct;
    // d/du_j of -sum_i y_i log max(p_i, eps); clamped entries contribute nothing.
    double mass = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (prob[i] > kLogClamp) mass += y[i];
    auto& g = dlogits[b];
    g.resize(y.size());
    for (std::size_t j = 0; j < y.size(); ++j) g[j] = (prob[j] > kLogClamp ? -y[j] : 0.0) + prob[j] * mass;
  }

  // ---- backward
  Batch dx(batch);
  for (auto it = schedule.rbegin(); it != schedule.rend(); ++it) {
    const auto& layer = *it;
    switch (layer.kind) {
      case LayerKind::Dense: {
        for (std::size_t b = 0; b < batch; ++b) {
          const auto& g = dlogits[b];
          for (std::size_t r = 0; r < g.size(); ++r) {
            grad.dense_bias[r] += g[r];
            for (std::size_t c = 0; c < pooled[b].size(); ++c) grad.w(r, c) += g[r] * pooled[b][c];
          }
        }
        break;
      }
      case LayerKind::Global: {
        for (std::size_t b = 0; b < batch; ++b) {
          const auto dg = params.w.multiply_transposed(dlogits[b]);
          const Feature& xin = global_input[b];
          Feature d(xin.height(), xin.width(), xin.depth());
          const double inv = 1.0 / static_cast<double>(xin.channel_size());
          for (std::size_t c = 0; c < xin.depth(); ++c) {
            auto dc = d.channel(c);
            const auto xc = xin.channel(c);
            for (std::size_t q = 0; q < dc.size(); ++q) dc[q] = xc[q] > 0.0 ? dg[c] * inv : 0.0;
          }
          dx[b] = std::move(d);
        }
        break;
      }
      case LayerKind::Pool: {
        const auto& p = params.pool[layer.slot];
        auto& gp = grad.pool[layer.slot];
        const auto& c = pcache[layer.slot];
        for (std::size_t b = 0; b < batch; ++b) {
          Feature d = std::move(dx[b]);
          mask_positive(d, c.o[b]);
          Feature dz = d;
          for (double& v : dz.data()) v = -v;
          mask_positive(dz, c.z[b]);
          add_to(gp.b, channel_sums(dz));
          const Filter dk = filter_gradient(c.x[b], dz, n, 2, pad);
          add_scaled(gp.k.data(), 1.0, dk.data());
          const Feature& xin = c.x[b];
          Feature back = pool2_adjoint(pad_channels_adjoint(d, xin.depth()), xin.height(), xin.width());
          add_scaled(back.data(), 1.0, adjoint_conv(dz, p.k, 2, pad, xin.height(), xin.width()).data());
          dx[b] = std::move(back);
        }
        break;
      }
      case LayerKind::Residual: {
        const auto& p = params.residual[layer.slot];
        auto& gr = grad.residual[layer.slot];
        auto& c = rcache[layer.slot];
        Batch ds(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          mask_positive(dx[b], c.o[b]);
          add_to(gr.b2, channel_sums(dx[b]));
          ds[b] = dx[b];
          for (double& v : ds[b].data()) v = -v;
        }
        // bn2's gamma and beta are frozen: no accumulation.
        if (spec.batchnorm) batchnorm_backward(ds, c.xhat2, p.bn2.gamma, c.st2.sigma, mode, nullptr, nullptr);
        Batch dz(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          if (d_variant) {
            add_scaled(gr.k2.data(), 1.0, filter_gradient(c.r[b], ds[b], n, 1, pad).data());
            dz[b] = adjoint_conv(ds[b], p.k2, pad);
          } else {
            // s = A^T r, so <ds, A^T r> = <conv(ds, K), r>.
            add_scaled(gr.k1.data(), 1.0, filter_gradient(ds[b], c.r[b], n, 1, pad).data());
            dz[b] = conv2d(ds[b], p.k1, 1, pad);
          }
          mask_positive(dz[b], c.r[b]);
        }
        if (spec.batchnorm)
          batchnorm_backward(dz, c.xhat1, p.bn1.gamma, c.st1.sigma, mode, &gr.bn1.gamma, &gr.bn1.beta);
        for (std::size_t b = 0; b < batch; ++b) {
          add_scaled(gr.k1.data(), 1.0, filter_gradient(c.x[b], dz[b], n, 1, pad).data());
          add_to(gr.b1, channel_sums(dz[b]));
          add_scaled(dx[b].data(), 1.0, adjoint_conv(dz[b], p.k1, pad).data());
        }
        break;
      }
      case LayerKind::Conv: {
        for (std::size_t b = 0; b < batch; ++b) {
          add_scaled(grad.first.k.data(), 1.0, filter_gradient(first_input[b], dx[b], n, 1, pad).data());
          add_to(grad.first.b, channel_sums(dx[b]));
        }
        break;
      }
    }
  }

  result.regularizer = regularizer(spec, params, alpha, &grad);
  result.value = result.data_term + result.regularizer;
  return result;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("train: learning rate must be finite and nonnegative");
  if (decay_steps < 1) throw std::invalid_argument("train: decay steps must be at least 1");
  if (total_steps < decay_steps) throw std::invalid_argument("train: total steps must be at least the decay steps");
  if (!(alpha >= 0.0)) throw std::invalid_argument("train: regularization weight must be nonnegative");
  if (eval_interval == 0) throw std::invalid_argument("train: eval interval must be positive");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0))
    throw std::invalid_argument("train: batch-norm momentum must lie in [0, 1]");
}

namespace {

// Rescale target slightly inside the limit so a second projection sees a
// norm strictly below it and leaves the parameters alone.
constexpr double kProjectionMargin = 1e-6;

void shrink_to(std::span<double> values, double current, double limit) {
  if (current <= limit) return;
  const double s = limit * (1.0 - kProjectionMargin) / current;
  for (double& v : values) v *= s;
}

}  // namespace

void project(const NetworkSpec& spec, const TrainConfig& config, ParamStore& params) {
  const bool d_variant = spec.variant == Variant::ResNetD;
  if (d_variant && config.clamp_k2) {
    for (auto& r : params.residual)
      for (double& v : r.k2.data()) v = std::max(v, 0.0);
  }
  if (!d_variant && config.spectral_rescale) {
    for (const auto& layer : spec.schedule()) {
      if (layer.kind != LayerKind::Residual) continue;
      const auto dims = spec.stage(layer.stage);
      auto& k = params.residual[layer.slot].k1;
      shrink_to(k.data(), opnorm_l2(k, dims.height, dims.width, 1, spec.padding).value, std::sqrt(2.0));
    }
  }
  if (config.boundary_rescale) {
    auto& k = params.first.k;
    const double first = d_variant ? opnorm_linf(k, spec.height, spec.width, spec.padding)
                                   : opnorm_l2(k, spec.height, spec.width, 1, spec.padding).value;
    shrink_to(k.data(), first, 1.0);
    const double dense = d_variant ? opnorm_linf(params.w) : opnorm_l2(params.w).value;
    shrink_to(params.w.data(), dense, 1.0);
  }
}

double accuracy(const NetworkSpec& spec, const ParamStore& params, const Dataset& data,
                std::size_t threads) {
  if (data.size() == 0) throw std::invalid_argument("accuracy of an empty dataset");
  const auto logits = forward_batch(spec, params, data.images, threads);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& u = logits[i];
    const auto guess = static_cast<std::size_t>(std::max_element(u.begin(), u.end()) - u.begin());
    if (guess == data.label(i)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train(const NetworkSpec& spec, const TrainConfig& config, const DatasetSplit& data,
                  ParamStore initial) {
  spec.validate();
  config.validate();
  check_shapes(spec, initial);
  data.train.validate();
  if (data.train.size() == 0) throw std::invalid_argument("train: empty training set");
  if (data.train.classes != spec.classes) throw std::invalid_argument("train: class count differs from network");
  const bool evaluate = data.test.size() > 0;
  if (evaluate) data.test.validate();

  TrainResult result;
  result.params = std::move(initial);
  ParamStore& params = result.params;

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  std::vector<Feature> images;
  std::vector<std::vector<double>> labels;
  for (std::size_t step = 1; step <= config.total_steps; ++step) {
    const double lr = config.learning_rate *
                      std::pow(0.1, static_cast<double>((step - 1) / config.decay_steps));
    images.clear();
    labels.clear();
    for (std::size_t i = 0; i < config.batch_size; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      images.push_back(data.train.images[order[cursor]]);
      labels.push_back(data.train.labels[order[cursor]]);
      ++cursor;
    }

    LossResult loss = loss_total(spec, params, images, labels, config.alpha, StatsMode::Batch);
    if (!std::isfinite(loss.value)) throw DivergenceError(step, std::move(result.history));

    auto p = trainable_spans(spec, params);
    auto g = trainable_spans(spec, loss.gradient);
    for (std::size_t t = 0; t < p.size(); ++t) add_scaled(p[t], -lr, g[t]);

    if (spec.batchnorm) {
      const double mom = config.bn_momentum;
      auto ema = [mom](std::vector<double>& run, const std::vector<double>& now) {
        for (std::size_t c = 0; c < run.size(); ++c) run[c] = mom * run[c] + (1.0 - mom) * now[c];
      };
      for (std::size_t r = 0; r < params.residual.size(); ++r) {
        ema(params.residual[r].bn1.mean, loss.bn1_stats[r].mean);
        ema(params.residual[r].bn1.sigma, loss.bn1_stats[r].sigma);
        ema(params.residual[r].bn2.mean, loss.bn2_stats[r].mean);
        ema(params.residual[r].bn2.sigma, loss.bn2_stats[r].sigma);
      }
    }
    project(spec, config, params);

    HistoryEntry entry;
    entry.step = step;
    entry.learning_rate = lr;
    entry.loss = loss.value;
    if (step % config.eval_interval == 0 || step == config.total_steps) {
      if (evaluate) entry.test_accuracy = accuracy(spec, params, data.test);
      if (config.certify_history) {
        try {
          const auto cert = assemble_certificate(spec, params);
          entry.c = cert.c;
          entry.a = cert.a;
        } catch (const ConvergenceError&) {
          // left as NaN; the history still records the step
        }
      }
    }
    result.history.push_back(entry);
  }
  return result;
}

TrainResult train(const NetworkSpec& spec, const TrainConfig& config, const DatasetSplit& data) {
  return train(spec, config, data, init_params(spec, config.seed));
}

void write_history(std::ostream& out, const std::vector<HistoryEntry>& history) {
  auto field = [&](double v) {
    if (std::isnan(v)) return;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << buf;
  };
  out << "step,learning_rate,loss,test_accuracy,c,a\n";
  for (const auto& e : history) {
    out << e.step << ',';
    field(e.learning_rate);
    out << ',';
    field(e.loss);
    out << ',';
    field(e.test_accuracy);
    out << ',';
    field(e.c);
    out << ',';
    field(e.a);
    out << '\n';
  }
}

}  // namespace stbl
