#include "stbl/network.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <istream>
#include <ostream>

#include "stbl/parallel.hpp"

namespace stbl {

namespace {

Feature as_feature(std::span<const double> v) {
  return Feature(1, 1, v.size(), std::vector<double>(v.begin(), v.end()));
}

void require_len(std::span<const double> v, std::size_t n, const char* what) {
  if (v.size() != n) {
    throw ShapeError(std::string(what) + ": expected length " + std::to_string(n) + ", got " +
                     std::to_string(v.size()));
  }
}

void require_filter(const Filter& k, std::size_t n, std::size_t d_in, std::size_t d_out,
                    const std::string& what) {
  if (k.n() != n || k.d_in() != d_in || k.d_out() != d_out) {
    throw ShapeError(what + ": expected filter " + std::to_string(n) + "x" + std::to_string(n) +
                     "x" + std::to_string(d_in) + "x" + std::to_string(d_out));
  }
}

void check_nonnegative(const Filter& k) {
  for (double v : k.data()) {
    if (v < 0.0) throw ConstraintError("second residual filter has a negative entry");
  }
}

// (x - s + b2)_+ with s the residual branch output.
Feature residual_update(const Feature& x, const Feature& s, std::span<const double> b2) {
  if (!x.same_shape(s)) throw ShapeError("residual branch changed the feature shape");
  require_len(b2, x.depth(), "residual bias b2");
  Feature y(x.height(), x.width(), x.depth());
  const std::size_t hw = x.channel_size();
  const auto xd = x.data();
  const auto sd = s.data();
  auto yd = y.data();
  for (std::size_t k = 0; k < x.depth(); ++k)
    for (std::size_t p = k * hw; p < (k + 1) * hw; ++p) yd[p] = std::max(xd[p] - sd[p] + b2[k], 0.0);
  return y;
}

Feature conv_bias_relu(const Feature& x, const Filter& k, std::span<const double> b,
                       std::size_t stride, Padding pad) {
  Feature z = conv2d(x, k, stride, pad);
  add_channel_bias(z, b);
  for (double& v : z.data()) v = std::max(v, 0.0);
  return z;
}

// Rethrows a layer failure with the layer index attached.
[[noreturn]] void rethrow_with_layer(std::size_t n) {
  try {
    throw;
  } catch (const ConstraintError& e) {
    throw ConstraintError("layer " + std::to_string(n) + ": " + e.what());
  } catch (const LayerError&) {
    throw;
  } catch (const std::exception& e) {
    throw LayerError(n, e.what());
  }
}

// --- model file helpers -----------------------------------------------------

constexpr std::array<char, 7> kModelMagic = {'S', 'T', 'B', 'L', 'N', 'E', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.put(static_cast<char>((v >> (8 * b)) & 0xffu));
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw std::runtime_error("model header truncated");
    v |= static_cast<std::uint32_t>(c & 0xff) << (8 * b);
  }
  return v;
}

void put_vec(std::ostream& out, std::span<const double> v) { write_blob(out, to_blob(v)); }
std::vector<double> get_vec(std::istream& in) { return vector_from_blob(read_blob(in)); }

}  // namespace

const char* to_string(Variant v) { return v == Variant::ResNetD ? "resnet-d" : "resnet-s"; }

Variant variant_from_string(const std::string& name) {
  if (name == "resnet-d" || name == "D" || name == "d") return Variant::ResNetD;
  if (name == "resnet-s" || name == "S" || name == "s") return Variant::ResNetS;
  throw std::invalid_argument("unknown network variant '" + name + "'");
}

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Residual: return "residual";
    case LayerKind::Pool: return "pool";
    case LayerKind::Global: return "global";
    case LayerKind::Dense: return "dense";
  }
  return "?";
}

void NetworkSpec::validate() const {
  auto need = [](bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
  };
  need(m >= 1, "m must be at least 1");
  need(height >= 1 && width >= 1, "input extent must be positive");
  need(d0 >= 1, "input depth d0 must be positive");
  need(d1 >= 1, "first-stage depth d1 must be positive");
  need(classes >= 1, "class count must be positive");
  need(kernel >= 1, "kernel size must be positive");
}

StageDims NetworkSpec::stage(std::size_t s) const {
  if (s > 2) throw std::out_of_range("stage index must be 0, 1 or 2");
  StageDims d{height, width, d1};
  for (std::size_t i = 0; i < s; ++i) {
    d.height = strided_extent(d.height, 2);
    d.width = strided_extent(d.width, 2);
    d.depth *= 2;
  }
  return d;
}

std::vector<LayerInfo> NetworkSpec::schedule() const {
  std::vector<LayerInfo> out;
  out.reserve(num_layers());
  std::size_t n = 0;
  std::size_t res = 0;
  out.push_back({LayerKind::Conv, n++, 0, 0});
  const std::array<std::size_t, 3> block = {m, m - 1, m - 1};
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t r = 0; r < block[s]; ++r) out.push_back({LayerKind::Residual, n++, s, res++});
    if (s < 2) out.push_back({LayerKind::Pool, n++, s, s});
  }
  out.push_back({LayerKind::Global, n++, 2, 0});
  out.push_back({LayerKind::Dense, n++, 2, 0});
  return out;
}

ParamStore zero_params(const NetworkSpec& spec) {
  spec.validate();
  const std::size_t n = spec.kernel;
  ParamStore p;
  p.first = {Filter(n, spec.d0, spec.d1), std::vector<double>(spec.d1, 0.0)};
  for (const auto& layer : spec.schedule()) {
    const std::size_t d = spec.stage(layer.stage).depth;
    if (layer.kind == LayerKind::Residual) {
      ResidualParams r;
      r.k1 = Filter(n, d, d);
      if (spec.variant == Variant::ResNetD) r.k2 = Filter(n, d, d);
      r.b1.assign(d, 0.0);
      r.b2.assign(d, 0.0);
      r.bn1 = BatchNormParams::identity(d);
      r.bn2 = BatchNormParams::identity(d);
      p.residual.push_back(std::move(r));
    } else if (layer.kind == LayerKind::Pool) {
      p.pool[layer.slot] = {Filter(n, d, 2 * d), std::vector<double>(2 * d, 0.0)};
    }
  }
  p.w = DenseMatrix(spec.classes, spec.final_depth());
  p.dense_bias.assign(spec.classes, 0.0);
  return p;
}

void check_shapes(const NetworkSpec& spec, const ParamStore& params) {
  spec.validate();
  const std::size_t n = spec.kernel;
  require_filter(params.first.k, n, spec.d0, spec.d1, "first conv");
  require_len(params.first.b, spec.d1, "first conv bias");
  if (params.residual.size() != spec.num_residual()) {
    throw ShapeError("expected " + std::to_string(spec.num_residual()) + " residual layers, got " +
                     std::to_string(params.residual.size()));
  }
  for (const auto& layer : spec.schedule()) {
    const std::size_t d = spec.stage(layer.stage).depth;
    const std::string tag = std::string(to_string(layer.kind)) + " layer " +
                            std::to_string(layer.index);
    if (layer.kind == LayerKind::Residual) {
      const auto& r = params.residual[layer.slot];
      require_filter(r.k1, n, d, d, tag);
      if (spec.variant == Variant::ResNetD) {
        require_filter(r.k2, n, d, d, tag);
      } else if (!r.k2.empty()) {
        throw ShapeError(tag + ": ResNet-S layers carry a single filter");
      }
      require_len(r.b1, d, "residual bias b1");
      require_len(r.b2, d, "residual bias b2");
      if (spec.batchnorm) {
        for (const auto* bn : {&r.bn1, &r.bn2}) {
          require_len(bn->gamma, d, "batch-norm gamma");
          require_len(bn->beta, d, "batch-norm beta");
          require_len(bn->mean, d, "batch-norm mean");
          require_len(bn->sigma, d, "batch-norm sigma");
        }
      }
    } else if (layer.kind == LayerKind::Pool) {
      require_filter(params.pool[layer.slot].k, n, d, 2 * d, tag);
      require_len(params.pool[layer.slot].b, 2 * d, "pool bias");
    }
  }
  if (params.w.rows() != spec.classes || params.w.cols() != spec.final_depth()) {
    throw ShapeError("dense weight must be C x d3");
  }
  require_len(params.dense_bias, spec.classes, "dense bias");
}

// ---------------------------------------------------------------------------

Feature layer_resnet_d(const Feature& x, const Filter& k1, const Filter& k2,
                       std::span<const double> b1, std::span<const double> b2, Padding pad) {
  check_nonnegative(k2);
  const Feature z = conv_bias_relu(x, k1, b1, 1, pad);
  return residual_update(x, conv2d(z, k2, 1, pad), b2);
}

Feature layer_resnet_s(const Feature& x, const Filter& k, std::span<const double> b1,
                       std::span<const double> b2, Padding pad) {
  const Feature z = conv_bias_relu(x, k, b1, 1, pad);
  return residual_update(x, adjoint_conv(z, k, pad), b2);
}

Feature layer_pool2d(const Feature& x, const Filter& k, std::span<const double> b, Padding pad) {
  if (k.d_out() != 2 * x.depth()) throw ShapeError("pooling filter must double the depth");
  const Feature z = conv_bias_relu(x, k, b, 2, pad);
  Feature y = pad_channels(pool2(x), k.d_out());
  auto yd = y.data();
  const auto zd = z.data();
  for (std::size_t p = 0; p < yd.size(); ++p) yd[p] = std::max(yd[p] - zd[p], 0.0);
  return y;
}

Feature layer_conv_first(const Feature& x, const Filter& k, std::span<const double> b,
                         Padding pad) {
  Feature y = conv2d(x, k, 1, pad);
  add_channel_bias(y, b);
  return y;
}

std::vector<double> layer_global(const Feature& x) { return pool_global(relu(x)); }

std::vector<double> layer_dense(std::span<const double> x, const DenseMatrix& w,
                                std::span<const double> b) {
  require_len(b, w.rows(), "dense bias");
  std::vector<double> y = w.multiply(x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
  return y;
}

// ---------------------------------------------------------------------------

EffectiveNetwork effective_network(const NetworkSpec& spec, const ParamStore& params) {
  check_shapes(spec, params);
  EffectiveNetwork net{params.first, {}, params.pool, params.w, params.dense_bias};
  net.residual.reserve(params.residual.size());
  for (const auto& r : params.residual) {
    EffectiveResidual e;
    e.second_adjoint = spec.variant == Variant::ResNetS;
    if (!spec.batchnorm) {
      e.k1 = r.k1;
      e.k2 = e.second_adjoint ? r.k1 : r.k2;
      e.b1 = r.b1;
      e.b2 = r.b2;
      net.residual.push_back(std::move(e));
      continue;
    }
    auto first = fold_batchnorm(r.k1, r.b1, r.bn1);
    e.k1 = std::move(first.filter);
    e.b1 = std::move(first.bias);
    // Second normalization acts on the branch output s: s~ = g (s - mu) / sigma + beta.
    // Its scale goes into the second operator, its offset into b2 with a sign flip.
    const auto& bn = r.bn2;
    const std::size_t d = r.b2.size();
    e.b2.resize(d);
    for (std::size_t c = 0; c < d; ++c) {
      e.b2[c] = r.b2[c] + bn.gamma[c] * bn.mean[c] / bn.sigma[c] - bn.beta[c];
    }
    if (e.second_adjoint) {
      // Output channel c of A^T z is built from subfilters K_{c, j}.
      e.k2 = r.k1;
      for (std::size_t c = 0; c < d; ++c) {
        const double s = bn.gamma[c] / bn.sigma[c];
        for (std::size_t j = 0; j < d; ++j)
          for (double& v : e.k2.subfilter(c, j)) v *= s;
      }
    } else {
      e.k2 = r.k2;
      for (std::size_t c = 0; c < d; ++c) {
        const double s = bn.gamma[c] / bn.sigma[c];
        for (std::size_t i = 0; i < d; ++i)
          for (double& v : e.k2.subfilter(i, c)) v *= s;
      }
    }
    net.residual.push_back(std::move(e));
  }
  return net;
}

Feature apply_residual(const Feature& x, const EffectiveResidual& layer, Variant variant,
                       Padding pad) {
  if (variant == Variant::ResNetD) {
    if (layer.second_adjoint) throw std::invalid_argument("ResNet-D layer with adjoint operator");
    return layer_resnet_d(x, layer.k1, layer.k2, layer.b1, layer.b2, pad);
  }
  if (layer.symmetric()) return layer_resnet_s(x, layer.k1, layer.b1, layer.b2, pad);
  const Feature z = conv_bias_relu(x, layer.k1, layer.b1, 1, pad);
  const Feature s = layer.second_adjoint ? adjoint_conv(z, layer.k2, pad) : conv2d(z, layer.k2, 1, pad);
  return residual_update(x, s, layer.b2);
}

ForwardTrace forward(const NetworkSpec& spec, const ParamStore& params, const Feature& x0,
                     bool record_features) {
  return forward(spec, effective_network(spec, params), x0, record_features);
}

ForwardTrace forward(const NetworkSpec& spec, const EffectiveNetwork& net, const Feature& x0,
                     bool record_features) {
  if (x0.height() != spec.height || x0.width() != spec.width || x0.depth() != spec.d0) {
    throw ShapeError("input does not match the network's input dimensions");
  }
  ForwardTrace trace;
  const std::size_t states = spec.num_layers() + 1;
  trace.l2.reserve(states);
  trace.linf.reserve(states);
  auto record = [&](const Feature& x) {
    trace.l2.push_back(norm(x, Norm::l2()));
    trace.linf.push_back(norm(x, Norm::linf()));
    if (record_features) trace.features.push_back(x);
  };

  Feature x = x0;
  record(x);
  for (const auto& layer : spec.schedule()) {
    try {
      switch (layer.kind) {
        case LayerKind::Conv:
          x = layer_conv_first(x, net.first.k, net.first.b, spec.padding);
          break;
        case LayerKind::Residual:
          x = apply_residual(x, net.residual[layer.slot], spec.variant, spec.padding);
          break;
        case LayerKind::Pool:
          x = layer_pool2d(x, net.pool[layer.slot].k, net.pool[layer.slot].b, spec.padding);
          break;
        case LayerKind::Global:
          x = as_feature(layer_global(x));
          break;
        case LayerKind::Dense:
          x = as_feature(layer_dense(x.data(), net.w, net.dense_bias));
          break;
      }
    } catch (...) {
      rethrow_with_layer(layer.index);
    }
    record(x);
  }
  trace.logits.assign(x.data().begin(), x.data().end());
  return trace;
}

std::vector<std::vector<double>> forward_batch(const NetworkSpec& spec, const ParamStore& params,
                                               std::span<const Feature> inputs,
                                               std::size_t threads) {
  const EffectiveNetwork net = effective_network(spec, params);
  std::vector<std::vector<double>> out(inputs.size());
  parallel_for(inputs.size(), threads,
               [&](std::size_t i) { out[i] = forward(spec, net, inputs[i]).logits; });
  return out;
}

// ---------------------------------------------------------------------------
// Record order: first.k, first.b; per residual layer k1, [k2 for ResNet-D], b1, b2
// and, with batch norm, bn1 gamma/beta/mean/sigma then bn2 mean/sigma; pool 0
// k, b; pool 1 k, b; dense weight; dense bias.

void write_model(std::ostream& out, const NetworkSpec& spec, const ParamStore& params) {
  check_shapes(spec, params);
  out.write(kModelMagic.data(), kModelMagic.size());
  out.put(static_cast<char>(kModelVersion));
  for (std::size_t v : {static_cast<std::size_t>(spec.variant), spec.m, spec.height, spec.width,
                        spec.d0, spec.d1, spec.classes, static_cast<std::size_t>(spec.batchnorm),
                        static_cast<std::size_t>(spec.padding), spec.kernel}) {
    put_u32(out, static_cast<std::uint32_t>(v));
  }
  write_blob(out, to_blob(params.first.k));
  put_vec(out, params.first.b);
  for (const auto& r : params.residual) {
    write_blob(out, to_blob(r.k1));
    if (spec.variant == Variant::ResNetD) write_blob(out, to_blob(r.k2));
    put_vec(out, r.b1);
    put_vec(out, r.b2);
    if (spec.batchnorm) {
      put_vec(out, r.bn1.gamma);
      put_vec(out, r.bn1.beta);
      put_vec(out, r.bn1.mean);
      put_vec(out, r.bn1.sigma);
      put_vec(out, r.bn2.mean);
      put_vec(out, r.bn2.sigma);
    }
  }
  for (const auto& p : params.pool) {
    write_blob(out, to_blob(p.k));
    put_vec(out, p.b);
  }
  write_blob(out, to_blob(params.w));
  put_vec(out, params.dense_bias);
  if (!out) throw std::runtime_error("failed writing model");
}

std::pair<NetworkSpec, ParamStore> read_model(std::istream& in) {
  std::array<char, 7> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kModelMagic) {
    throw std::runtime_error("not an STBLNET model file");
  }
  const int version = in.get();
  if (version != kModelVersion) {
    throw std::runtime_error("unsupported model version " + std::to_string(version));
  }
  NetworkSpec spec;
  const auto variant = get_u32(in);
  if (variant > 1) throw std::runtime_error("bad variant tag in model header");
  spec.variant = static_cast<Variant>(variant);
  spec.m = get_u32(in);
  spec.height = get_u32(in);
  spec.width = get_u32(in);
  spec.d0 = get_u32(in);
  spec.d1 = get_u32(in);
  spec.classes = get_u32(in);
  spec.batchnorm = get_u32(in) != 0;
  const auto pad = get_u32(in);
  if (pad > 1) throw std::runtime_error("bad padding tag in model header");
  spec.padding = static_cast<Padding>(pad);
  spec.kernel = get_u32(in);
  spec.validate();

  ParamStore p = zero_params(spec);
  p.first.k = filter_from_blob(read_blob(in));
  p.first.b = get_vec(in);
  for (auto& r : p.residual) {
    r.k1 = filter_from_blob(read_blob(in));
    if (spec.variant == Variant::ResNetD) r.k2 = filter_from_blob(read_blob(in));
    r.b1 = get_vec(in);
    r.b2 = get_vec(in);
    if (spec.batchnorm) {
      r.bn1.gamma = get_vec(in);
      r.bn1.beta = get_vec(in);
      r.bn1.mean = get_vec(in);
      r.bn1.sigma = get_vec(in);
      r.bn2.mean = get_vec(in);
      r.bn2.sigma = get_vec(in);
    }
  }
  for (auto& pool : p.pool) {
    pool.k = filter_from_blob(read_blob(in));
    pool.b = get_vec(in);
  }
  p.w = matrix_from_blob(read_blob(in));
  p.dense_bias = get_vec(in);
  check_shapes(spec, p);
  return {spec, std::move(p)};
}

void save_model(const std::string& path, const NetworkSpec& spec, const ParamStore& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_model(out, spec, params);
}

std::pair<NetworkSpec, ParamStore> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_model(in);
}

}  // namespace stbl
