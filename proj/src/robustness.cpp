#include "stbl/robustness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <random>

#include "stbl/parallel.hpp"

namespace stbl {

const char* to_string(NoiseKind kind) {
  return kind == NoiseKind::Unstructured ? "unstructured" : "structured";
}

NoiseKind noise_kind_from_string(const std::string& name) {
  if (name == "unstructured" || name == "gaussian") return NoiseKind::Unstructured;
  if (name == "structured") return NoiseKind::Structured;
  throw std::invalid_argument("unknown noise kind '" + name + "'");
}

NoiseSpec NoiseSpec::unstructured(double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("noise sigma must be nonnegative");
  NoiseSpec s;
  s.kind = NoiseKind::Unstructured;
  s.level = sigma;
  s.seed = seed;
  return s;
}

NoiseSpec NoiseSpec::structured(double epsilon, Feature x0) {
  NoiseSpec s;
  s.kind = NoiseKind::Structured;
  s.level = epsilon;
  s.pattern = std::move(x0);
  return s;
}

namespace {

// splitmix64 finalizer, to decorrelate (seed, index) pairs.
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

Feature corrupt(const Feature& x, const NoiseSpec& noise, std::size_t index) {
  Feature y = x;
  if (noise.kind == NoiseKind::Structured) {
    if (!noise.pattern.same_shape(x)) throw ShapeError("structured noise pattern does not match the image");
    if (noise.level == 0.0) return y;
    auto yd = y.data();
    const auto pd = noise.pattern.data();
    for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += noise.level * pd[i];
    return y;
  }
  if (noise.level == 0.0) return y;
  std::mt19937_64 rng(mix(noise.seed ^ mix(index)));
  std::normal_distribution<double> normal(0.0, noise.level);
  for (double& v : y.data()) v += normal(rng);
  return y;
}

std::size_t RobustnessTable::violations() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.violations;
  return n;
}

RobustnessTable evaluate_under_noise(const NetworkSpec& spec, const ParamStore& params,
                                     const Dataset& data, const std::vector<NoiseSpec>& noise,
                                     std::size_t threads) {
  if (data.size() == 0) throw std::invalid_argument("robustness: empty dataset");
  RobustnessTable table;
  CertifyOptions copts;
  copts.threads = threads;
  table.certificate = assemble_certificate(spec, params, copts);
  const double a = table.certificate.a;
  const bool checked = table.certificate.sensitivity_valid;

  const EffectiveNetwork net = effective_network(spec, params);
  const std::size_t count = data.size();
  std::vector<std::vector<double>> clean(count);
  parallel_for(count, threads, [&](std::size_t i) { clean[i] = forward(spec, net, data.images[i]).logits; });
  auto argmax = [](const std::vector<double>& u) {
    return static_cast<std::size_t>(std::max_element(u.begin(), u.end()) - u.begin());
  };
  std::size_t correct = 0;
  for (std::size_t i = 0; i < count; ++i)
    if (argmax(clean[i]) == data.label(i)) ++correct;
  table.clean_accuracy = static_cast<double>(correct) / static_cast<double>(count);

  struct Sample {
    bool correct = false;
    double shift = 0.0;
    double eta = 0.0;
  };
  for (const auto& ns : noise) {
    std::vector<Sample> samples(count);
    parallel_for(count, threads, [&](std::size_t i) {
      const Feature y = corrupt(data.images[i], ns, i);
      const auto logits = forward(spec, net, y).logits;
      std::vector<double> diff(logits.size());
      for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = logits[k] - clean[i][k];
      std::vector<double> eta(y.size());
      for (std::size_t k = 0; k < eta.size(); ++k) eta[k] = y.data()[k] - data.images[i].data()[k];
      samples[i] = {argmax(logits) == data.label(i), norm(diff, Norm::l2()), norm(eta, Norm::l2())};
    });

    NoiseRow row;
    row.kind = ns.kind;
    row.level = ns.level;
    row.count = count;
    row.min_slack = std::numeric_limits<double>::infinity();
    std::size_t hits = 0;
    for (const auto& s : samples) {
      if (s.correct) ++hits;
      row.mean_shift += s.shift;
      const double bound = a * s.eta;
      row.mean_bound += bound;
      row.min_slack = std::min(row.min_slack, bound - s.shift);
      if (s.eta > 0.0) row.max_ratio = std::max(row.max_ratio, s.shift / s.eta);
      if (checked && !bound_holds(s.shift, bound)) ++row.violations;
    }
    row.accuracy = static_cast<double>(hits) / static_cast<double>(count);
    row.mean_shift /= static_cast<double>(count);
    row.mean_bound /= static_cast<double>(count);
    table.rows.push_back(row);
  }
  return table;
}

void write_robustness(std::ostream& out, const RobustnessTable& table) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << "# a\t" << num(table.certificate.a) << "\n";
  out << "# bound-checked\t" << (table.bound_checked() ? "yes" : "no (certificate flags failed)") << "\n";
  out << "# clean-accuracy\t" << num(table.clean_accuracy) << "\n";
  out << "kind\tlevel\taccuracy\tmean_shift\tmean_bound\tmin_slack\tmax_ratio\tviolations\n";
  for (const auto& r : table.rows) {
    out << to_string(r.kind) << '\t' << num(r.level) << '\t' << num(r.accuracy) << '\t'
        << num(r.mean_shift) << '\t' << num(r.mean_bound) << '\t' << num(r.min_slack) << '\t'
        << num(r.max_ratio) << '\t' << r.violations << '\n';
  }
}

}  // namespace stbl
