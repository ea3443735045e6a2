// stbl: command-line front end. Exit codes: 0 all checks passed, 1 a check
// failed (report path printed), 2 bad configuration or unreadable input.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "config.hpp"
#include "oracle.hpp"
#include "stbl/certificate.hpp"
#include "stbl/inclusion.hpp"
#include "stbl/network.hpp"
#include "stbl/parallel.hpp"
#include "stbl/robustness.hpp"
#include "stbl/train.hpp"

namespace fs = std::filesystem;
using namespace stbl;
using stbl::cli::ConfigError;
using stbl::cli::RunConfig;

namespace {

class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::size_t threads = 0;
  std::string model;
};

struct Context {
  RunConfig config;
  fs::path out;
  std::size_t threads = 1;
  std::string model_path;
};

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class Fn>
auto reading(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw InputError(e.what());
  }
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw InputError("cannot write " + path.string());
  return f;
}

int fail(const fs::path& report, const std::string& what) {
  std::cerr << "FAILED: " << what << " (report: " << report.string() << ")\n";
  return 1;
}

DatasetSplit load_data(const Context& ctx) {
  const auto& d = ctx.config.data;
  const auto& net = ctx.config.network;
  DatasetSplit split;
  if (d.source == "synthetic") {
    if (d.synthetic.height != net.height || d.synthetic.width != net.width || net.d0 != 1 || net.classes != 2)
      throw ConfigError("synthetic data is " + std::to_string(d.synthetic.height) + "x" +
                        std::to_string(d.synthetic.width) + "x1 with 2 classes; network dims differ");
    split = synthetic_bars(d.synthetic);
  } else {
    if (d.train_images.empty() || d.train_labels.empty()) throw ConfigError("data: idx source needs train_images and train_labels");
    split.train = reading([&] { return read_idx(d.train_images, d.train_labels, net.classes); });
    if (!d.test_images.empty())
      split.test = reading([&] { return read_idx(d.test_images, d.test_labels, net.classes); });
    else
      split.test = split.train;
    for (const Dataset* s : {&split.train, &split.test}) {
      if (s->size() == 0) throw InputError("empty dataset");
      const Feature& x = s->images.front();
      if (x.height() != net.height || x.width() != net.width || x.depth() != net.d0)
        throw ConfigError("data dims do not match network input dims");
    }
  }
  if (d.normalize) {
    const Normalization n = fit_normalization(split.train);
    apply_normalization(split.train, n);
    apply_normalization(split.test, n);
  }
  return split;
}

std::pair<NetworkSpec, ParamStore> load_model_file(const Context& ctx) {
  auto model = reading([&] { return load_model(ctx.model_path); });
  return model;
}

// ---------------------------------------------------------------------------

int cmd_init(const Context& ctx, bool zero) {
  const NetworkSpec& spec = ctx.config.network;
  const ParamStore params = zero ? zero_params(spec) : init_params(spec, ctx.config.seed, ctx.config.init);
  save_model(ctx.model_path, spec, params);
  std::cout << "wrote " << ctx.model_path << "\n";
  return 0;
}

int cmd_forward(const Context& ctx, const std::vector<std::string>& inputs, std::size_t count) {
  const auto [spec, params] = load_model_file(ctx);
  std::vector<Feature> xs;
  std::vector<std::string> names;
  if (!inputs.empty()) {
    for (const auto& p : inputs) {
      xs.push_back(reading([&] { return load_feature(p); }));
      names.push_back(p);
    }
  } else {
    const DatasetSplit data = load_data(ctx);
    for (std::size_t i = 0; i < std::min(count, data.test.size()); ++i) {
      xs.push_back(data.test.images[i]);
      names.push_back("test[" + std::to_string(i) + "]");
    }
  }
  const EffectiveNetwork net = effective_network(spec, params);
  const fs::path report = ctx.out / "forward.tsv";
  auto f = open_out(report);
  f << "input\tclass\tlogits\tl2_norms\n";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const ForwardTrace t = forward(spec, net, xs[i]);
    std::size_t best = 0;
    for (std::size_t k = 1; k < t.logits.size(); ++k)
      if (t.logits[k] > t.logits[best]) best = k;
    std::ostringstream line;
    line << names[i] << '\t' << best << '\t';
    for (std::size_t k = 0; k < t.logits.size(); ++k) line << (k ? "," : "") << num(t.logits[k]);
    line << '\t';
    for (std::size_t k = 0; k < t.l2.size(); ++k) line << (k ? "," : "") << num(t.l2[k]);
    f << line.str() << '\n';
    std::cout << line.str() << '\n';
  }
  return 0;
}

CertifyOptions certify_options(const Context& ctx) {
  CertifyOptions o;
  o.power = ctx.config.certify.power;
  o.threads = ctx.threads;
  return o;
}

int cmd_certify(const Context& ctx) {
  const auto [spec, params] = load_model_file(ctx);
  const StabilityCertificate cert = assemble_certificate(spec, params, certify_options(ctx));
  const fs::path report = ctx.out / "certificate.txt";
  {
    auto f = open_out(report);
    write_certificate(f, cert);
  }
  write_certificate(std::cout, cert);
  if (ctx.config.certify.require_valid && !(cert.growth_valid && cert.sensitivity_valid))
    return fail(report, "certificate hypotheses violated");
  return 0;
}

void write_verify(std::ostream& out, const char* name, const VerifyReport& r) {
  out << "# " << name << (r.skipped ? " skipped: " + r.diagnostic : "") << "\n";
  out << "# checked\t" << r.checked << "\n# violations\t" << r.violations << "\n";
  out << "# min_slack\t" << num(r.min_slack) << "\n";
  if (std::string(name) == "sensitivity") out << "# max_ratio\t" << num(r.max_ratio) << "\n";
  out << "input_norm\toutput_norm\tbound\tslack\tok\n";
  for (const auto& e : r.entries)
    out << num(e.input_norm) << '\t' << num(e.output_norm) << '\t' << num(e.bound) << '\t' << num(e.slack)
        << '\t' << (e.ok ? "yes" : "NO") << '\n';
}

int cmd_verify(const Context& ctx) {
  const auto [spec, params] = load_model_file(ctx);
  const auto& cc = ctx.config.certify;
  const StabilityCertificate cert = assemble_certificate(spec, params, certify_options(ctx));
  std::mt19937_64 rng(ctx.config.seed);
  auto sample = [&](double scale) {
    Feature x(spec.height, spec.width, spec.d0);
    std::normal_distribution<double> normal(0.0, scale);
    for (double& v : x.data()) v = normal(rng);
    return x;
  };
  std::vector<Feature> inputs;
  for (std::size_t i = 0; i < cc.inputs; ++i) inputs.push_back(sample(cc.input_scale));
  std::vector<std::pair<Feature, Feature>> pairs;
  for (std::size_t i = 0; i < cc.pairs; ++i) {
    Feature x = sample(cc.input_scale);
    Feature y = x;
    const Feature d = sample(cc.perturbation);
    for (std::size_t k = 0; k < y.size(); ++k) y.data()[k] += d.data()[k];
    pairs.emplace_back(std::move(x), std::move(y));
  }
  const VerifyReport growth = verify_growth(spec, params, inputs, cert);
  const VerifyReport sens = verify_sensitivity(spec, params, pairs, cert);

  const fs::path report = ctx.out / "verify.txt";
  {
    auto f = open_out(report);
    write_certificate(f, cert);
    write_verify(f, "growth", growth);
    write_verify(f, "sensitivity", sens);
  }
  auto summary = [](const char* name, const VerifyReport& r) {
    std::cout << name << ": ";
    if (r.skipped)
      std::cout << "skipped (" << r.diagnostic << ")\n";
    else
      std::cout << r.checked << " checked, " << r.violations << " violations, min slack " << num(r.min_slack) << "\n";
  };
  summary("growth", growth);
  summary("sensitivity", sens);
  if (growth.violations + sens.violations > 0) return fail(report, "certificate bound exceeded");
  return 0;
}

InclusionProblem build_problem(const Context& ctx) {
  const auto& ic = ctx.config.integrate;
  InclusionProblem p;
  if (ic.problem == "exponential") {
    // x' = x from x(0) = 1: A1 = 1, A2 = -1, no bias.
    DenseMatrix a1(1, 1), a2(1, 1);
    a1.data()[0] = 1.0;
    a2.data()[0] = -1.0;
    p = constant_problem(InclusionVariant::General, a1, a2, {0.0}, {0.0},
                         ic.x0.empty() ? std::vector<double>{1.0} : ic.x0, ic.horizon);
  } else if (ic.problem == "random") {
    p = random_problem(ic.variant, ic.max_dim, ctx.config.seed);
    if (!ic.x0.empty()) p.x0 = ic.x0;
  } else {
    if (ic.pieces.empty()) throw ConfigError("integrate: explicit problem needs pieces");
    p.variant = ic.variant;
    p.dim = ic.pieces.front().a1.cols();
    p.knots.push_back(0.0);
    for (const auto& piece : ic.pieces) {
      p.knots.push_back(piece.end);
      p.a1.push_back(piece.a1);
      p.a2.push_back(ic.variant == InclusionVariant::S ? piece.a1.transposed() : piece.a2);
      p.b1.push_back(piece.b1);
      p.b2.push_back(piece.b2);
    }
    p.x0 = ic.x0;
  }
  try {
    p.validate_shapes();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("integrate: ") + e.what());
  }
  return p;
}

int cmd_integrate(const Context& ctx) {
  const auto& ic = ctx.config.integrate;
  const InclusionProblem problem = build_problem(ctx);
  IntegrateOptions opts;
  opts.force = ic.force;
  const HypothesesReport hyp = hypotheses_check(problem);
  for (const auto& m : hyp.messages) std::cerr << "hypothesis: " << m << "\n";
  if (!hyp.passed() && !ic.force) throw ConfigError("integrate: hypotheses fail (set integrate.force to run anyway)");
  const Trajectory traj = integrate(problem, ic.tau, opts);
  for (const auto& w : traj.warnings) std::cerr << "warning: " << w << "\n";

  std::optional<Envelope> env;
  if (ic.bound != "none") {
    BoundKind kind;
    if (ic.bound == "auto")
      kind = problem.variant == InclusionVariant::D   ? BoundKind::GrowthD
             : problem.variant == InclusionVariant::S ? BoundKind::GrowthS
                                                      : BoundKind::GrowthGeneral;
    else
      kind = bound_kind_from_string(ic.bound);
    if (is_sensitivity(kind)) {
      std::vector<double> y0 = ic.y0;
      if (y0.empty()) {
        y0 = problem.x0;
        for (double& v : y0) v += 0.1;
      }
      if (y0.size() != problem.dim) throw ConfigError("integrate: y0 has the wrong dimension");
      const Trajectory other = integrate_from(problem, y0, ic.tau, opts);
      env = bound_envelope(problem, traj, kind, &other);
    } else {
      env = bound_envelope(problem, traj, kind);
    }
  }

  const fs::path report = ctx.out / "trajectory.csv";
  {
    auto f = open_out(report);
    write_trajectory(f, traj, env ? std::span<const double>(env->bound) : std::span<const double>());
  }
  std::cout << "steps\t" << traj.steps() << "\nT\t" << num(traj.times.back()) << "\nx(T)";
  for (double v : traj.states.back()) std::cout << '\t' << num(v);
  std::cout << "\nnorm\t" << num(traj.norms.back()) << "\n";
  if (ic.problem == "exponential" && problem.dim == 1 && problem.x0[0] > 0.0) {
    const double exact = problem.x0[0] * std::exp(problem.horizon());
    std::cout << "exact\t" << num(exact) << "\nrel_error\t" << num(std::abs(traj.states.back()[0] - exact) / exact)
              << "\n";
  }
  if (env) {
    std::cout << "bound\t" << to_string(env->kind) << "\nviolations\t" << env->violations << "\n";
    if (!env->detail.empty()) std::cout << "detail\t" << env->detail << "\n";
    if (!env->passed()) return fail(report, "envelope exceeded at step " + std::to_string(env->first_violation));
  }
  return 0;
}

int cmd_train(const Context& ctx) {
  const NetworkSpec& spec = ctx.config.network;
  TrainConfig tc = ctx.config.train;
  tc.seed = ctx.config.seed;
  const DatasetSplit data = load_data(ctx);
  const ParamStore initial = init_params(spec, ctx.config.seed, ctx.config.init);
  const fs::path history = ctx.out / "history.csv";
  try {
    const TrainResult result = train(spec, tc, data, initial);
    {
      auto f = open_out(history);
      write_history(f, result.history);
    }
    save_model(ctx.model_path, spec, result.params);
    const HistoryEntry& last = result.history.back();
    std::cout << "steps\t" << last.step << "\nloss\t" << num(last.loss) << "\ntest_accuracy\t"
              << num(last.test_accuracy) << "\nc\t" << num(last.c) << "\na\t" << num(last.a) << "\nmodel\t"
              << ctx.model_path << "\n";
  } catch (const DivergenceError& e) {
    auto f = open_out(history);
    write_history(f, e.history());
    return fail(history, e.what());
  }
  return 0;
}

int cmd_perturb(const Context& ctx) {
  const auto [spec, params] = load_model_file(ctx);
  if (!(spec == ctx.config.network))
    std::cerr << "note: model spec differs from the config's network section; using the model's\n";
  const auto& pc = ctx.config.perturb;
  DatasetSplit data = load_data(ctx);
  Dataset& test = data.test;
  if (pc.limit > 0 && pc.limit < test.size()) {
    test.images.resize(pc.limit);
    test.labels.resize(pc.limit);
  }
  std::vector<NoiseSpec> noise;
  for (double s : pc.sigmas) noise.push_back(NoiseSpec::unstructured(s, ctx.config.seed));
  if (!pc.epsilons.empty()) {
    if (pc.pattern_image >= test.size()) throw ConfigError("perturb: pattern_image out of range");
    for (double e : pc.epsilons) noise.push_back(NoiseSpec::structured(e, test.images[pc.pattern_image]));
  }
  const RobustnessTable table = evaluate_under_noise(spec, params, test, noise, ctx.threads);
  const fs::path report = ctx.out / "robustness.tsv";
  {
    auto f = open_out(report);
    write_robustness(f, table);
  }
  write_robustness(std::cout, table);
  if (table.violations() > 0) return fail(report, "output shift exceeded a*||eta||");
  return 0;
}

int cmd_oracle(const Context& ctx, std::size_t instances) {
  const auto results = cli::run_oracles(ctx.config.seed, instances);
  const fs::path report = ctx.out / "oracle.txt";
  {
    auto f = open_out(report);
    cli::write_oracles(f, results);
  }
  cli::write_oracles(std::cout, results);
  for (const auto& r : results)
    if (r.failures > 0) return fail(report, "oracle mismatch in " + r.name);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stability-certified residual networks"};
  app.require_subcommand(1, 1);
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--seed", g.seed, "Overrides the config seed");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (0: STBL_THREADS or 1)");
  app.add_option("--model", g.model, "Model file (default: <out>/model.stbl)");

  bool zero = false;
  auto* init = app.add_subcommand("init", "Initialize a model");
  init->add_flag("--zero", zero, "All-zero parameters");
  std::vector<std::string> inputs;
  std::size_t count = 4;
  auto* fwd = app.add_subcommand("forward", "Evaluate a model");
  fwd->add_option("--input", inputs, "Tensor files (default: test images)");
  fwd->add_option("--count", count, "Number of test images when no --input is given");
  auto* certify = app.add_subcommand("certify", "Print the stability certificate");
  auto* verify = app.add_subcommand("verify", "Check the certificate on random inputs");
  auto* integrate_cmd = app.add_subcommand("integrate", "Integrate the continuous-time dynamics");
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  auto* perturb = app.add_subcommand("perturb", "Accuracy and output shift under input noise");
  std::size_t instances = 50;
  auto* oracle = app.add_subcommand("oracle", "Dense-matrix brute-force suites");
  oracle->add_option("--instances", instances, "Random instances per shape")->capture_default_str();
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    Context ctx;
    ctx.config = cli::load_config(g.config);
    if (g.seed) ctx.config.seed = *g.seed;
    ctx.out = g.out;
    ctx.threads = resolve_threads(g.threads);
    fs::create_directories(ctx.out);
    ctx.model_path = g.model.empty() ? (ctx.out / "model.stbl").string() : g.model;

    const nlohmann::json resolved = cli::to_json(ctx.config);
    {
      auto f = open_out(ctx.out / "resolved_config.json");
      f << resolved.dump(2) << "\n";
    }
    std::cerr << "config: " << resolved.dump() << "\n";

    if (*init) return cmd_init(ctx, zero);
    if (*fwd) return cmd_forward(ctx, inputs, count);
    if (*certify) return cmd_certify(ctx);
    if (*verify) return cmd_verify(ctx);
    if (*integrate_cmd) return cmd_integrate(ctx);
    if (*train_cmd) return cmd_train(ctx);
    if (*perturb) return cmd_perturb(ctx);
    if (*oracle) return cmd_oracle(ctx, instances);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
