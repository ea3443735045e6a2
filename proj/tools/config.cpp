#include "config.hpp"

#include <fstream>
#include <set>

namespace stbl::cli {

using nlohmann::json;

namespace {

class Reader {
 public:
  Reader(const json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) fail("", "expected an object");
  }

  bool has(const char* key) const { return obj_.contains(key); }

  void get(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) fail(key, "expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) fail(key, "expected a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) fail(key, "expected a nonnegative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const char* key, std::uint64_t& out, int) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) fail(key, "expected a nonnegative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) fail(key, "expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<double>& out) {
    if (const json* v = take(key)) out = numbers(*v, key);
  }
  void get(const char* key, DenseMatrix& out) {
    if (const json* v = take(key)) {
      if (!v->is_array() || v->empty()) fail(key, "expected a nonempty array of rows");
      std::vector<double> data;
      std::size_t cols = 0;
      for (const auto& row : *v) {
        const auto r = numbers(row, key);
        if (cols == 0) cols = r.size();
        if (r.size() != cols || cols == 0) fail(key, "rows must be nonempty and of equal length");
        data.insert(data.end(), r.begin(), r.end());
      }
      out = DenseMatrix(v->size(), cols, std::move(data));
    }
  }
  const json* section(const char* key) { return take(key); }

  /// Rejects keys that were never read.
  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) fail(key.c_str(), "unknown key");
    }
  }

  [[noreturn]] void fail(const char* key, const std::string& what) const {
    std::string path = where_;
    if (key && *key) path += path.empty() ? key : std::string(".") + key;
    throw ConfigError((path.empty() ? std::string("config") : path) + ": " + what);
  }

  std::string child(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  std::vector<double> numbers(const json& v, const char* key) const {
    if (!v.is_array()) fail(key, "expected an array of numbers");
    std::vector<double> out;
    for (const auto& x : v) {
      if (!x.is_number()) fail(key, "expected an array of numbers");
      out.push_back(x.get<double>());
    }
    return out;
  }

  const json& obj_;
  std::string where_;
  std::set<std::string> seen_;
};

template <class Fn>
void check(bool ok, Fn&& message) {
  if (!ok) throw ConfigError(message());
}

void parse_network(const json& j, NetworkSpec& n) {
  Reader r(j, "network");
  std::string variant = to_string(n.variant), padding = to_string(n.padding);
  r.get("variant", variant);
  r.get("m", n.m);
  r.get("height", n.height);
  r.get("width", n.width);
  r.get("d0", n.d0);
  r.get("d1", n.d1);
  r.get("classes", n.classes);
  r.get("batchnorm", n.batchnorm);
  r.get("padding", padding);
  r.get("kernel", n.kernel);
  r.finish();
  try {
    n.variant = variant_from_string(variant);
    n.padding = padding_from_string(padding);
    n.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("network: ") + e.what());
  }
}

void parse_data(const json& j, DataConfig& d) {
  Reader r(j, "data");
  r.get("source", d.source);
  if (const json* s = r.section("synthetic")) {
    Reader q(*s, "data.synthetic");
    q.get("train", d.synthetic.train);
    q.get("test", d.synthetic.test);
    q.get("height", d.synthetic.height);
    q.get("width", d.synthetic.width);
    q.get("noise", d.synthetic.noise);
    q.get("seed", d.synthetic.seed, 0);
    q.finish();
  }
  r.get("train_images", d.train_images);
  r.get("train_labels", d.train_labels);
  r.get("test_images", d.test_images);
  r.get("test_labels", d.test_labels);
  r.get("normalize", d.normalize);
  r.finish();
  check(d.source == "synthetic" || d.source == "idx", [] { return "data.source: expected 'synthetic' or 'idx'"; });
  if (d.source == "idx") {
    check(!d.train_images.empty() && !d.train_labels.empty(),
          [] { return "data: idx source needs train_images and train_labels"; });
  }
  check(d.synthetic.noise >= 0.0, [] { return "data.synthetic.noise: must be nonnegative"; });
}

void parse_train(const json& j, TrainConfig& t, InitOptions& init) {
  Reader r(j, "train");
  r.get("batch_size", t.batch_size);
  r.get("learning_rate", t.learning_rate);
  r.get("decay_steps", t.decay_steps);
  r.get("total_steps", t.total_steps);
  r.get("alpha", t.alpha);
  r.get("clamp_k2", t.clamp_k2);
  r.get("spectral_rescale", t.spectral_rescale);
  r.get("boundary_rescale", t.boundary_rescale);
  r.get("eval_interval", t.eval_interval);
  r.get("certify_history", t.certify_history);
  r.get("bn_momentum", t.bn_momentum);
  r.get("dense_init_sigma", init.dense_sigma);
  r.finish();
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  check(init.dense_sigma >= 0.0, [] { return "train.dense_init_sigma: must be nonnegative"; });
}

void parse_certify(const json& j, CertifyConfig& c) {
  Reader r(j, "certify");
  r.get("tol", c.power.tol);
  r.get("max_iter", c.power.max_iter);
  r.get("power_seed", c.power.seed, 0);
  r.get("inputs", c.inputs);
  r.get("pairs", c.pairs);
  r.get("input_scale", c.input_scale);
  r.get("perturbation", c.perturbation);
  r.get("require_valid", c.require_valid);
  r.finish();
  check(c.power.tol > 0.0, [] { return "certify.tol: must be positive"; });
  check(c.power.max_iter > 0, [] { return "certify.max_iter: must be positive"; });
  check(c.input_scale >= 0.0 && c.perturbation > 0.0,
        [] { return "certify: input_scale must be nonnegative and perturbation positive"; });
}

void parse_integrate(const json& j, IntegrateConfig& c) {
  Reader r(j, "integrate");
  std::string variant = to_string(c.variant);
  r.get("problem", c.problem);
  r.get("variant", variant);
  r.get("tau", c.tau);
  r.get("horizon", c.horizon);
  r.get("max_dim", c.max_dim);
  r.get("bound", c.bound);
  r.get("force", c.force);
  r.get("x0", c.x0);
  r.get("y0", c.y0);
  if (const json* pieces = r.section("pieces")) {
    if (!pieces->is_array()) r.fail("pieces", "expected an array");
    c.pieces.clear();
    for (std::size_t i = 0; i < pieces->size(); ++i) {
      Reader q((*pieces)[i], r.child("pieces") + "[" + std::to_string(i) + "]");
      InclusionPiece p;
      q.get("end", p.end);
      q.get("a1", p.a1);
      q.get("a2", p.a2);
      q.get("b1", p.b1);
      q.get("b2", p.b2);
      q.finish();
      c.pieces.push_back(std::move(p));
    }
  }
  r.finish();
  try {
    c.variant = inclusion_variant_from_string(variant);
    if (c.bound != "auto" && c.bound != "none") bound_kind_from_string(c.bound);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("integrate: ") + e.what());
  }
  check(c.problem == "exponential" || c.problem == "random" || c.problem == "explicit",
        [] { return "integrate.problem: expected exponential, random or explicit"; });
  check(c.tau > 0.0, [] { return "integrate.tau: must be positive"; });
  check(c.horizon > 0.0, [] { return "integrate.horizon: must be positive"; });
  check(c.max_dim >= 1, [] { return "integrate.max_dim: must be at least 1"; });
  if (c.problem == "explicit") {
    check(!c.pieces.empty(), [] { return "integrate: explicit problem needs pieces"; });
    check(!c.x0.empty(), [] { return "integrate: explicit problem needs x0"; });
  }
}

void parse_perturb(const json& j, PerturbConfig& p) {
  Reader r(j, "perturb");
  r.get("sigmas", p.sigmas);
  r.get("epsilons", p.epsilons);
  r.get("pattern_image", p.pattern_image);
  r.get("limit", p.limit);
  r.finish();
  for (double s : p.sigmas) check(s >= 0.0, [] { return "perturb.sigmas: must be nonnegative"; });
}

json matrix_json(const DenseMatrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

}  // namespace

RunConfig parse_config(const json& doc) {
  RunConfig c;
  Reader r(doc, "");
  r.get("seed", c.seed, 0);
  if (const json* s = r.section("network")) parse_network(*s, c.network);
  if (const json* s = r.section("data")) parse_data(*s, c.data);
  if (const json* s = r.section("train")) parse_train(*s, c.train, c.init);
  if (const json* s = r.section("certify")) parse_certify(*s, c.certify);
  if (const json* s = r.section("integrate")) parse_integrate(*s, c.integrate);
  if (const json* s = r.section("perturb")) parse_perturb(*s, c.perturb);
  r.finish();
  return c;
}

RunConfig load_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return parse_config(doc);
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  const auto& n = c.network;
  j["network"] = {{"variant", to_string(n.variant)}, {"m", n.m}, {"height", n.height},
                  {"width", n.width}, {"d0", n.d0}, {"d1", n.d1}, {"classes", n.classes},
                  {"batchnorm", n.batchnorm}, {"padding", to_string(n.padding)}, {"kernel", n.kernel}};
  const auto& d = c.data;
  j["data"] = {{"source", d.source},
               {"synthetic",
                {{"train", d.synthetic.train}, {"test", d.synthetic.test}, {"height", d.synthetic.height},
                 {"width", d.synthetic.width}, {"noise", d.synthetic.noise}, {"seed", d.synthetic.seed}}},
               {"train_images", d.train_images}, {"train_labels", d.train_labels},
               {"test_images", d.test_images}, {"test_labels", d.test_labels}, {"normalize", d.normalize}};
  const auto& t = c.train;
  j["train"] = {{"batch_size", t.batch_size}, {"learning_rate", t.learning_rate},
                {"decay_steps", t.decay_steps}, {"total_steps", t.total_steps}, {"alpha", t.alpha},
                {"clamp_k2", t.clamp_k2}, {"spectral_rescale", t.spectral_rescale},
                {"boundary_rescale", t.boundary_rescale}, {"eval_interval", t.eval_interval},
                {"certify_history", t.certify_history}, {"bn_momentum", t.bn_momentum},
                {"dense_init_sigma", c.init.dense_sigma}};
  const auto& ce = c.certify;
  j["certify"] = {{"tol", ce.power.tol}, {"max_iter", ce.power.max_iter}, {"power_seed", ce.power.seed},
                  {"inputs", ce.inputs}, {"pairs", ce.pairs}, {"input_scale", ce.input_scale},
                  {"perturbation", ce.perturbation}, {"require_valid", ce.require_valid}};
  const auto& in = c.integrate;
  json pieces = json::array();
  for (const auto& p : in.pieces) {
    pieces.push_back({{"end", p.end}, {"a1", matrix_json(p.a1)}, {"a2", matrix_json(p.a2)},
                      {"b1", p.b1}, {"b2", p.b2}});
  }
  j["integrate"] = {{"problem", in.problem}, {"variant", to_string(in.variant)}, {"tau", in.tau},
                    {"horizon", in.horizon}, {"max_dim", in.max_dim}, {"bound", in.bound},
                    {"force", in.force}, {"pieces", pieces}, {"x0", in.x0}, {"y0", in.y0}};
  const auto& p = c.perturb;
  j["perturb"] = {{"sigmas", p.sigmas}, {"epsilons", p.epsilons}, {"pattern_image", p.pattern_image},
                  {"limit", p.limit}};
  return j;
}

}  // namespace stbl::cli
