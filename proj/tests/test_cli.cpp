// Runs the stbl executable and checks exit codes and artifacts.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kTool = STBL_TOOL;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("stbl_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = kTool.string() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST(Cli, CertifyZeroModel) {
  const fs::path d = scratch("zero");
  ASSERT_EQ(run("--out " + d.string() + " init --zero"), 0);
  ASSERT_EQ(run("--out " + d.string() + " certify"), 0);
  const std::string cert = slurp(d / "certificate.txt");
  EXPECT_NE(cert.find("c: 0\n"), std::string::npos);
  EXPECT_NE(cert.find("a: 1\n"), std::string::npos);
  EXPECT_TRUE(fs::exists(d / "resolved_config.json"));
}

TEST(Cli, IntegrateExponential) {
  const fs::path d = scratch("exp");
  write(d / "c.json", R"({"integrate": {"problem": "exponential", "tau": 1e-4}})");
  ASSERT_EQ(run("--config " + (d / "c.json").string() + " --out " + d.string() + " integrate"), 0);
  std::ifstream f(d / "trajectory.csv");
  std::string line, last;
  while (std::getline(f, line))
    if (!line.empty()) last = line;
  std::stringstream row(last);
  std::string t, x;
  std::getline(row, t, ',');
  std::getline(row, x, ',');
  EXPECT_DOUBLE_EQ(std::stod(t), 1.0);
  EXPECT_LE(std::abs(std::stod(x) - std::exp(1.0)), 1e-3 * std::exp(1.0));
}

TEST(Cli, OracleSuitePasses) {
  const fs::path d = scratch("oracle");
  ASSERT_EQ(run("--out " + d.string() + " oracle --instances 2"), 0);
  const std::string report = slurp(d / "oracle.txt");
  EXPECT_EQ(report.find("FAIL"), std::string::npos);
  EXPECT_NE(report.find("PASS"), std::string::npos);
}

TEST(Cli, BadConfigExitsTwo) {
  const fs::path d = scratch("bad");
  write(d / "unknown.json", R"({"network": {"depth": 3}})");
  EXPECT_EQ(run("--config " + (d / "unknown.json").string() + " --out " + d.string() + " certify"), 2);
  write(d / "type.json", R"({"train": {"batch_size": "many"}})");
  EXPECT_EQ(run("--config " + (d / "type.json").string() + " --out " + d.string() + " init"), 2);
  write(d / "range.json", R"({"network": {"m": 0}})");
  EXPECT_EQ(run("--config " + (d / "range.json").string() + " --out " + d.string() + " init"), 2);
  write(d / "broken.json", "{");
  EXPECT_EQ(run("--config " + (d / "broken.json").string() + " --out " + d.string() + " init"), 2);
  EXPECT_EQ(run("--config " + (d / "missing.json").string() + " --out " + d.string() + " init"), 2);
  EXPECT_EQ(run("--out " + d.string() + " --model " + (d / "none.stbl").string() + " certify"), 2);
  EXPECT_EQ(run("--out " + d.string() + " frobnicate"), 2);
}

TEST(Cli, RequireValidFailsOnViolatedFlags) {
  const fs::path d = scratch("flags");
  write(d / "c.json", R"({"network": {"variant": "resnet-d"}, "certify": {"require_valid": true}})");
  const std::string base = "--config " + (d / "c.json").string() + " --out " + d.string();
  ASSERT_EQ(run(base + " init"), 0);
  // He-initialized boundary layers exceed the unit-norm hypotheses.
  EXPECT_EQ(run(base + " certify"), 1);
}

TEST(Cli, ResolvedConfigRoundTrips) {
  const fs::path d = scratch("echo");
  write(d / "c.json", R"({"seed": 9, "train": {"learning_rate": 0.25}})");
  ASSERT_EQ(run("--config " + (d / "c.json").string() + " --seed 11 --out " + d.string() + " init"), 0);
  const auto j = nlohmann::json::parse(slurp(d / "resolved_config.json"));
  EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 11u);
  EXPECT_EQ(j.at("train").at("learning_rate").get<double>(), 0.25);
  EXPECT_TRUE(j.contains("network"));
  // Feeding the echo back in must be accepted and reproduce itself.
  const fs::path e = scratch("echo2");
  ASSERT_EQ(run("--config " + (d / "resolved_config.json").string() + " --out " + e.string() + " init"), 0);
  EXPECT_EQ(slurp(d / "resolved_config.json"), slurp(e / "resolved_config.json"));
  EXPECT_EQ(slurp(d / "model.stbl"), slurp(e / "model.stbl"));
}

TEST(Cli, VerifyAndForwardOnCertifiedModel) {
  const fs::path d = scratch("verify");
  write(d / "c.json", R"({"network": {"d1": 2},
    "train": {"batch_size": 8, "total_steps": 3, "decay_steps": 3, "eval_interval": 3,
              "learning_rate": 0.001, "spectral_rescale": true, "boundary_rescale": true},
    "data": {"synthetic": {"train": 16, "test": 8}},
    "certify": {"inputs": 5, "pairs": 5}, "perturb": {"sigmas": [0, 0.1], "epsilons": [0.2]}})");
  const std::string base = "--config " + (d / "c.json").string() + " --out " + d.string();
  ASSERT_EQ(run(base + " train"), 0);
  EXPECT_TRUE(fs::exists(d / "history.csv"));
  EXPECT_EQ(run(base + " verify"), 0);
  EXPECT_EQ(run(base + " --threads 2 perturb"), 0);
  EXPECT_NE(slurp(d / "robustness.tsv").find("structured"), std::string::npos);
  EXPECT_EQ(run(base + " forward --count 3"), 0);
  const std::string fwd = slurp(d / "forward.tsv");
  EXPECT_EQ(std::count(fwd.begin(), fwd.end(), '\n'), 4);
}
