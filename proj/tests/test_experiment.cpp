#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "liouville/experiment.hpp"

using namespace liouville;
namespace fs = std::filesystem;

namespace {

class Scratch : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("liouville_" + std::string(info->test_suite_name()) + "_" + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write_config(const std::string& name, const nlohmann::json& j) const {
    const auto path = dir_ / name;
    std::ofstream(path) << j.dump(2);
    return path;
  }

  int run_quiet(const fs::path& config, const fs::path& out, std::string* errors = nullptr) const {
    RunOptions opts;
    opts.config = config;
    opts.overrides.out = out;
    opts.quiet = true;
    std::ostringstream log, err;
    const int code = run(opts, log, err);
    if (errors) *errors = err.str();
    return code;
  }

  fs::path dir_;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  return out;
}

nlohmann::json free_simulation() {
  return nlohmann::json::parse(R"({
    "experiment": "simulate",
    "seed": 3,
    "potential": {"kind": "free"},
    "dynamics": {"dt": 0.05, "t_final": 1.5,
                 "initial": {"positions": [-1.0, 0.0, 1.0, 0.5], "velocities": [0.5, 0.25, -0.5, 0.0]}},
    "ensemble": {"N": 50},
    "output": {"stride": 5}
  })");
}

std::string shell_quote(const std::string& s) { return "'" + s + "'"; }

}  // namespace

TEST(ResolveConfig, EmptyConfigTakesEveryDefault) {
  const auto s = resolve_config(nlohmann::json::object());
  EXPECT_EQ(s.kind, ExperimentKind::verify);
  EXPECT_EQ(s.seed, 1u);
  EXPECT_EQ(s.d, 2);
  EXPECT_EQ(s.n, 2);
  EXPECT_EQ(s.integrator.dt, 1e-3);
  EXPECT_EQ(s.N, 1000u);
  EXPECT_EQ(s.resolved["potential"]["singularity_class"], "smooth");
  EXPECT_EQ(s.resolved["checks"]["tolerances"]["collision_scaling"], 0.3);
  EXPECT_EQ(s.resolved["ensemble"]["f0"]["center"].size(), 8u);
  EXPECT_EQ(s.resolved["ensemble"]["f0"]["width"][0], 1.5);
}

TEST(ResolveConfig, UnknownKeysAreRejected) {
  EXPECT_THROW(resolve_config(nlohmann::json::parse(R"({"sed": 4})")), ConfigError);
  EXPECT_THROW(resolve_config(nlohmann::json::parse(R"({"dynamics": {"dtt": 0.1}})")), ConfigError);
  EXPECT_THROW(resolve_config(nlohmann::json::parse(R"({"checks": {"tolerances": {"foo": 1}}})")), ConfigError);
  EXPECT_THROW(resolve_config(nlohmann::json::parse(R"({"potential": {"kind": "free", "params": {"stiffness": 1}}})")),
               ConfigError);
}

TEST(ResolveConfig, BadValuesAreRejected) {
  EXPECT_THROW(resolve_config(nlohmann::json::parse(R"({"d": "two"})")), ConfigError);
  EXPECT_THROW(resolve_config(nlohmann::json::parse(R"({"n": 1})")), ConfigError);
  EXPECT_THROW(resolve_config(nlohmann::json::parse(R"({"experiment": "bake"})")), ConfigError);
  EXPECT_THROW(resolve_config(nlohmann::json::parse(R"({"potential": {"kind": "gravity"}})")), ConfigError);
  EXPECT_THROW(resolve_config(nlohmann::json::parse(R"({"checks": {"test_region_fraction": 0}})")), ConfigError);
  EXPECT_THROW(resolve_config(nlohmann::json::parse("[1, 2]")), ConfigError);
}

TEST(ResolveConfig, KindSpecificParameterDefaults) {
  const auto s = resolve_config(nlohmann::json::parse(R"({"potential": {"kind": "repulsive_power"}})"));
  EXPECT_EQ(s.resolved["potential"]["params"]["exponent"], 1.0);
  EXPECT_EQ(s.resolved["potential"]["singularity_class"], "confining_at_zero");
}

TEST(ResolveConfig, ResolvedConfigIsAFixedPoint) {
  for (const auto& user : {nlohmann::json::object(), free_simulation()}) {
    const auto first = resolve_config(user);
    const auto again = resolve_config(nlohmann::json::parse(first.resolved.dump()));
    EXPECT_EQ(first.resolved.dump(), again.resolved.dump());
  }
}

TEST(ResolveConfig, OverridesWin) {
  RunOverrides ov;
  ov.seed = 99;
  ov.out = "elsewhere";
  ov.threads = 3;
  const auto s = resolve_config(free_simulation(), ov);
  EXPECT_EQ(s.seed, 99u);
  EXPECT_EQ(s.output.dir, fs::path("elsewhere"));
  EXPECT_EQ(s.output.threads, 3);
  ov.experiment = ExperimentKind::verify;
  EXPECT_THROW(resolve_config(free_simulation(), ov), ConfigError);
}

TEST(ResolveConfig, ShippedConfigsResolve) {
  const char* dir = std::getenv("LIOUVILLE_CONFIGS");
  if (!dir) GTEST_SKIP() << "LIOUVILLE_CONFIGS not set";
  std::size_t count = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream is(entry.path());
    EXPECT_NO_THROW(resolve_config(nlohmann::json::parse(is))) << entry.path();
    ++count;
  }
  EXPECT_GE(count, 5u);
}

TEST_F(Scratch, UnknownKeyExitsWithConfigErrorAndWritesNothing) {
  auto j = free_simulation();
  j["dynamics"]["stepsize"] = 0.1;
  const auto out = dir_ / "out";
  std::string err;
  EXPECT_EQ(run_quiet(write_config("bad.json", j), out, &err), kExitConfigError);
  EXPECT_NE(err.find("dynamics.stepsize"), std::string::npos);
  EXPECT_FALSE(fs::exists(out));
}

TEST_F(Scratch, MalformedJsonExitsWithConfigError) {
  const auto path = dir_ / "broken.json";
  std::ofstream(path) << "{\"seed\": ";
  EXPECT_EQ(run_quiet(path, dir_ / "out"), kExitConfigError);
  EXPECT_EQ(run_quiet(dir_ / "missing.json", dir_ / "out"), kExitConfigError);
  EXPECT_FALSE(fs::exists(dir_ / "out"));
}

TEST_F(Scratch, FreeTrajectoryIsStraight) {
  const auto out = dir_ / "out";
  ASSERT_EQ(run_quiet(write_config("free.json", free_simulation()), out), kExitOk);
  for (const char* f : {"resolved_config.json", "reports.jsonl", "summary.csv", "trajectory.csv",
                        "ensemble_initial.csv", "ensemble_final.csv"})
    EXPECT_TRUE(fs::exists(out / f)) << f;

  std::ifstream is(out / "trajectory.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "t,x_1_1,x_1_2,x_2_1,x_2_2,v_1_1,v_1_2,v_2_1,v_2_2,E,dmin");
  const std::vector<double> x0{-1.0, 0.0, 1.0, 0.5}, v0{0.5, 0.25, -0.5, 0.0};
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    const auto cells = split(line);
    ASSERT_EQ(cells.size(), 11u);
    const double t = std::stod(cells[0]);
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_NEAR(std::stod(cells[1 + k]), x0[k] + t * v0[k], 1e-12) << "t=" << t;
      EXPECT_EQ(std::stod(cells[5 + k]), v0[k]);
    }
    EXPECT_EQ(std::stod(cells[9]), 0.5 * (0.25 + 0.0625 + 0.25));
    ++rows;
  }
  EXPECT_EQ(rows, 7u);  // 30 steps, every fifth plus the start
}

TEST_F(Scratch, RerunsAreByteIdentical) {
  const auto config = write_config("free.json", free_simulation());
  ASSERT_EQ(run_quiet(config, dir_ / "a"), kExitOk);
  ASSERT_EQ(run_quiet(config, dir_ / "b"), kExitOk);
  for (const char* f : {"trajectory.csv", "ensemble_initial.csv", "ensemble_final.csv", "summary.csv"})
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
}

TEST_F(Scratch, ThreadCountDoesNotChangeResults) {
  auto j = nlohmann::json::parse(R"({
    "experiment": "residual", "seed": 5, "potential": {"kind": "harmonic"},
    "dynamics": {"dt": 0.02, "t_final": 1.0},
    "ensemble": {"N": 400, "f0": {"width": [2.7, 2.7, 2.7, 2.7, 0.9, 0.9, 0.9, 0.9]}},
    "checks": {"test_functions": 2, "time_intervals": 20, "betas": ["arctan"], "test_region_fraction": 1.0}
  })");
  const auto config = write_config("residual.json", j);
  RunOptions opts;
  opts.config = config;
  opts.quiet = true;
  std::ostringstream log, err;
  opts.overrides.out = dir_ / "one";
  opts.overrides.threads = 1;
  const int a = run(opts, log, err);
  opts.overrides.out = dir_ / "two";
  opts.overrides.threads = 2;
  const int b = run(opts, log, err);
  ASSERT_NE(a, kExitConfigError) << err.str();
  EXPECT_EQ(a, b);
  EXPECT_EQ(slurp(dir_ / "one" / "residuals.jsonl"), slurp(dir_ / "two" / "residuals.jsonl"));
  EXPECT_FALSE(slurp(dir_ / "one" / "residuals.jsonl").empty());
}

TEST_F(Scratch, SeedOverrideChangesTheEnsemble) {
  const auto config = write_config("free.json", free_simulation());
  RunOptions opts;
  opts.config = config;
  opts.quiet = true;
  std::ostringstream log, err;
  opts.overrides.out = dir_ / "a";
  ASSERT_EQ(run(opts, log, err), kExitOk);
  opts.overrides.out = dir_ / "b";
  opts.overrides.seed = 4;
  ASSERT_EQ(run(opts, log, err), kExitOk);
  EXPECT_NE(slurp(dir_ / "a" / "ensemble_initial.csv"), slurp(dir_ / "b" / "ensemble_initial.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "trajectory.csv"), slurp(dir_ / "b" / "trajectory.csv"));
}

TEST(ScalingTable, EmptyTableIsHeaderOnly) {
  std::ostringstream os;
  emit_scaling_table(os, std::span<const ScalingRow>{});
  EXPECT_EQ(os.str(), "mu,term,std_error,fitted_slope\n");
}

TEST_F(Scratch, CommandLineExitCodes) {
  const char* lab = std::getenv("LIOUVILLE_LAB");
  if (!lab) GTEST_SKIP() << "LIOUVILLE_LAB not set";
  const std::string exe = shell_quote(lab);
  const auto quiet = " > " + shell_quote((dir_ / "log.txt").string()) + " 2>&1";
  auto code = [&](const std::string& args) {
    const int status = std::system((exe + " " + args + quiet).c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };

  const auto good = write_config("free.json", free_simulation());
  EXPECT_EQ(code("simulate --config " + shell_quote(good.string()) + " --out " + shell_quote((dir_ / "ok").string())),
            kExitOk);
  EXPECT_TRUE(fs::exists(dir_ / "ok" / "trajectory.csv"));

  auto j = free_simulation();
  j["ensemble"]["NN"] = 10;
  const auto bad = write_config("bad.json", j);
  EXPECT_EQ(code("simulate --config " + shell_quote(bad.string()) + " --out " + shell_quote((dir_ / "bad").string())),
            kExitConfigError);
  EXPECT_FALSE(fs::exists(dir_ / "bad"));

  EXPECT_EQ(code("verify --config " + shell_quote(good.string())), kExitConfigError);  // declares simulate
  EXPECT_EQ(code("simulate"), kExitConfigError);
  EXPECT_EQ(code("--help"), kExitOk);
}
