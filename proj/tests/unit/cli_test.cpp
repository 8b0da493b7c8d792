#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "phc/cli.hpp"

namespace fs = std::filesystem;
namespace cli = phc::cli;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "phc");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::dispatch(static_cast<int>(argv.size()), argv.data());
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("phc_cli_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Cli, GenDataWritesOneFilePerInitialStateAndLevel) {
  const fs::path out = scratch("data");
  ::testing::internal::CaptureStdout();
  ASSERT_EQ(run({"gen-data", "--plant", "torsional", "--ics", "3", "--T", "0.05", "--out", out.string()}), 0);
  ::testing::internal::GetCapturedStdout();
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out)) {
    if (e.path().extension() == ".csv") ++files;
  }
  EXPECT_EQ(files, 15u);
  EXPECT_TRUE(fs::exists(out / "meta.json"));
  fs::remove_all(out);
}

TEST(Cli, CertifyExactModelRunPrintsPass) {
  const fs::path r = scratch("exact");
  ::testing::internal::CaptureStdout();
  ASSERT_EQ(run({"train-policy", "--plant", "torsional", "--model", "exact", "--iterations", "0",
                 "--horizon", "0.2", "--run", r.string()}),
            0);
  ::testing::internal::GetCapturedStdout();
  ::testing::internal::CaptureStdout();
  ASSERT_EQ(run({"certify", "--run", r.string(), "--samples", "300", "--trajectories", "2", "--horizon", "1"}), 0);
  const std::string out = ::testing::internal::GetCapturedStdout();
  EXPECT_EQ(out.rfind("pass\n", 0), 0u) << out;
  EXPECT_NE(out.find("gap radius 0\n"), std::string::npos) << out;
  EXPECT_TRUE(fs::exists(r / "certificate.json"));
  fs::remove_all(r);
}

TEST(Cli, UnknownFlagAndBadInputsExitOne) {
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run({"gen-data", "--no-such-flag"}), 1);
  EXPECT_EQ(run({"gen-data", "--plant", "triple"}), 1);
  EXPECT_EQ(run({"gen-data", "--mode", "fast"}), 1);
  EXPECT_EQ(run({"certify", "--run", scratch("missing").string()}), 1);
  const std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("Usage"), std::string::npos);
}

TEST(Cli, ConfigRoundTrip) {
  const cli::RunConfig a = cli::preset(phc::PlantKind::kTwoLink, "strict-paper", 11);
  const cli::RunConfig b = cli::config_from_json(phc::io::Json::parse(cli::config_to_json(a).dump()));
  EXPECT_EQ(cli::config_to_json(a).dump(), cli::config_to_json(b).dump());
  EXPECT_EQ(b.alt.ics, 512);
  EXPECT_TRUE(b.printed_sign);
  EXPECT_EQ(b.task, phc::TaskKind::kSwingUp);
}

TEST(Cli, StrictPlanarPresetDrawsParametersFromSeed) {
  const cli::RunConfig a = cli::preset(phc::PlantKind::kPlanarPendulum, "strict-paper", 1);
  const cli::RunConfig b = cli::preset(phc::PlantKind::kPlanarPendulum, "strict-paper", 2);
  EXPECT_NE(a.alt.plant.params, b.alt.plant.params);
  const cli::RunConfig c = cli::config_from_json(cli::config_to_json(a));
  EXPECT_EQ(c.alt.plant.params, a.alt.plant.params);
}

TEST(Cli, SeedFallsBackToEnvironment) {
  cli::Common c;
  c.plant = "torsional";
  setenv("PH_SEED", "42", 1);
  EXPECT_EQ(c.resolve().alt.seed, 42u);
  c.seed = 7;
  EXPECT_EQ(c.resolve().alt.seed, 7u);
  setenv("PH_SEED", "x", 1);
  c.seed.reset();
  EXPECT_THROW(c.resolve(), std::invalid_argument);
  unsetenv("PH_SEED");
  c.deterministic = true;
  c.workers = 4;
  EXPECT_EQ(c.resolve().alt.workers, 1);
}
