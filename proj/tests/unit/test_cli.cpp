#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(SAE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("sae_cli_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("cli exit codes") {
  CHECK(run("--help") == 0);
  CHECK(run("train --no-such-flag") == 2);
  CHECK(run("train --data /nonexistent/acts.bin --out " + scratch("missing").string()) == 2);
  CHECK(run("eval --data x.bin") == 2);  // --checkpoint is required
}

TEST_CASE("cli train is deterministic and records its resolved config") {
  const fs::path d = scratch("train");
  REQUIRE(run("gen-data --kind dictionary --d 16 --rows 3000 --n-true 32 --k-true 3 --seed 2 --out " + d.string()) ==
          0);
  const std::string common = "train --data " + (d / "acts.bin").string() +
                             " --n 64 --k 3 --batch 128 --budget-tokens 12800 --lr 3e-3 --seed 5 --out ";
  REQUIRE(run(common + (d / "a").string()) == 0);
  REQUIRE(run(common + (d / "b").string()) == 0);
  CHECK(slurp(d / "a" / "trainlog.csv") == slurp(d / "b" / "trainlog.csv"));
  CHECK(slurp(d / "a" / "checkpoint.bin") == slurp(d / "b" / "checkpoint.bin"));
  const auto cfg = nlohmann::json::parse(slurp(d / "a" / "resolved-config.json"));
  CHECK(cfg["command"]["name"] == "train");
  CHECK(cfg["ae"]["n"] == 64);
  CHECK(cfg["ae"]["k"] == 3);
  CHECK(cfg["train"]["batch_size"] == 128);

  REQUIRE(run("eval --data " + (d / "acts.bin").string() + " --checkpoint " + (d / "a" / "checkpoint.bin").string() +
              " --out " + (d / "ev").string()) == 0);
  const auto ev = nlohmann::json::parse(slurp(d / "ev" / "eval.json"));
  CHECK(ev.contains("nmse"));
}

TEST_CASE("cli config file with an unknown key is rejected") {
  const fs::path d = scratch("cfg");
  std::ofstream(d / "c.json") << R"({"train": {"batch": 12}})";
  REQUIRE(run("gen-data --kind gaussian --d 8 --rows 200 --out " + d.string()) == 0);
  CHECK(run("train --data " + (d / "acts.bin").string() + " --config " + (d / "c.json").string() + " --out " +
            (d / "o").string()) == 2);
}
