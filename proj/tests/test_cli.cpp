#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(DYNPRE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct Scratch {
  fs::path path = fs::temp_directory_path() / ("dynpre_cli_" + std::to_string(::getpid()));
  Scratch() { fs::create_directories(path); }
  ~Scratch() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("exit codes", "[cli]") {
  CHECK(run("--help") == 0);
  CHECK(run("train --help") == 0);
  CHECK(run("frobnicate") == 1);
  CHECK(run("") == 1);
  CHECK(run("train --mode fpt --data /nonexistent --n-train 16 --out x.jsonl") == 1);
  CHECK(run("report --in /nonexistent.jsonl --out y.csv") == 1);
}

TEST_CASE("fpt without a checkpoint is a usage error", "[cli]") {
  Scratch s;
  const auto cfg = s.path / "cfg.json";
  std::ofstream(cfg) << R"({"sim": {"n_graphs": 4, "downstream_length": 60}})";
  REQUIRE(run("simulate --kind downstream --config " + cfg.string() + " --out " + s.path.string()) == 0);
  REQUIRE(fs::exists(s.path / "downstream.tsd"));
  CHECK(run("train --mode fpt --data " + s.path.string() + " --n-train 2 --out " + (s.path / "r.jsonl").string()) == 1);
  CHECK_FALSE(fs::exists(s.path / "r.jsonl"));
}

TEST_CASE("runtime failures exit 2", "[cli]") {
  Scratch s;
  std::ofstream(s.path / "bad.jsonl") << "not json\n";
  CHECK(run("report --in " + (s.path / "bad.jsonl").string() + " --out " + (s.path / "o.csv").string()) == 2);
}

TEST_CASE("gradcheck passes", "[cli]") {
  CHECK(run("gradcheck --shapes 2") == 0);
}
