// Drives the ddit executable end to end on a one-block model.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ddit/config.hpp"
#include "ddit/verify.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Workspace {
 public:
  Workspace() : dir_(fs::temp_directory_path() / ("ddit_cli_" + std::to_string(::getpid()))) {
    fs::create_directories(dir_);
  }
  ~Workspace() { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  Run ddit(const std::string& args) const {
    const auto out = path("stdout.txt"), err = path("stderr.txt");
    const std::string cmd = std::string(DDIT_CLI) + " " + args + " > " + out.string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

 private:
  fs::path dir_;
};

// Trains the shared one-block model once for all cases below.
const Workspace& trained() {
  static Workspace ws;
  static bool done = false;
  if (!done) {
    auto cfg = ddit::verify::tiny_world_config();
    cfg.train.steps = 50;
    cfg.train.checkpoint_every = 25;
    std::ofstream(ws.path("tiny.ini")) << cfg.to_text();
    REQUIRE(ws.ddit("gen-data --count 64 --seed 3 --out " + ws.path("data.bin").string()).code == 0);
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = ws.ddit("train --quiet --config " + ws.path("tiny.ini").string() + " --data " +
                           ws.path("data.bin").string() + " --out " + ws.path("run").string());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    INFO(r.err);
    REQUIRE(r.code == 0);
    CHECK(secs < 60.0);
    REQUIRE(ws.ddit("render --caption \"a red square in top-left and blue circle in bottom-right .\" --out " +
                    ws.path("scene.ppm").string()).code == 0);
    done = true;
  }
  return ws;
}

std::string ckpt() { return trained().path("run/checkpoint.bin").string(); }

}  // namespace

TEST_CASE("training writes one metrics record per step and a checkpoint") {
  const auto& ws = trained();
  const auto log = slurp(ws.path("run/metrics.jsonl"));
  CHECK(std::count(log.begin(), log.end(), '\n') == 50);
  CHECK(log.find("\"step\":50") != std::string::npos);
  CHECK(fs::exists(ws.path("run/checkpoint.bin")));
  CHECK(slurp(ws.path("run/config.ini")).rfind(std::string("# ddit ") + ddit::kToolVersion, 0) == 0);
}

TEST_CASE("guidance scale 1 reproduces the unguided image byte for byte") {
  const auto& ws = trained();
  const std::string cap = " --caption \"a red square in top-left .\" --seed 4 --steps 6";
  REQUIRE(ws.ddit("t2i --checkpoint " + ckpt() + cap + " --guidance 1 --out " + ws.path("s1.ppm").string()).code == 0);
  REQUIRE(ws.ddit("t2i --checkpoint " + ckpt() + cap + " --no-guidance --out " + ws.path("off.ppm").string()).code == 0);
  REQUIRE(ws.ddit("t2i --checkpoint " + ckpt() + cap + " --guidance 7 --out " + ws.path("s7.ppm").string()).code == 0);
  CHECK(slurp(ws.path("s1.ppm")) == slurp(ws.path("off.ppm")));
  CHECK(slurp(ws.path("s7.ppm")) != slurp(ws.path("off.ppm")));
}

TEST_CASE("question tokens stay fixed through every infill step") {
  const auto& ws = trained();
  const auto r = ws.ddit("vqa --trace --steps 5 --checkpoint " + ckpt() + " --image " + ws.path("scene.ppm").string() +
                         " --question \"what color is the square ?\"");
  REQUIRE(r.code == 0);
  std::istringstream lines(r.err);
  std::string line;
  int steps = 0;
  while (std::getline(lines, line)) {
    if (line.rfind("step ", 0) != 0) continue;
    ++steps;
    CHECK(line.find(": what color is the square ?") != std::string::npos);
  }
  CHECK(steps == 5);
  CHECK_FALSE(r.out.empty());
}

TEST_CASE("captioning prints words from the vocabulary") {
  const auto& ws = trained();
  const auto r = ws.ddit("caption --steps 4 --checkpoint " + ckpt() + " --image " + ws.path("scene.ppm").string());
  CHECK(r.code == 0);
  CHECK(r.out.find("<mask>") == std::string::npos);
}

TEST_CASE("unknown config keys fail with the key named") {
  const auto& ws = trained();
  std::ofstream(ws.path("bad.ini")) << "version = 1\n[train]\nlearnign_rate = 0.1\n";
  const auto r = ws.ddit("train --config " + ws.path("bad.ini").string() + " --data " + ws.path("data.bin").string() +
                         " --out " + ws.path("bad").string());
  CHECK(r.code == 1);
  CHECK(r.err.find("learnign_rate") != std::string::npos);
}

TEST_CASE("resume refuses a changed training config") {
  const auto& ws = trained();
  const auto r = ws.ddit("train --resume --config " + ws.path("tiny.ini").string() + " --set train.lr=0.5 --data " +
                         ws.path("data.bin").string() + " --out " + ws.path("run").string());
  CHECK(r.code == 1);
  CHECK(r.err.find("refusing to resume") != std::string::npos);
}

TEST_CASE("unknown caption words are reported") {
  const auto& ws = trained();
  const auto r = ws.ddit("t2i --checkpoint " + ckpt() + " --caption \"a purple square\" --out " +
                         ws.path("x.ppm").string());
  CHECK(r.code == 1);
  CHECK(r.err.find("purple") != std::string::npos);
}

TEST_CASE("a failing check exits with the verification code") {
  const auto& ws = trained();
  CHECK(ws.ddit("verify --only euler_convergence").code == 0);
  CHECK(ws.ddit("verify --only euler_convergence --inject euler_sign_flip").code == 2);
  const auto r = ws.ddit("verify --only posterior_consistency --inject posterior_sign_flip");
  CHECK(r.code == 2);
  CHECK(r.out.find("FAIL posterior_consistency") != std::string::npos);
}
