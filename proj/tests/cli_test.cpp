#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ccseg/image_io.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kSource = CCSEG_SOURCE_DIR;

struct Run {
  int code = -1;
  std::string output;
};

Run cli(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / ("ccseg_cli_" + std::to_string(::getpid()) + ".log");
  const std::string cmd = std::string("\"") + CCSEG_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = ccseg::read_file(log);
  fs::remove(log);
  return r;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

std::size_t count_files(const fs::path& dir) {
  return static_cast<std::size_t>(std::distance(fs::directory_iterator(dir), fs::directory_iterator{}));
}

struct Workspace {
  fs::path root = fs::temp_directory_path() / ("ccseg_cli_ws_" + std::to_string(::getpid()));
  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
  std::string operator/(const std::string& rel) const { return "\"" + (root / rel).string() + "\""; }
  fs::path path(const std::string& rel) const { return root / rel; }
};

const std::string kSmoke = "\"" + (kSource / "configs" / "smoke.json").string() + "\"";

}  // namespace

TEST_CASE("gen writes a complete, reproducible dataset") {
  Workspace ws;
  REQUIRE(cli("gen --config " + kSmoke + " --out " + (ws / "a") + " --count 16").code == 0);
  CHECK(count_files(ws.path("a/images")) == 16);
  CHECK(count_files(ws.path("a/masks")) == 16);
  CHECK(count_lines(ws.path("a/manifest.jsonl")) == 16);

  REQUIRE(cli("gen --config " + kSmoke + " --out " + (ws / "b") + " --count 16").code == 0);
  for (const auto& entry : fs::recursive_directory_iterator(ws.path("a"))) {
    if (!entry.is_regular_file()) continue;
    const fs::path twin = ws.path("b") / fs::relative(entry.path(), ws.path("a"));
    CHECK(ccseg::read_file(entry.path()) == ccseg::read_file(twin));
  }
}

TEST_CASE("malformed config exits 2 without output") {
  Workspace ws;
  {
    std::ofstream(ws.path("bad.json")) << R"({"train": {"epochz": 3}})";
  }
  const Run r = cli("gen --config " + (ws / "bad.json") + " --out " + (ws / "out") + " --count 4");
  CHECK(r.code == 2);
  CHECK(r.output.find("train.epochz") != std::string::npos);
  CHECK_FALSE(fs::exists(ws.path("out")));

  CHECK(cli("gen --config " + (ws / "missing.json") + " --out " + (ws / "out") + " --count 4").code == 2);
  CHECK(cli("train --bogus-flag").code == 2);
}

TEST_CASE("train, retrain and evaluate") {
  Workspace ws;
  REQUIRE(cli("gen --config " + kSmoke + " --out " + (ws / "data") + " --count 20").code == 0);
  const Run first = cli("train --config " + kSmoke + " --data " + (ws / "data") + " --out " + (ws / "run1"));
  REQUIRE_MESSAGE(first.code == 0, first.output);
  REQUIRE(cli("train --config " + kSmoke + " --data " + (ws / "data") + " --out " + (ws / "run2")).code == 0);

  for (const char* name : {"metrics.json", "model.ckpt", "history.jsonl", "run_config.json"}) {
    CHECK(fs::exists(ws.path("run1") / name));
    CHECK(ccseg::read_file(ws.path("run1") / name) == ccseg::read_file(ws.path("run2") / name));
  }
  CHECK(count_lines(ws.path("run1/history.jsonl")) <= 2);
  const std::string metrics = ccseg::read_file(ws.path("run1/metrics.json"));
  for (const char* key : {"miou_mean", "miou_std", "dsc_mean", "dsc_std"}) CHECK(metrics.find(key) != std::string::npos);

  const Run ev = cli("eval --checkpoint " + (ws / "run1/model.ckpt") + " --data " + (ws / "data"));
  REQUIRE_MESSAGE(ev.code == 0, ev.output);
  CHECK(fs::exists(ws.path("data/eval_metrics.json")));
  const fs::path pred = ws.path("data/images/sample_00000.pred.pgm");
  REQUIRE(fs::exists(pred));
  const ccseg::RasterImage img = ccseg::decode_pnm(ccseg::read_file(pred));
  CHECK(img.channels == 1);
  CHECK(img.height == 64);
  CHECK(img.width == 64);
  for (auto v : img.values) CHECK((v == 0 || v == 255));

  // Ablation switches change the architecture that gets saved.
  REQUIRE(cli("train --config " + kSmoke + " --data " + (ws / "data") + " --out " + (ws / "bb") + " --no-cim --no-dac")
              .code == 0);
  CHECK(ccseg::read_file(ws.path("bb/run_config.json")).find("\"dac_enabled\": false") != std::string::npos);
  CHECK(cli("eval --checkpoint " + (ws / "bb/model.ckpt") + " --data " + (ws / "data")).code == 0);

  // A checkpoint with the wrong magic is refused with exit 4.
  std::string bytes = ccseg::read_file(ws.path("run1/model.ckpt"));
  bytes[0] = 'X';
  ccseg::write_file_atomic(ws.path("run1/model.ckpt"), bytes);
  const Run bad = cli("eval --checkpoint " + (ws / "run1/model.ckpt") + " --data " + (ws / "data"));
  CHECK(bad.code == 4);
}

TEST_CASE("verify detects an injected gradient fault") {
  const Run clean = cli("verify");
  CHECK_MESSAGE(clean.code == 0, clean.output);
  const Run faulty = cli("verify --inject-fault focal-grad-sign");
  CHECK(faulty.code == 1);
  CHECK(faulty.output.find("[FAIL]  1 gradient-fidelity") != std::string::npos);
  CHECK(faulty.output.find("focal_loss") != std::string::npos);
}
