#include <doctest.h>

#include <unistd.h>

#include <filesystem>

#include "ccseg/checkpoint.hpp"
#include "ccseg/config.hpp"
#include "ccseg/error.hpp"
#include "ccseg/image_io.hpp"

using namespace ccseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("ccseg_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.channels_per_level = {8, 16, 24, 32, 48};
  return cfg;
}

}  // namespace

TEST_CASE("checkpoint round trip") {
  const Model a = build_model(small_model(), 1);
  Model b = build_model(small_model(), 2);
  const std::string bytes = encode_checkpoint(a.named_parameters());
  CHECK(bytes.substr(0, 4) == "CSEG");
  load_parameters(decode_checkpoint(bytes), b);
  CHECK(encode_checkpoint(b.named_parameters()) == bytes);

  TempDir dir("ckpt");
  save_checkpoint(dir.path / "m.ckpt", a);
  CHECK(read_file(dir.path / "m.ckpt") == bytes);
  Model c = build_model(small_model(), 3);
  load_checkpoint(dir.path / "m.ckpt", c);
  CHECK(encode_checkpoint(c.named_parameters()) == bytes);
}

TEST_CASE("checkpoint layout is little-endian") {
  const std::vector<Model::NamedTensor> entries{{"x", Tensor({2}, {1.0, -2.0})}};
  const std::string bytes = encode_checkpoint(entries);
  // magic, version, count, name length, name, rank, one extent, two doubles
  REQUIRE(bytes.size() == 4 + 4 + 4 + 4 + 1 + 4 + 8 + 16);
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);
  CHECK(static_cast<unsigned char>(bytes[8]) == 1);
  CHECK(bytes[16] == 'x');
  CHECK(static_cast<unsigned char>(bytes[21]) == 2);
  // 1.0 = 0x3FF0000000000000, least significant byte first.
  CHECK(bytes.substr(29, 6) == std::string(6, '\0'));
  CHECK(static_cast<unsigned char>(bytes[35]) == 0xF0);
  CHECK(static_cast<unsigned char>(bytes[36]) == 0x3F);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const Model a = build_model(small_model(), 1);
  const std::string bytes = encode_checkpoint(a.named_parameters());
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
  bad = bytes;
  bad[4] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes + "z"), CheckpointError);

  ModelConfig other = small_model();
  other.channels_per_level = {8, 16, 24, 32, 64};
  Model m = build_model(other, 1);
  CHECK_THROWS_AS(load_parameters(decode_checkpoint(bytes), m), CheckpointError);
}

TEST_CASE("pnm codecs") {
  const std::vector<double> image{0.0, 1.0, 0.5, 0.25, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.2, 0.8};
  const RasterImage ppm = decode_pnm(encode_ppm(image, 2, 2));
  CHECK(ppm.channels == 3);
  CHECK(ppm.height == 2);
  CHECK(ppm.width == 2);
  for (std::size_t i = 0; i < image.size(); ++i) CHECK(ppm.values[i] == static_cast<std::uint8_t>(std::lround(image[i] * 255)));

  const RasterImage pgm = decode_pnm(encode_pgm({0, 1, 1, 0, 1, 0}, 2, 3));
  CHECK(pgm.channels == 1);
  CHECK(pgm.values == std::vector<std::uint8_t>{0, 255, 255, 0, 255, 0});
  CHECK(encode_pgm({1}, 1, 1) == std::string("P5\n1 1\n255\n") + '\xff');
  CHECK_THROWS_AS(decode_pnm("P3\n1 1\n255\n0 0 0"), IoError);
}

TEST_CASE("dataset files") {
  SyntheticConfig cfg;
  const auto data = gen_dataset(cfg, 5);
  TempDir dir("data");
  write_dataset(dir.path, data);
  const auto manifest = read_manifest(dir.path);
  REQUIRE(manifest.size() == 5);
  CHECK(manifest[2].domain_id == 2);
  const auto back = read_dataset(dir.path);
  REQUIRE(back.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(back[i].mask == data[i].mask);
    double worst = 0.0;
    for (std::size_t p = 0; p < data[i].image.size(); ++p) worst = std::max(worst, std::abs(back[i].image[p] - data[i].image[p]));
    CHECK(worst <= 0.5 / 255 + 1e-12);
  }
  CHECK_THROWS_AS(read_manifest(dir.path / "missing"), IoError);
}

TEST_CASE("config parsing") {
  const RunConfig cfg = parse_run_config(R"({"name": "x", "seed": 4, "train": {"epochs": 3}, "loss": {"lambda": 0.25},
      "data": {"spurious": {"confound": "tint-density", "strength": 0.5}}})");
  CHECK(cfg.name == "x");
  CHECK(cfg.train.epochs == 3);
  CHECK(cfg.train.loss.lambda == 0.25);
  CHECK(cfg.data.spurious->strength == 0.5);
  CHECK(cfg.train.batch_size == 8);

  // Every randomness source is derived from the one seed.
  RunConfig again = cfg;
  again.derive_seeds();
  CHECK(again.data.seed == cfg.data.seed);
  CHECK(cfg.data.seed != cfg.train.seed);

  const RunConfig round = parse_run_config(dump_run_config(cfg));
  CHECK(dump_run_config(round) == dump_run_config(cfg));

  try {
    parse_run_config(R"({"train": {"lr": 0.1}})");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.lr") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_run_config("{"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"epochs": -1}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"epochs": 2.5}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"image_size": 128}})"), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
}
