#pragma once

#include <array>
#include <filesystem>
#include <string>

#include "ccseg/model.hpp"
#include "ccseg/synth.hpp"
#include "ccseg/train.hpp"

namespace ccseg {

/// Everything a run needs, parsed from one JSON document. Sections: "model",
/// "train", "data", "loss", "cim"; top-level "name", "output_dir", "seed",
/// "split". Unknown keys anywhere are errors. Every random stream (data, model
/// init, shuffling, augmentation, RFF banks) is derived from "seed".
struct RunConfig {
  std::string name = "run";
  std::string output_dir = "runs";
  std::uint64_t seed = 0;
  std::array<double, 3> split{0.7, 0.15, 0.15};
  ModelConfig model;
  TrainConfig train;  // includes the "loss" and "cim" sections
  SyntheticConfig data;

  /// Re-derives the per-stream seeds from `seed`; call after changing it.
  void derive_seeds();
  std::uint64_t model_seed() const;
  std::uint64_t split_seed() const;
  void validate() const;
};

/// Throws ConfigError with the offending key path on any problem.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Pretty-printed JSON that parse_run_config maps back to the same config.
std::string dump_run_config(const RunConfig& cfg);

}  // namespace ccseg
