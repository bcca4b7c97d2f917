#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "ccseg/config.hpp"
#include "ccseg/losses.hpp"
#include "ccseg/train.hpp"

namespace ccseg {

inline constexpr const char* kCheckpointName = "model.ckpt";
inline constexpr const char* kHistoryName = "history.jsonl";
inline constexpr const char* kMetricsName = "metrics.json";
inline constexpr const char* kRunConfigName = "run_config.json";

struct TrainRunOptions {
  bool no_cim = false;
  bool no_dac = false;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainRunResult {
  TrainHistory history;
  MetricSummary test;
  std::size_t train_count = 0;
  std::size_t val_count = 0;
  std::size_t test_count = 0;
};

/// Generates the dataset described by cfg.data and writes it under `out`.
std::vector<Sample> run_generate(const RunConfig& cfg, const std::filesystem::path& out, std::size_t count);

/// Splits `samples`, fits, evaluates on the test split. No files are written.
TrainRunResult train_and_test(const RunConfig& cfg, const std::vector<Sample>& samples, Model& model,
                              const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Reads the dataset in `data_dir`, trains, then writes model.ckpt,
/// history.jsonl, metrics.json and run_config.json to `out_dir`.
TrainRunResult run_training(RunConfig cfg, const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                            const TrainRunOptions& options = {});

std::string metrics_json(const MetricSummary& m);
std::string history_jsonl(const TrainHistory& h);

struct EvalResult {
  MetricSummary metrics;
  std::filesystem::path report;
};

/// Evaluates a checkpoint on every sample of `data_dir`. The model shape comes
/// from `config` or, when absent, from run_config.json beside the checkpoint.
/// Writes <image>.pred.pgm beside each input and a per-image report to
/// `report` (default: eval_metrics.json in data_dir).
EvalResult run_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                    const std::optional<std::filesystem::path>& config = std::nullopt,
                    const std::optional<std::filesystem::path>& report = std::nullopt);

}  // namespace ccseg
