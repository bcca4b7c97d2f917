#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>

#include "ccseg/image_io.hpp"
#include "ccseg/losses.hpp"
#include "ccseg/pipeline.hpp"
#include "ccseg/verify.hpp"

namespace fs = std::filesystem;
using namespace ccseg;

namespace {

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kConfigOrIo = 2, kNumerical = 3, kCheckpoint = 4 };

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const CheckpointError*>(&e)) return kCheckpoint;
  if (dynamic_cast<const NumericalError*>(&e) || dynamic_cast<const DomainError*>(&e)) return kNumerical;
  return kConfigOrIo;
}

void print_epoch(const EpochRecord& r) {
  std::cout << "epoch " << std::setw(4) << r.epoch << "  loss " << std::fixed << std::setprecision(4) << r.total
            << " (cim " << r.l_cim << ", dice " << r.l_dice << ", focal " << r.l_fl << ")  val mIoU "
            << std::setprecision(2) << r.val_miou << "  val DSC " << r.val_dsc << "  lr " << std::scientific
            << std::setprecision(3) << r.lr << std::defaultfloat << "\n"
            << std::flush;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nucleus segmentation with branch fusion and causal sample reweighting"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, checkpoint, report;
  std::size_t count = 0;
  bool no_cim = false, no_dac = false, full = false;
  std::string fault;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset (PPM images, PGM masks, manifest)");
  gen->add_option("--config", config_path, "Run configuration JSON")->required();
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--count", count, "Number of samples")->required()->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "Train on a generated dataset and evaluate on its test split");
  train->add_option("--config", config_path, "Run configuration JSON")->required();
  train->add_option("--data", data_dir, "Dataset directory (with manifest.jsonl)")->required();
  train->add_option("--out", out_dir, "Output directory (default: <output_dir>/<name> from the config)");
  train->add_flag("--no-cim", no_cim, "Keep sample weights uniform");
  train->add_flag("--no-dac", no_dac, "Fuse branches by a 1x1 convolution of their sum");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on every sample of a dataset");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Dataset directory")->required();
  eval->add_option("--config", config_path, "Run configuration (default: run_config.json beside the checkpoint)");
  eval->add_option("--report", report, "Per-image report path (default: <data>/eval_metrics.json)");

  auto* verify = app.add_subcommand("verify", "Run the acceptance property suite");
  verify->add_flag("--full", full, "Include the training-based checks");
  verify->add_option("--inject-fault", fault, "Corrupt a gradient on purpose to exercise the suite")
      ->check(CLI::IsMember({"focal-grad-sign"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigOrIo;
  }

  try {
    if (*gen) {
      const RunConfig cfg = load_run_config(config_path);
      const auto samples = run_generate(cfg, out_dir, count);
      std::vector<std::size_t> per_domain(cfg.data.domains.size(), 0);
      for (const auto& s : samples) ++per_domain[static_cast<std::size_t>(s.domain_id)];
      std::cout << "dataset seed " << cfg.data.seed << " (run seed " << cfg.seed << ")\n"
                << "wrote " << samples.size() << " samples to " << out_dir << "\n";
      for (std::size_t d = 0; d < per_domain.size(); ++d) std::cout << "  domain " << d << ": " << per_domain[d] << "\n";
      return kOk;
    }
    if (*train) {
      const RunConfig cfg = load_run_config(config_path);
      const fs::path out = out_dir.empty() ? fs::path(cfg.output_dir) / cfg.name : fs::path(out_dir);
      TrainRunOptions options{no_cim, no_dac, print_epoch};
      const TrainRunResult r = run_training(cfg, data_dir, out, options);
      std::cout << "split train/val/test: " << r.train_count << "/" << r.val_count << "/" << r.test_count << "\n"
                << "best epoch " << r.history.best_epoch << " (val DSC " << r.history.best_val_dsc << ")\n"
                << metrics_json(r.test) << "wrote " << (out / kCheckpointName).string() << "\n";
      return kOk;
    }
    if (*eval) {
      const auto cfg = config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path);
      const auto rep = report.empty() ? std::nullopt : std::optional<fs::path>(report);
      const EvalResult r = run_eval(checkpoint, data_dir, cfg, rep);
      for (std::size_t i = 0; i < r.metrics.dsc_per_image.size(); ++i) {
        std::cout << "image " << i << "  mIoU " << r.metrics.miou_per_image[i] << "  DSC " << r.metrics.dsc_per_image[i]
                  << "\n";
      }
      std::cout << metrics_json(r.metrics) << "report " << r.report.string() << "\n";
      return kOk;
    }
    if (*verify) {
      if (fault == "focal-grad-sign") set_focal_gradient_fault(-1.0);
      std::vector<AcceptanceCheck> checks;
      for (auto& c : acceptance_checks()) {
        if (full || !c.slow) checks.push_back(std::move(c));
      }
      const auto reports = run_checks(checks, std::cout);
      std::vector<std::string> failed;
      for (const auto& r : reports) {
        if (!r.pass) failed.push_back(std::to_string(r.criterion) + " " + r.name);
      }
      if (failed.empty()) {
        std::cout << "all " << reports.size() << " checks passed\n";
        return kOk;
      }
      std::cout << failed.size() << " check(s) failed:\n";
      for (const auto& f : failed) std::cout << "  " << f << "\n";
      return kVerifyFailed;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kOk;
}
