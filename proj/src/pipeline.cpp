#include "ccseg/pipeline.hpp"

#include <json.hpp>

#include "ccseg/checkpoint.hpp"
#include "ccseg/image_io.hpp"

namespace ccseg {

namespace fs = std::filesystem;
using ordered = nlohmann::ordered_json;

std::vector<Sample> run_generate(const RunConfig& cfg, const fs::path& out, std::size_t count) {
  std::vector<Sample> samples = gen_dataset(cfg.data, count);
  write_dataset(out, samples);
  return samples;
}

TrainRunResult train_and_test(const RunConfig& cfg, const std::vector<Sample>& samples, Model& model,
                              const std::function<void(const EpochRecord&)>& on_epoch) {
  const Split parts = split(samples, cfg.split, cfg.split_seed(), cfg.data.held_out_domain());
  if (parts.test.empty()) throw DegenerateError("dataset too small: the test split is empty");
  TrainRunResult result;
  result.train_count = parts.train.size();
  result.val_count = parts.val.size();
  result.test_count = parts.test.size();
  result.history = fit(model, parts.train, parts.val, cfg.train, on_epoch);
  result.test = evaluate(model, parts.test, cfg.train.batch_size);
  return result;
}

std::string metrics_json(const MetricSummary& m) {
  ordered j;
  j["miou_mean"] = m.miou_mean;
  j["miou_std"] = m.miou_std;
  j["dsc_mean"] = m.dsc_mean;
  j["dsc_std"] = m.dsc_std;
  return j.dump(2) + "\n";
}

std::string history_jsonl(const TrainHistory& h) {
  std::string out;
  for (const EpochRecord& r : h.epochs) {
    ordered j;
    j["epoch"] = r.epoch;
    j["steps"] = r.steps;
    j["l_cim"] = r.l_cim;
    j["l_dice"] = r.l_dice;
    j["l_fl"] = r.l_fl;
    j["total"] = r.total;
    j["val_miou"] = r.val_miou;
    j["val_dsc"] = r.val_dsc;
    j["lr"] = r.lr;
    j["objective_before"] = r.objective_before;
    j["objective_after"] = r.objective_after;
    out += j.dump() + "\n";
  }
  return out;
}

TrainRunResult run_training(RunConfig cfg, const fs::path& data_dir, const fs::path& out_dir,
                            const TrainRunOptions& options) {
  if (options.no_cim) cfg.train.cim_enabled = false;
  if (options.no_dac) cfg.model.dac_enabled = false;
  cfg.validate();
  const std::vector<Sample> samples = read_dataset(data_dir);
  for (const Sample& s : samples) {
    if (s.size != cfg.model.image_size) {
      throw ConfigError("dataset images are " + std::to_string(s.size) + " pixels, model expects " +
                        std::to_string(cfg.model.image_size));
    }
  }
  Model model = build_model(cfg.model, cfg.model_seed());
  TrainRunResult result = train_and_test(cfg, samples, model, options.on_epoch);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string());
  save_checkpoint(out_dir / kCheckpointName, model);
  write_file_atomic(out_dir / kHistoryName, history_jsonl(result.history));
  write_file_atomic(out_dir / kRunConfigName, dump_run_config(cfg));
  write_file_atomic(out_dir / kMetricsName, metrics_json(result.test));
  return result;
}

EvalResult run_eval(const fs::path& checkpoint, const fs::path& data_dir, const std::optional<fs::path>& config,
                    const std::optional<fs::path>& report) {
  const fs::path cfg_path = config ? *config : checkpoint.parent_path() / kRunConfigName;
  if (!fs::exists(cfg_path)) {
    throw ConfigError("no model configuration: " + cfg_path.string() + " does not exist (pass --config)");
  }
  const RunConfig cfg = load_run_config(cfg_path);
  Model model = build_model(cfg.model, cfg.model_seed());
  load_checkpoint(checkpoint, model);

  const auto entries = read_manifest(data_dir);
  const std::vector<Sample> samples = read_dataset(data_dir);
  const MaskMap pred = predict(model, samples, cfg.train.batch_size);
  const MaskMap gt = make_batch(samples).masks;
  EvalResult result;
  result.metrics = summarize_metrics(pred, gt);

  ordered per_image = ordered::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const MaskMap p = pred.image(i);
    fs::path pred_path = data_dir / entries[i].image_path;
    pred_path.replace_extension(".pred.pgm");
    write_file_atomic(pred_path, encode_pgm(p.labels, p.h, p.w));
    per_image.push_back({{"sample_id", samples[i].sample_id},
                         {"miou", result.metrics.miou_per_image[i]},
                         {"dsc", result.metrics.dsc_per_image[i]}});
  }
  ordered j;
  j["miou_mean"] = result.metrics.miou_mean;
  j["miou_std"] = result.metrics.miou_std;
  j["dsc_mean"] = result.metrics.dsc_mean;
  j["dsc_std"] = result.metrics.dsc_std;
  j["per_image"] = per_image;
  result.report = report ? *report : data_dir / "eval_metrics.json";
  write_file_atomic(result.report, j.dump(2) + "\n");
  return result;
}

}  // namespace ccseg
