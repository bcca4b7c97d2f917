#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ccseg/cim.hpp"
#include "ccseg/losses.hpp"
#include "ccseg/model.hpp"
#include "ccseg/synth.hpp"

namespace ccseg {

struct TrainConfig {
  double lr_max = 1e-3;
  double lr_min = 0.0;
  std::size_t batch_size = 8;
  std::size_t epochs = 400;
  double weight_decay = 1e-2;
  std::size_t early_stop_patience = 25;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Loss weights; loss.lambda is the dice weight.
  LossConfig loss;
  CimConfig cim;
  /// false keeps w uniform, so the weighted loss is plain mean cross-entropy.
  bool cim_enabled = true;
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const;
};

/// lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min);

/// Adaptive moments with decoupled weight decay:
///   p <- p - lr wd p;  m, v <- moment updates;  p <- p - lr m_hat / (sqrt(v_hat) + eps).
/// Parameters that received no gradient are left untouched.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, double beta1, double beta2, double eps, double weight_decay);
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
};

AdamW make_optimizer(const Model& model, const TrainConfig& cfg);

struct Batch {
  Tensor images;  // N x 3 x S x S
  MaskMap masks;
};

Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices);
Batch make_batch(const std::vector<Sample>& samples);

struct StepMetrics {
  double l_cim = 0.0;
  double l_dice = 0.0;
  double l_fl = 0.0;
  double total = 0.0;
  double objective_before = 0.0;
  double objective_after = 0.0;
  double lr = 0.0;
};

/// One update: forward, learn sample weights on the detached f5 features,
/// weighted loss, backward, AdamW at `lr`, zero gradients.
StepMetrics train_step(Model& model, const Batch& batch, const TrainConfig& cfg, AdamW& opt, double lr);

/// Stops after `patience` consecutive epochs without strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  /// Records an epoch's metric; returns true when it is a new best.
  bool update(double metric);
  bool should_stop() const { return wait_ >= patience_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  std::size_t wait_ = 0;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  double best_ = -1.0;
  bool seen_ = false;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double l_cim = 0.0;
  double l_dice = 0.0;
  double l_fl = 0.0;
  double total = 0.0;
  double val_miou = 0.0;
  double val_dsc = 0.0;
  double lr = 0.0;
  double objective_before = 0.0;
  double objective_after = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_dsc = 0.0;
  bool stopped_early = false;
};

/// Hard predictions (p(nucleus) > 0.5) for every sample, evaluated in chunks.
MaskMap predict(const Model& model, const std::vector<Sample>& samples, std::size_t chunk = 8);
MetricSummary evaluate(const Model& model, const std::vector<Sample>& samples, std::size_t chunk = 8);

using ParameterSnapshot = std::vector<std::vector<double>>;
ParameterSnapshot snapshot(const Model& model);
void restore(Model& model, const ParameterSnapshot& snap);

/// Epoch loop with seeded shuffling and augmentation, cosine schedule over all
/// steps, validation DSC early stopping. On return the model holds the
/// best-validation parameters.
TrainHistory fit(Model& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                 const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace ccseg
