#include "ccseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "ccseg/random.hpp"

namespace ccseg {

void TrainConfig::validate() const {
  if (!(lr_max >= 0.0) || !(lr_min >= 0.0) || lr_min > lr_max) {
    throw ConfigError("train: learning rates must satisfy 0 <= lr_min <= lr_max");
  }
  if (batch_size < 2) throw ConfigError("train: batch_size must be at least 2");
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be non-negative");
  if (early_stop_patience == 0) throw ConfigError("train: early_stop_patience must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
  loss.validate();
  cim.validate();
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min) {
  if (total_steps == 0) throw DomainError("cosine_lr: total_steps must be positive");
  if (step > total_steps) {
    throw DomainError("cosine_lr: step " + std::to_string(step) + " exceeds total " + std::to_string(total_steps));
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

AdamW::AdamW(std::vector<Tensor> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    if (!p.has_grad()) continue;
    auto data = p.mutable_data();
    auto grad = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      data[i] -= lr * wd_ * data[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
      data[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

void AdamW::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

AdamW make_optimizer(const Model& model, const TrainConfig& cfg) {
  std::vector<Tensor> params;
  for (auto& [name, t] : model.named_parameters()) params.push_back(t);
  return AdamW(std::move(params), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
}

Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("make_batch: empty batch");
  const std::size_t size = samples[indices[0]].size;
  const std::size_t m = size * size;
  std::vector<double> images;
  std::vector<std::uint8_t> labels;
  images.reserve(indices.size() * 3 * m);
  labels.reserve(indices.size() * m);
  for (std::size_t i : indices) {
    const Sample& s = samples.at(i);
    if (s.size != size) throw ShapeError("make_batch: samples of different sizes in one batch");
    images.insert(images.end(), s.image.begin(), s.image.end());
    labels.insert(labels.end(), s.mask.begin(), s.mask.end());
  }
  return Batch{Tensor({indices.size(), 3, size, size}, std::move(images)),
               MaskMap(indices.size(), size, size, std::move(labels))};
}

Batch make_batch(const std::vector<Sample>& samples) {
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), 0);
  return make_batch(samples, all);
}

StepMetrics train_step(Model& model, const Batch& batch, const TrainConfig& cfg, AdamW& opt, double lr) {
  const std::size_t n = batch.images.dim(0);
  if (n < 2) throw DegenerateError("train_step: batch of " + std::to_string(n) + " is too small (n >= 2)");
  StepMetrics out;
  out.lr = lr;
  Tape tape;
  {
    TapeScope scope(tape);
    ForwardResult fr = forward(model, batch.images);

    // Phase 1: sample weights from the detached deepest features.
    const Eigen::MatrixXd features = extract_feature_vars(fr.f5, cfg.cim);
    SampleWeights w = SampleWeights::uniform(n);
    if (cfg.cim_enabled) {
      WeightLearning learned = learn_weights(features, cfg.cim);
      w = learned.weights;
      out.objective_before = learned.objective_uniform;
      out.objective_after = learned.objective_best;
    } else {
      const auto banks = make_banks(static_cast<std::size_t>(features.cols()), cfg.cim);
      out.objective_before = out.objective_after = independence_objective(features, banks, w);
    }

    // Phase 2: weighted objective and network update.
    const Tensor l_cim = cim_loss(ce_per_sample(fr.probs, batch.masks), w);
    const Tensor l_dice = dice_loss(fr.probs, batch.masks, cfg.loss);
    const Tensor l_fl = focal_loss(fr.probs, batch.masks, cfg.loss);
    const Tensor total = total_loss(l_cim, l_dice, l_fl, cfg.loss);
    out.l_cim = l_cim.item();
    out.l_dice = l_dice.item();
    out.l_fl = l_fl.item();
    out.total = total.item();
    backward(total, tape);
  }
  opt.step(lr);
  opt.zero_grad();
  return out;
}

bool EarlyStopping::update(double metric) {
  ++epoch_;
  if (!seen_ || metric > best_) {
    seen_ = true;
    best_ = metric;
    best_epoch_ = epoch_;
    wait_ = 0;
    return true;
  }
  ++wait_;
  return false;
}

MaskMap predict(const Model& model, const std::vector<Sample>& samples, std::size_t chunk) {
  if (samples.empty()) throw DegenerateError("predict: no samples");
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t size = samples.front().size;
  std::vector<std::uint8_t> labels;
  labels.reserve(samples.size() * size * size);
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, samples.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const MaskMap pred = predict_mask(forward(model, make_batch(samples, idx).images).probs);
    labels.insert(labels.end(), pred.labels.begin(), pred.labels.end());
  }
  return MaskMap(samples.size(), size, size, std::move(labels));
}

MetricSummary evaluate(const Model& model, const std::vector<Sample>& samples, std::size_t chunk) {
  const MaskMap pred = predict(model, samples, chunk);
  return summarize_metrics(pred, make_batch(samples).masks);
}

ParameterSnapshot snapshot(const Model& model) {
  ParameterSnapshot snap;
  for (const auto& [name, t] : model.named_parameters()) snap.emplace_back(t.data().begin(), t.data().end());
  return snap;
}

void restore(Model& model, const ParameterSnapshot& snap) {
  auto params = model.named_parameters();
  if (params.size() != snap.size()) throw ShapeError("restore: snapshot does not match the model");
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto data = params[k].second.mutable_data();
    if (data.size() != snap[k].size()) throw ShapeError("restore: size mismatch for " + params[k].first);
    std::copy(snap[k].begin(), snap[k].end(), data.begin());
  }
}

namespace {

// Index chunks of one epoch; a trailing single sample joins the previous chunk.
std::vector<std::vector<std::size_t>> make_chunks(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> chunks;
  for (std::size_t start = 0; start < order.size(); start += batch) {
    const std::size_t end = std::min(order.size(), start + batch);
    if (end - start == 1 && !chunks.empty()) {
      chunks.back().push_back(order[start]);
    } else {
      chunks.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                          order.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return chunks;
}

}  // namespace

TrainHistory fit(Model& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                 const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw DegenerateError("fit: empty training set");
  if (val_set.empty()) throw DegenerateError("fit: empty validation set");
  if (train_set.size() < 2) throw DegenerateError("fit: training set needs at least two samples");

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t steps_per_epoch = make_chunks(order, cfg.batch_size).size();
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;

  AdamW opt = make_optimizer(model, cfg);
  EarlyStopping stopper(cfg.early_stop_patience);
  ParameterSnapshot best = snapshot(model);
  TrainHistory history;
  const std::uint64_t shuffle_seed = mix64(cfg.seed, 0x5EEDu);
  const std::uint64_t augment_seed = mix64(cfg.seed, 0xA07Au);
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(mix64(shuffle_seed, epoch));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<std::size_t>(order));

    std::vector<Sample> epoch_samples;
    const std::vector<Sample>* source = &train_set;
    if (cfg.augment) {
      epoch_samples.reserve(train_set.size());
      const std::uint64_t epoch_seed = mix64(augment_seed, epoch);
      for (std::size_t i = 0; i < train_set.size(); ++i) {
        epoch_samples.push_back(random_augment(train_set[i], mix64(epoch_seed, i)));
      }
      source = &epoch_samples;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    for (const auto& chunk : make_chunks(order, cfg.batch_size)) {
      const double lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
      StepMetrics sm;
      try {
        sm = train_step(model, make_batch(*source, chunk), cfg, opt, lr);
      } catch (const NumericalError& e) {
        throw NumericalError("epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + ": " + e.what());
      }
      ++step;
      ++rec.steps;
      rec.l_cim += sm.l_cim;
      rec.l_dice += sm.l_dice;
      rec.l_fl += sm.l_fl;
      rec.total += sm.total;
      rec.objective_before += sm.objective_before;
      rec.objective_after += sm.objective_after;
      rec.lr = lr;
    }
    const double k = static_cast<double>(rec.steps);
    for (double* v : {&rec.l_cim, &rec.l_dice, &rec.l_fl, &rec.total, &rec.objective_before, &rec.objective_after}) {
      *v /= k;
    }
    const MetricSummary val = evaluate(model, val_set, cfg.batch_size);
    rec.val_miou = val.miou_mean;
    rec.val_dsc = val.dsc_mean;
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (stopper.update(val.dsc_mean)) best = snapshot(model);
    if (stopper.should_stop()) {
      history.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  history.best_epoch = stopper.best_epoch();
  history.best_val_dsc = stopper.best();
  restore(model, best);
  return history;
}

}  // namespace ccseg
