#include "ccseg/cim.hpp"

#include <algorithm>
#include <numeric>

#include "ccseg/random.hpp"

namespace ccseg {

void CimConfig::validate() const {
  if (n_f == 0 || m_features == 0 || inner_steps == 0) throw ConfigError("cim: counts must be positive");
  if (!(inner_lr > 0.0)) throw ConfigError("cim: inner_lr must be positive");
}

RFFBank::RFFBank(Eigen::VectorXd omega, Eigen::VectorXd phi, std::uint64_t seed)
    : omega_(std::move(omega)), phi_(std::move(phi)), seed_(seed) {
  if (omega_.size() != phi_.size() || omega_.size() == 0) {
    throw ShapeError("RFFBank: omega and phi must be non-empty and of equal length");
  }
}

RFFBank RFFBank::draw(std::size_t n_f, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::VectorXd omega(static_cast<Eigen::Index>(n_f));
  Eigen::VectorXd phi(static_cast<Eigen::Index>(n_f));
  for (Eigen::Index j = 0; j < omega.size(); ++j) omega(j) = rng.normal();
  for (Eigen::Index j = 0; j < phi.size(); ++j) phi(j) = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return RFFBank(std::move(omega), std::move(phi), seed);
}

SampleWeights::SampleWeights(Eigen::VectorXd w) : w_(std::move(w)) {
  const double n = static_cast<double>(w_.size());
  if (w_.size() == 0) throw ConstraintError("sample weights: empty weight vector");
  if (!w_.allFinite() || (w_.array() < 0.0).any()) throw ConstraintError("sample weights: negative or non-finite entry");
  if (std::abs(w_.sum() - n) > kTolerance) {
    throw ConstraintError("sample weights: sum " + std::to_string(w_.sum()) + " differs from n = " +
                          std::to_string(w_.size()));
  }
}

std::vector<RFFBank> make_banks(std::size_t m, const CimConfig& cfg) {
  std::vector<RFFBank> banks;
  banks.reserve(m);
  const std::uint64_t base = mix64(cfg.seed, 0x52FFu);
  for (std::size_t j = 0; j < m; ++j) banks.push_back(RFFBank::draw(cfg.n_f, mix64(base, j)));
  return banks;
}

std::vector<std::size_t> select_feature_channels(std::size_t channels, const CimConfig& cfg) {
  std::vector<std::size_t> all(channels);
  std::iota(all.begin(), all.end(), 0);
  if (channels <= cfg.m_features) return all;
  Rng rng(mix64(cfg.seed, 0xC4A7u));
  for (std::size_t i = 0; i < cfg.m_features; ++i) {
    std::size_t j = i + rng.index(channels - i);
    std::swap(all[i], all[j]);
  }
  all.resize(cfg.m_features);
  std::sort(all.begin(), all.end());
  return all;
}

Eigen::MatrixXd extract_feature_vars(const Tensor& f5, const CimConfig& cfg) {
  if (f5.rank() != 4) throw ShapeError("extract_feature_vars: expected NCHW, got " + format_shape(f5.shape()));
  const std::size_t n = f5.dim(0), c = f5.dim(1), hw = f5.dim(2) * f5.dim(3);
  if (n < 2) throw DegenerateError("extract_feature_vars: batch of " + std::to_string(n) + " is too small (n >= 2)");
  const auto channels = select_feature_channels(c, cfg);
  Eigen::MatrixXd features(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(channels.size()));
  auto data = f5.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < channels.size(); ++j) {
      const double* p = data.data() + (i * c + channels[j]) * hw;
      double acc = 0.0;
      for (std::size_t t = 0; t < hw; ++t) acc += p[t];
      features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = acc / static_cast<double>(hw);
    }
  }
  return features;
}

namespace {

std::vector<Eigen::MatrixXd> map_features(const Eigen::MatrixXd& features, std::span<const RFFBank> banks) {
  const auto m = static_cast<std::size_t>(features.cols());
  if (m < 2) throw DegenerateError("independence objective needs m >= 2 feature variables");
  if (banks.size() < m) throw ShapeError("independence objective: fewer RFF banks than feature variables");
  std::vector<Eigen::MatrixXd> mapped;
  mapped.reserve(m);
  for (std::size_t j = 0; j < m; ++j) mapped.push_back(banks[j].map(features.col(static_cast<Eigen::Index>(j))));
  return mapped;
}

ObjectiveGradient objective_on_mapped(const std::vector<Eigen::MatrixXd>& mapped, const Eigen::VectorXd& w,
                                      bool with_gradient) {
  const Eigen::Index n = w.size();
  const double scale = 1.0 / static_cast<double>(n - 1);
  // Centred weighted maps, one per feature.
  std::vector<Eigen::MatrixXd> centred;
  centred.reserve(mapped.size());
  for (const auto& U : mapped) {
    Eigen::MatrixXd Uw = w.asDiagonal() * U;
    Uw.rowwise() -= Uw.colwise().sum() / static_cast<double>(n);
    centred.push_back(std::move(Uw));
  }
  ObjectiveGradient out;
  if (with_gradient) out.d_weights = Eigen::VectorXd::Zero(n);
  for (std::size_t a = 0; a < mapped.size(); ++a) {
    for (std::size_t b = a + 1; b < mapped.size(); ++b) {
      Eigen::MatrixXd sigma = centred[a].transpose() * centred[b] * scale;
      out.value += sigma.squaredNorm();
      if (with_gradient) {
        out.d_weights += 2.0 * scale *
                         ((mapped[a] * sigma).cwiseProduct(centred[b]).rowwise().sum() +
                          (centred[a] * sigma).cwiseProduct(mapped[b]).rowwise().sum());
      }
    }
  }
  return out;
}

Eigen::VectorXd softmax_weights(const Eigen::VectorXd& theta) {
  Eigen::VectorXd e = (theta.array() - theta.maxCoeff()).exp().matrix();
  return static_cast<double>(theta.size()) * e / e.sum();
}

}  // namespace

double independence_objective(const Eigen::MatrixXd& features, std::span<const RFFBank> banks, const SampleWeights& w) {
  if (static_cast<Eigen::Index>(w.size()) != features.rows()) {
    throw ShapeError("independence objective: weight count does not match sample count");
  }
  if (features.rows() < 2) throw DegenerateError("independence objective needs n >= 2 samples");
  return objective_on_mapped(map_features(features, banks), w.values(), false).value;
}

ObjectiveGradient independence_objective_gradient(const Eigen::MatrixXd& features, std::span<const RFFBank> banks,
                                                  const Eigen::VectorXd& w) {
  if (w.size() != features.rows()) throw ShapeError("independence objective: weight count does not match sample count");
  if (features.rows() < 2) throw DegenerateError("independence objective needs n >= 2 samples");
  return objective_on_mapped(map_features(features, banks), w, true);
}

WeightLearning learn_weights(const Eigen::MatrixXd& features, std::span<const RFFBank> banks, const CimConfig& cfg) {
  cfg.validate();
  const Eigen::Index n = features.rows();
  if (n < 2) throw DegenerateError("learn_weights needs n >= 2 samples");
  const auto mapped = map_features(features, banks);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd best_theta = theta;
  double best = 0.0;
  double uniform = 0.0;
  std::size_t best_step = 0;
  for (std::size_t step = 0; step <= cfg.inner_steps; ++step) {
    Eigen::VectorXd w = softmax_weights(theta);
    ObjectiveGradient og = objective_on_mapped(mapped, w, step < cfg.inner_steps);
    if (!std::isfinite(og.value) || (step < cfg.inner_steps && !og.d_weights.allFinite())) {
      throw NumericalError("learn_weights: non-finite objective at iterate " + std::to_string(step));
    }
    if (step == 0) {
      uniform = og.value;
      best = og.value;
    } else if (og.value < best) {
      best = og.value;
      best_theta = theta;
      best_step = step;
    }
    if (step == cfg.inner_steps) break;
    // Chain rule through w = n softmax(theta): dJ/dtheta_j = w_j (g_j - <g, w>/n).
    const double mean_gw = og.d_weights.dot(w) / static_cast<double>(n);
    Eigen::VectorXd d_theta = w.cwiseProduct((og.d_weights.array() - mean_gw).matrix());
    theta -= cfg.inner_lr * d_theta;
  }
  return WeightLearning{SampleWeights(softmax_weights(best_theta)), uniform, best, best_step};
}

WeightLearning learn_weights(const Eigen::MatrixXd& features, const CimConfig& cfg) {
  const auto banks = make_banks(static_cast<std::size_t>(features.cols()), cfg);
  return learn_weights(features, banks, cfg);
}

Tensor cim_loss(const Tensor& ce_per_sample, const SampleWeights& w) {
  if (ce_per_sample.numel() != w.size()) {
    throw ShapeError("cim_loss: " + std::to_string(ce_per_sample.numel()) + " per-sample losses for " +
                     std::to_string(w.size()) + " weights");
  }
  std::vector<double> values(w.values().data(), w.values().data() + w.size());
  Tensor weights({w.size()}, std::move(values));
  return mean(mul(reshape(ce_per_sample, {w.size()}), weights));
}

}  // namespace ccseg
