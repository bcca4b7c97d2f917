#pragma once

#include <cstdint>
#include <vector>

#include "ccseg/tensor.hpp"

namespace ccseg {

struct LossConfig {
  double alpha_t = 0.8;
  double gamma = 2.0;
  double lambda = 0.5;
  double dice_smooth = 1e-6;
  void validate() const;
};

inline constexpr double kProbClip = 1e-7;

/// N x H x W binary labels (0 background, 1 nucleus).
struct MaskMap {
  std::size_t n = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> labels;

  MaskMap() = default;
  MaskMap(std::size_t n, std::size_t h, std::size_t w, std::vector<std::uint8_t> labels);

  std::size_t pixels_per_image() const { return h * w; }
  std::uint8_t at(std::size_t i, std::size_t y, std::size_t x) const { return labels[(i * h + y) * w + x]; }
  /// Labels as an N x H x W float tensor of 0/1 values.
  Tensor to_tensor() const;
  /// Single-image view (copy) of image i.
  MaskMap image(std::size_t i) const;
};

/// Per-image foreground decision p(nucleus) > 0.5 from an N x 2 x H x W map.
MaskMap predict_mask(const Tensor& probs);

/// Mean over pixels of -log p(true class), clipped to [1e-7, 1 - 1e-7]; length N.
Tensor ce_per_sample(const Tensor& probs, const MaskMap& target);
/// 1 - (2 sum p y + s) / (sum p + sum y + s) over the foreground channel, batch-aggregated.
Tensor dice_loss(const Tensor& probs, const MaskMap& target, const LossConfig& cfg);
/// Mean over pixels of -alpha (1 - p_t)^gamma log p_t, alpha = alpha_t on
/// nucleus pixels and 1 - alpha_t on background.
Tensor focal_loss(const Tensor& probs, const MaskMap& target, const LossConfig& cfg);
/// L_cim + lambda L_dice + (1 - lambda) L_fl.
Tensor total_loss(const Tensor& l_cim, const Tensor& l_dice, const Tensor& l_fl, const LossConfig& cfg);
double total_loss(double l_cim, double l_dice, double l_fl, const LossConfig& cfg);

/// Multiplies the focal-loss gradient by this factor (identity forward).
/// Exists so the verification suite can prove it detects a corrupted gradient.
void set_focal_gradient_fault(double factor);

/// Mean over {background, nucleus} of |P n G| / |P u G| in percent; a class
/// absent from both masks scores 1.
double miou(const MaskMap& pred, const MaskMap& gt);
/// 2 |P n G| / (|P| + |G|) on the nucleus class in percent; 100 if both empty.
double dsc(const MaskMap& pred, const MaskMap& gt);

struct MetricSummary {
  double miou_mean = 0.0;
  double miou_std = 0.0;
  double dsc_mean = 0.0;
  double dsc_std = 0.0;
  std::vector<double> miou_per_image;
  std::vector<double> dsc_per_image;
};

/// Per-image metrics, then mean and sample standard deviation.
MetricSummary summarize_metrics(const MaskMap& pred, const MaskMap& gt);

}  // namespace ccseg
