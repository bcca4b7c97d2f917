#include "ccseg/losses.hpp"

#include <atomic>
#include <cmath>
#include <string>

namespace ccseg {

namespace {

std::atomic<double> g_focal_fault{1.0};

void check_probs(const Tensor& probs, const MaskMap& target, const char* op) {
  if (probs.rank() != 4 || probs.dim(1) != 2) {
    throw ShapeError(std::string(op) + ": expected N x 2 x H x W probabilities, got " + format_shape(probs.shape()));
  }
  if (probs.dim(0) != target.n || probs.dim(2) != target.h || probs.dim(3) != target.w) {
    throw ShapeError(std::string(op) + ": probabilities " + format_shape(probs.shape()) + " do not match mask " +
                     format_shape({target.n, target.h, target.w}));
  }
}

// Probability of the true class per pixel, N x 1 x H x W, clipped.
Tensor true_class_prob(const Tensor& probs, const MaskMap& target) {
  const Tensor y = reshape(target.to_tensor(), {target.n, 1, target.h, target.w});
  const Tensor p_bg = slice(probs, 1, 0, 1);
  const Tensor p_fg = slice(probs, 1, 1, 1);
  return clamp(p_fg * y + p_bg * (1.0 - y), kProbClip, 1.0 - kProbClip);
}

void check_masks(const MaskMap& pred, const MaskMap& gt, const char* op) {
  if (pred.n != gt.n || pred.h != gt.h || pred.w != gt.w) {
    throw ShapeError(std::string(op) + ": mask shapes " + format_shape({pred.n, pred.h, pred.w}) + " and " +
                     format_shape({gt.n, gt.h, gt.w}) + " differ");
  }
  for (const MaskMap* m : {&pred, &gt}) {
    for (std::uint8_t v : m->labels) {
      if (v > 1) throw DomainError(std::string(op) + ": mask value " + std::to_string(v) + " is not binary");
    }
  }
}

struct Counts {
  std::size_t inter_fg = 0, union_fg = 0, inter_bg = 0, union_bg = 0, pred_fg = 0, gt_fg = 0;
};

Counts count(const MaskMap& pred, const MaskMap& gt) {
  Counts c;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool p = pred.labels[i] != 0;
    const bool g = gt.labels[i] != 0;
    c.pred_fg += p;
    c.gt_fg += g;
    c.inter_fg += p && g;
    c.union_fg += p || g;
    c.inter_bg += !p && !g;
    c.union_bg += !p || !g;
  }
  return c;
}

double iou(std::size_t inter, std::size_t uni) {
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

double mean_of(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

}  // namespace

void LossConfig::validate() const {
  if (!(alpha_t > 0.0 && alpha_t < 1.0)) throw ConfigError("loss: alpha_t must lie in (0, 1)");
  if (!(gamma >= 0.0)) throw ConfigError("loss: gamma must be non-negative");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("loss: lambda must lie in [0, 1]");
  if (!(dice_smooth > 0.0)) throw ConfigError("loss: dice_smooth must be positive");
}

MaskMap::MaskMap(std::size_t n, std::size_t h, std::size_t w, std::vector<std::uint8_t> labels)
    : n(n), h(h), w(w), labels(std::move(labels)) {
  if (this->labels.size() != n * h * w) {
    throw ShapeError("mask: " + std::to_string(this->labels.size()) + " labels for shape " + format_shape({n, h, w}));
  }
}

Tensor MaskMap::to_tensor() const {
  std::vector<double> values(labels.begin(), labels.end());
  return Tensor({n, h, w}, std::move(values));
}

MaskMap MaskMap::image(std::size_t i) const {
  if (i >= n) throw ShapeError("mask: image index " + std::to_string(i) + " out of range for " + std::to_string(n));
  const std::size_t m = h * w;
  return MaskMap(1, h, w, std::vector<std::uint8_t>(labels.begin() + static_cast<std::ptrdiff_t>(i * m),
                                                    labels.begin() + static_cast<std::ptrdiff_t>((i + 1) * m)));
}

MaskMap predict_mask(const Tensor& probs) {
  if (probs.rank() != 4 || probs.dim(1) != 2) {
    throw ShapeError("predict_mask: expected N x 2 x H x W, got " + format_shape(probs.shape()));
  }
  const std::size_t n = probs.dim(0), m = probs.dim(2) * probs.dim(3);
  std::vector<std::uint8_t> labels(n * m);
  auto p = probs.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < m; ++t) labels[i * m + t] = p[(i * 2 + 1) * m + t] > 0.5 ? 1 : 0;
  }
  return MaskMap(n, probs.dim(2), probs.dim(3), std::move(labels));
}

Tensor ce_per_sample(const Tensor& probs, const MaskMap& target) {
  check_probs(probs, target, "ce_per_sample");
  return reduce(ReduceOp::mean, neg(log(true_class_prob(probs, target))), {1, 2, 3});
}

Tensor dice_loss(const Tensor& probs, const MaskMap& target, const LossConfig& cfg) {
  check_probs(probs, target, "dice_loss");
  const Tensor y = reshape(target.to_tensor(), {target.n, 1, target.h, target.w});
  const Tensor p_fg = slice(probs, 1, 1, 1);
  const Tensor inter = sum(p_fg * y);
  const Tensor denom = sum(p_fg) + sum(y) + cfg.dice_smooth;
  return 1.0 - (2.0 * inter + cfg.dice_smooth) / denom;
}

Tensor focal_loss(const Tensor& probs, const MaskMap& target, const LossConfig& cfg) {
  check_probs(probs, target, "focal_loss");
  const Tensor y = reshape(target.to_tensor(), {target.n, 1, target.h, target.w});
  const Tensor alpha = y * cfg.alpha_t + (1.0 - y) * (1.0 - cfg.alpha_t);
  const Tensor pt = true_class_prob(probs, target);
  const Tensor loss = mean(neg(alpha * pow(1.0 - pt, cfg.gamma) * log(pt)));
  const double fault = g_focal_fault.load();
  return fault == 1.0 ? loss : grad_scale(loss, fault);
}

void set_focal_gradient_fault(double factor) { g_focal_fault.store(factor); }

Tensor total_loss(const Tensor& l_cim, const Tensor& l_dice, const Tensor& l_fl, const LossConfig& cfg) {
  const std::pair<const char*, const Tensor*> terms[] = {{"L_cim", &l_cim}, {"L_dice", &l_dice}, {"L_fl", &l_fl}};
  for (const auto& [name, t] : terms) {
    if (t->numel() != 1) throw ShapeError(std::string("total_loss: ") + name + " is not a scalar");
    if (!std::isfinite(t->item())) throw NumericalError(std::string("total_loss: ") + name + " is not finite");
  }
  return l_cim + cfg.lambda * l_dice + (1.0 - cfg.lambda) * l_fl;
}

double total_loss(double l_cim, double l_dice, double l_fl, const LossConfig& cfg) {
  const std::pair<const char*, double> terms[] = {{"L_cim", l_cim}, {"L_dice", l_dice}, {"L_fl", l_fl}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) throw NumericalError(std::string("total_loss: ") + name + " is not finite");
  }
  return l_cim + cfg.lambda * l_dice + (1.0 - cfg.lambda) * l_fl;
}

double miou(const MaskMap& pred, const MaskMap& gt) {
  check_masks(pred, gt, "miou");
  const Counts c = count(pred, gt);
  return 100.0 * (iou(c.inter_fg, c.union_fg) + iou(c.inter_bg, c.union_bg)) / 2.0;
}

double dsc(const MaskMap& pred, const MaskMap& gt) {
  check_masks(pred, gt, "dsc");
  const Counts c = count(pred, gt);
  if (c.pred_fg + c.gt_fg == 0) return 100.0;
  return 100.0 * 2.0 * static_cast<double>(c.inter_fg) / static_cast<double>(c.pred_fg + c.gt_fg);
}

MetricSummary summarize_metrics(const MaskMap& pred, const MaskMap& gt) {
  check_masks(pred, gt, "summarize_metrics");
  MetricSummary s;
  for (std::size_t i = 0; i < gt.n; ++i) {
    const MaskMap p = pred.image(i), g = gt.image(i);
    s.miou_per_image.push_back(miou(p, g));
    s.dsc_per_image.push_back(dsc(p, g));
  }
  s.miou_mean = mean_of(s.miou_per_image);
  s.dsc_mean = mean_of(s.dsc_per_image);
  s.miou_std = sample_std(s.miou_per_image, s.miou_mean);
  s.dsc_std = sample_std(s.dsc_per_image, s.dsc_mean);
  return s;
}

}  // namespace ccseg
