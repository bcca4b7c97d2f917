#include <doctest.h>

#include <cmath>
#include <limits>

#include "ccseg/error.hpp"
#include "ccseg/losses.hpp"
#include "helpers.hpp"

using namespace ccseg;

namespace {

// Two-class probability map from per-pixel foreground probabilities.
Tensor probs_from_fg(std::size_t n, std::size_t h, std::size_t w, const std::vector<double>& fg) {
  std::vector<double> v(2 * fg.size());
  const std::size_t hw = h * w;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < hw; ++p) {
      v[(2 * i) * hw + p] = 1.0 - fg[i * hw + p];
      v[(2 * i + 1) * hw + p] = fg[i * hw + p];
    }
  }
  return Tensor({n, 2, h, w}, v);
}

MaskMap mask4x4(std::initializer_list<int> fg_pixels) {
  std::vector<std::uint8_t> labels(16, 0);
  for (int p : fg_pixels) labels[static_cast<std::size_t>(p)] = 1;
  return MaskMap(1, 4, 4, labels);
}

}  // namespace

TEST_CASE("per-sample cross-entropy") {
  const MaskMap m(1, 1, 2, {0, 1});
  const double certain = ce_per_sample(probs_from_fg(1, 1, 2, {0.0, 1.0}), m)[0];
  CHECK(certain == doctest::Approx(-std::log(1.0 - 1e-7)).epsilon(1e-12));
  CHECK(ce_per_sample(probs_from_fg(1, 1, 2, {0.5, 0.5}), m)[0] == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(ce_per_sample(probs_from_fg(1, 1, 2, {0.5, 1.0}), m)[0] == doctest::Approx(0.346574).epsilon(1e-6));
  CHECK_THROWS_AS(ce_per_sample(probs_from_fg(1, 1, 2, {0.5, 0.5}), MaskMap(1, 2, 1, {0, 1})), ShapeError);
}

TEST_CASE("dice loss") {
  const LossConfig cfg;
  const MaskMap m(1, 2, 2, {1, 0, 0, 1});
  CHECK(dice_loss(probs_from_fg(1, 2, 2, {1, 0, 0, 1}), m, cfg).item() <= 1e-6);
  CHECK(dice_loss(probs_from_fg(1, 2, 2, {0, 1, 1, 0}), m, cfg).item() == doctest::Approx(1.0).epsilon(1e-6));

  std::vector<double> fg(400, 0.0);
  std::vector<std::uint8_t> labels(400, 0);
  for (std::size_t i = 0; i < 100; ++i) fg[i] = 1.0;
  for (std::size_t i = 50; i < 150; ++i) labels[i] = 1;
  CHECK(dice_loss(probs_from_fg(1, 20, 20, fg), MaskMap(1, 20, 20, labels), cfg).item() ==
        doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("focal loss") {
  const LossConfig cfg;
  const MaskMap one(1, 1, 1, {1});
  CHECK(focal_loss(probs_from_fg(1, 1, 1, {0.5}), one, cfg).item() == doctest::Approx(0.138629).epsilon(1e-6));
  CHECK(std::abs(focal_loss(probs_from_fg(1, 1, 1, {0.9}), one, cfg).item() - 0.000843) <= 1e-6);
  const MaskMap m(1, 1, 3, {1, 0, 1});
  CHECK(focal_loss(probs_from_fg(1, 1, 3, {1.0, 0.0, 1.0}), m, cfg).item() <= 1e-15);

  // Background pixels are weighted by 1 - alpha_t.
  const MaskMap bg(1, 1, 1, {0});
  CHECK(focal_loss(probs_from_fg(1, 1, 1, {0.5}), bg, cfg).item() ==
        doctest::Approx(-0.2 * 0.25 * std::log(0.5)).epsilon(1e-12));
}

TEST_CASE("focal loss reduces to half cross-entropy at gamma 0, alpha 0.5") {
  LossConfig cfg;
  cfg.gamma = 0.0;
  cfg.alpha_t = 0.5;
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> fg(2 * 9);
    std::vector<std::uint8_t> labels(2 * 9);
    for (auto& v : fg) v = rng.uniform(0.05, 0.95);
    for (auto& v : labels) v = rng.uniform() < 0.5;
    const Tensor probs = probs_from_fg(2, 3, 3, fg);
    const MaskMap m(2, 3, 3, labels);
    const Tensor ce = ce_per_sample(probs, m);
    const double mean_ce = (ce[0] + ce[1]) / 2.0;
    CHECK(std::abs(focal_loss(probs, m, cfg).item() - 0.5 * mean_ce) <= 1e-9);
  }
}

TEST_CASE("losses are non-negative and bounded") {
  const LossConfig cfg;
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> fg(16);
    std::vector<std::uint8_t> labels(16);
    for (auto& v : fg) v = rng.uniform();
    for (auto& v : labels) v = rng.uniform() < 0.3;
    const Tensor probs = probs_from_fg(1, 4, 4, fg);
    const MaskMap m(1, 4, 4, labels);
    CHECK(ce_per_sample(probs, m)[0] >= 0.0);
    const double d = dice_loss(probs, m, cfg).item();
    CHECK(d >= 0.0);
    CHECK(d < 1.0);
    CHECK(focal_loss(probs, m, cfg).item() >= 0.0);
  }
}

TEST_CASE("total loss") {
  LossConfig cfg;
  CHECK(total_loss(1.0, 0.4, 0.2, cfg) == doctest::Approx(1.3).epsilon(1e-15));
  cfg.lambda = 1.0;
  CHECK(total_loss(1.0, 0.4, 0.2, cfg) == 1.0 + 0.4);
  cfg.lambda = 0.0;
  CHECK(total_loss(1.0, 0.4, 0.2, cfg) == 1.0 + 0.2);

  cfg.lambda = 0.5;
  const double base = total_loss(0.3, 0.2, 0.1, cfg);
  CHECK(total_loss(1.3, 0.2, 0.1, cfg) - base == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(total_loss(0.3, 1.2, 0.1, cfg) - base == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(total_loss(0.3, 0.2, 1.1, cfg) - base == doctest::Approx(0.5).epsilon(1e-15));

  const double nan = std::numeric_limits<double>::quiet_NaN();
  try {
    total_loss(1.0, nan, 0.2, cfg);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("L_dice") != std::string::npos);
  }
  CHECK_THROWS_AS(total_loss(std::numeric_limits<double>::infinity(), 0.0, 0.0, cfg), NumericalError);
}

TEST_CASE("loss config validation") {
  LossConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lambda = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("miou and dsc") {
  const MaskMap gt = mask4x4({0, 1, 2, 3});
  const MaskMap pred = mask4x4({2, 3, 4, 5});
  CHECK(miou(gt, gt) == 100.0);
  CHECK(dsc(gt, gt) == 100.0);
  CHECK(miou(pred, gt) == doctest::Approx(100.0 * (2.0 / 6.0 + 10.0 / 14.0) / 2.0).epsilon(1e-12));
  CHECK(miou(pred, gt) == doctest::Approx(52.3810).epsilon(1e-6));
  CHECK(dsc(pred, gt) == 50.0);

  const MaskMap empty = mask4x4({});
  CHECK(miou(empty, empty) == 100.0);
  CHECK(dsc(empty, empty) == 100.0);
  CHECK(dsc(mask4x4({0, 1}), mask4x4({5, 6})) == 0.0);

  CHECK_THROWS_AS(miou(MaskMap(1, 1, 2, {0, 2}), MaskMap(1, 1, 2, {0, 1})), DomainError);
  CHECK_THROWS_AS(dsc(mask4x4({}), MaskMap(1, 2, 2, {0, 0, 0, 0})), ShapeError);
}

TEST_CASE("hard prediction of a mask fed as probabilities scores perfectly") {
  std::vector<double> fg(16);
  const MaskMap gt = mask4x4({1, 5, 6, 9, 10, 15});
  for (std::size_t i = 0; i < 16; ++i) fg[i] = gt.labels[i];
  const MaskMap pred = predict_mask(probs_from_fg(1, 4, 4, fg));
  CHECK(miou(pred, gt) == 100.0);
  CHECK(dsc(pred, gt) == 100.0);
}

TEST_CASE("metric summary") {
  const MaskMap gt(2, 2, 2, {1, 1, 0, 0, 1, 0, 0, 0});
  const MaskMap pred(2, 2, 2, {1, 1, 0, 0, 0, 1, 0, 0});
  const MetricSummary s = summarize_metrics(pred, gt);
  REQUIRE(s.dsc_per_image.size() == 2);
  CHECK(s.dsc_per_image[0] == 100.0);
  CHECK(s.dsc_per_image[1] == 0.0);
  CHECK(s.dsc_mean == 50.0);
  CHECK(s.dsc_std == doctest::Approx(std::sqrt(5000.0)).epsilon(1e-12));
}

TEST_CASE("loss gradients") {
  const LossConfig cfg;
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor logits = Tensor::uniform({2, 2, 3, 3}, -2, 2, rng).set_requires_grad(true);
    std::vector<std::uint8_t> labels(18);
    for (auto& v : labels) v = rng.uniform() < 0.4;
    const MaskMap m(2, 3, 3, labels);
    CHECK(grad_check([&] { return dice_loss(softmax(logits, 1), m, cfg); }, {logits}) <= 1e-4);
    CHECK(grad_check([&] { return focal_loss(softmax(logits, 1), m, cfg); }, {logits}) <= 1e-4);
    CHECK(grad_check([&] { return sum(ce_per_sample(softmax(logits, 1), m)); }, {logits}) <= 1e-4);
  }
}

TEST_CASE("a corrupted focal gradient is visible to grad_check") {
  const LossConfig cfg;
  Rng rng(4);
  const Tensor logits = Tensor::uniform({1, 2, 3, 3}, -2, 2, rng).set_requires_grad(true);
  const MaskMap m(1, 3, 3, {1, 0, 1, 0, 0, 1, 1, 0, 0});
  set_focal_gradient_fault(-1.0);
  const double corrupted = grad_check([&] { return focal_loss(softmax(logits, 1), m, cfg); }, {logits});
  set_focal_gradient_fault(1.0);
  CHECK(corrupted > 1e-2);
  CHECK(grad_check([&] { return focal_loss(softmax(logits, 1), m, cfg); }, {logits}) <= 1e-4);
}
