#include <doctest.h>

#include <cmath>
#include <numbers>

#include "ccseg/error.hpp"
#include "ccseg/model.hpp"
#include "ccseg/train.hpp"
#include "helpers.hpp"

using namespace ccseg;

namespace {

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.channels_per_level = {8, 16, 24, 32, 48};
  return cfg;
}

// Parameter count assembled block by block from the layer definitions.
std::size_t expected_parameters(const ModelConfig& cfg) {
  const auto& ch = cfg.channels_per_level;
  auto conv = [](std::size_t in, std::size_t out, std::size_t k) { return out * in * k * k + out; };
  std::size_t total = 0;
  std::size_t in = cfg.input_channels;
  for (std::size_t c : ch) {
    const std::size_t hidden = 4 * in;
    total += conv(in, c, 3) + 2 * c;                                         // cnn_down
    total += hidden * in + 2 * hidden + hidden * 9 + 2 * hidden + c * hidden + 2 * c;  // mbconv
    total += cfg.dac_enabled ? 2 + conv(2 * c, c, 3) : conv(c, c, 1);        // fusion
    in = c;
  }
  const std::size_t d = ch[0], p = cfg.transformer.patch, pd = d * p * p;
  const std::size_t side = cfg.image_size / 2 / p;
  total += pd * d + d + side * side * d;
  total += cfg.transformer.layers * (2 * d + 4 * (d * d + d) + 2 * d + (d * 2 * d + 2 * d) + (2 * d * d + d));
  total += d * pd;
  for (std::size_t i = ch.size() - 1; i > 0; --i) total += conv(ch[i] + ch[i - 1], ch[i - 1], 3) + 2 * ch[i - 1];
  total += conv(ch[0] + cfg.input_channels, ch[0], 3) + 2 * ch[0];
  total += conv(ch[0], 2, 1);
  return total;
}

std::vector<Sample> tiny_dataset(std::size_t count, std::uint64_t seed = 5) {
  SyntheticConfig cfg;
  cfg.seed = seed;
  return gen_dataset(cfg, count);
}

}  // namespace

TEST_CASE("model construction") {
  const ModelConfig def;
  const Model a = build_model(def, 3);
  CHECK(a.parameter_count() == expected_parameters(def));
  CHECK(a.parameter_count() == 1237644);
  CHECK(build_model(small_model(), 3).parameter_count() == expected_parameters(small_model()));

  ModelConfig no_dac = def;
  no_dac.dac_enabled = false;
  CHECK(build_model(no_dac, 3).parameter_count() == expected_parameters(no_dac));

  const Model b = build_model(def, 3);
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  REQUIRE(pa.size() == pb.size());
  bool identical = true;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    identical = identical && pa[i].first == pb[i].first &&
                std::equal(pa[i].second.data().begin(), pa[i].second.data().end(), pb[i].second.data().begin());
  }
  CHECK(identical);
}

TEST_CASE("model config validation") {
  ModelConfig cfg;
  cfg.num_levels = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.channels_per_level = {16, 16, 32, 64, 128};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.image_size = 48;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("forward") {
  const Model model = build_model(small_model(), 1);
  Rng rng(2);
  const ForwardResult r = forward(model, Tensor::uniform({2, 3, 64, 64}, 0, 1, rng));
  CHECK(r.probs.shape() == Shape{2, 2, 64, 64});
  CHECK(r.f5.shape() == Shape{2, 48, 2, 2});
  const std::size_t hw = 64 * 64;
  double worst = 0.0;
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      worst = std::max(worst, std::abs(r.probs[(2 * n) * hw + p] + r.probs[(2 * n + 1) * hw + p] - 1.0));
    }
  }
  CHECK(worst <= 1e-9);
  CHECK_THROWS_AS(forward(model, Tensor::zeros({1, 3, 32, 32})), ShapeError);
}

TEST_CASE("gradient reaches every fusion weight") {
  const Model model = build_model(small_model(), 4);
  Rng rng(5);
  const Tensor x = Tensor::uniform({2, 3, 64, 64}, 0, 1, rng);
  const Tensor c = Tensor::uniform({2, 2, 64, 64}, -1, 1, rng);
  std::vector<Tensor> ks;
  for (const auto& level : model.levels) {
    ks.push_back(level.dac->k1);
    ks.push_back(level.dac->k2);
  }
  const auto grads = ccseg::testing::grads_of([&] { return sum(mul(forward(model, x).probs, c)); }, ks);
  for (const auto& g : grads) {
    REQUIRE(g.size() == 1);
    CHECK(g[0] != 0.0);
  }
  // One central difference on the deepest k2 confirms the value.
  Tensor k = ks.back();
  const double k0 = k[0], eps = 1e-5;
  k.mutable_data()[0] = k0 + eps;
  const double hi = sum(mul(forward(model, x).probs, c)).item();
  k.mutable_data()[0] = k0 - eps;
  const double lo = sum(mul(forward(model, x).probs, c)).item();
  k.mutable_data()[0] = k0;
  CHECK(grads.back()[0] == doctest::Approx((hi - lo) / (2 * eps)).epsilon(1e-4));
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3);
  CHECK(cosine_lr(100, 100, 1e-3, 1e-5) == 1e-5);
  CHECK(cosine_lr(50, 100, 1e-3, 1e-5) == (1e-3 + 1e-5) / 2);
  CHECK(cosine_lr(25, 100, 1.0, 0.0) == doctest::Approx(0.5 * (1 + std::cos(std::numbers::pi / 4))).epsilon(1e-15));
  for (std::size_t s = 1; s <= 100; ++s) CHECK(cosine_lr(s, 100, 1e-3, 0.0) <= cosine_lr(s - 1, 100, 1e-3, 0.0));
  CHECK_THROWS_AS(cosine_lr(101, 100, 1e-3, 0.0), DomainError);
  CHECK_THROWS_AS(cosine_lr(0, 0, 1e-3, 0.0), DomainError);
}

TEST_CASE("AdamW single step") {
  Tensor p({2}, {1.0, -2.0});
  p.set_requires_grad(true);
  AdamW opt({p}, 0.9, 0.999, 1e-8, 0.1);
  ccseg::testing::grads_of([&] { return sum(mul(p, p)); }, {p});  // grad = 2p = (2, -4)
  opt.step(0.01);
  // Decay first, then a bias-corrected first step of size lr * sign(g).
  const double a = 1.0 * (1 - 0.01 * 0.1) - 0.01 * 2.0 / (2.0 + 1e-8);
  const double b = -2.0 * (1 - 0.01 * 0.1) - 0.01 * -4.0 / (4.0 + 1e-8);
  CHECK(p[0] == doctest::Approx(a).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(b).epsilon(1e-14));
  opt.zero_grad();
  CHECK_FALSE(p.has_grad());

  Tensor untouched({1}, {3.0});
  untouched.set_requires_grad(true);
  AdamW idle({untouched}, 0.9, 0.999, 1e-8, 0.1);
  idle.step(0.01);
  CHECK(untouched[0] == 3.0);
}

TEST_CASE("early stopping") {
  EarlyStopping s(2);
  CHECK(s.update(10.0));
  CHECK_FALSE(s.update(10.0));
  CHECK_FALSE(s.should_stop());
  CHECK(s.update(11.0));
  CHECK_FALSE(s.update(9.0));
  CHECK_FALSE(s.update(10.5));
  CHECK(s.should_stop());
  CHECK(s.best() == 11.0);
  CHECK(s.best_epoch() == 3);
}

TEST_CASE("train step") {
  const auto data = tiny_dataset(4);
  const Batch batch = make_batch(data);
  CHECK(batch.images.shape() == Shape{4, 3, 64, 64});

  TrainConfig cfg;
  cfg.cim_enabled = false;
  Model m1 = build_model(small_model(), 9), m2 = build_model(small_model(), 9);
  AdamW o1 = make_optimizer(m1, cfg), o2 = make_optimizer(m2, cfg);
  const StepMetrics s1 = train_step(m1, batch, cfg, o1, 1e-3);
  const StepMetrics s2 = train_step(m2, batch, cfg, o2, 1e-3);
  CHECK(s1.total == s2.total);
  const auto p1 = m1.named_parameters(), p2 = m2.named_parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(std::equal(p1[i].second.data().begin(), p1[i].second.data().end(), p2[i].second.data().begin()));
  }

  // Without reweighting the weighted loss is the plain mean cross-entropy.
  Model m3 = build_model(small_model(), 9);
  const ForwardResult fr = forward(m3, batch.images);
  const Tensor ce = ce_per_sample(fr.probs, batch.masks);
  double mean_ce = 0.0;
  for (double v : ce.data()) mean_ce += v / 4.0;
  CHECK(s1.l_cim == doctest::Approx(mean_ce).epsilon(1e-12));
  CHECK(s1.total == doctest::Approx(total_loss(s1.l_cim, s1.l_dice, s1.l_fl, cfg.loss)).epsilon(1e-15));

  CHECK_THROWS_AS(train_step(m1, make_batch(data, std::vector<std::size_t>{0}), cfg, o1, 1e-3), DegenerateError);
}

TEST_CASE("train step with reweighting never raises the objective") {
  const auto data = tiny_dataset(4, 6);
  TrainConfig cfg;
  Model m = build_model(small_model(), 2);
  AdamW opt = make_optimizer(m, cfg);
  const StepMetrics s = train_step(m, make_batch(data), cfg, opt, 1e-3);
  CHECK(s.objective_after <= s.objective_before);
  CHECK(std::isfinite(s.total));
}

TEST_CASE("a frozen batch is fitted") {
  const auto data = tiny_dataset(4, 8);
  const Batch batch = make_batch(data);
  TrainConfig cfg;
  Model m = build_model(small_model(), 3);
  AdamW opt = make_optimizer(m, cfg);
  const double first = train_step(m, batch, cfg, opt, cosine_lr(0, 200, 1e-3, 0.0)).total;
  double last = first;
  for (std::size_t step = 1; step < 200; ++step) last = train_step(m, batch, cfg, opt, cosine_lr(step, 200, 1e-3, 0.0)).total;
  MESSAGE("loss " << first << " -> " << last << ", batch DSC " << evaluate(m, data).dsc_mean);
  CHECK(last < 0.75 * first);
  CHECK(evaluate(m, data).dsc_mean >= 85.0);
}

TEST_CASE("fit") {
  const auto data = tiny_dataset(8);
  const std::vector<Sample> train(data.begin(), data.begin() + 6), val(data.begin() + 6, data.end());
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;

  Model a = build_model(small_model(), 1), b = build_model(small_model(), 1);
  const TrainHistory ha = fit(a, train, val, cfg), hb = fit(b, train, val, cfg);
  CHECK(ha.epochs.size() <= cfg.epochs);
  REQUIRE(ha.epochs.size() == hb.epochs.size());
  for (std::size_t i = 0; i < ha.epochs.size(); ++i) {
    CHECK(ha.epochs[i].total == hb.epochs[i].total);
    CHECK(ha.epochs[i].val_dsc == hb.epochs[i].val_dsc);
  }
  // The returned parameters are the best-validation snapshot.
  CHECK(evaluate(a, val).dsc_mean == ha.best_val_dsc);

  cfg.lr_max = 0.0;
  cfg.epochs = 6;
  cfg.early_stop_patience = 1;
  Model c = build_model(small_model(), 1);
  const TrainHistory hc = fit(c, train, val, cfg);
  CHECK(hc.epochs.size() == 2);
  CHECK(hc.stopped_early);

  CHECK_THROWS_AS(fit(c, {}, val, cfg), DegenerateError);
  CHECK_THROWS_AS(fit(c, train, {}, cfg), DegenerateError);
}

TEST_CASE("snapshots") {
  Model m = build_model(small_model(), 1);
  const ParameterSnapshot snap = snapshot(m);
  for (auto& [name, t] : m.named_parameters()) {
    for (double& v : t.mutable_data()) v += 1.0;
  }
  restore(m, snap);
  const auto params = m.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(std::equal(snap[i].begin(), snap[i].end(), params[i].second.data().begin()));
  }
}
