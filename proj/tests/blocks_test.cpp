#include <doctest.h>

#include <cmath>

#include "ccseg/dac.hpp"
#include "ccseg/error.hpp"
#include "ccseg/nn.hpp"
#include "helpers.hpp"

using namespace ccseg;
using ccseg::testing::grads_of;
using ccseg::testing::leaf;

namespace {

void zero_all(BlockParams& p) {
  for (auto& [name, t] : p.tensors) {
    for (double& v : t.mutable_data()) v = 0.0;
  }
}

// Energy-based coefficient evaluated straight from its definition.
std::vector<double> simam_reference(const std::vector<double>& channel, double lambda) {
  const double m = static_cast<double>(channel.size());
  double mu = 0.0;
  for (double v : channel) mu += v;
  mu /= m;
  double var = 0.0;
  for (double v : channel) var += (v - mu) * (v - mu);
  var /= m - 1.0;
  std::vector<double> a;
  for (double v : channel) {
    const double e = (v - mu) * (v - mu) / (4.0 * (var + lambda)) + 0.5;
    a.push_back(1.0 / (1.0 + std::exp(-e)));
  }
  return a;
}

}  // namespace

TEST_CASE("norm groups") {
  CHECK(norm_groups(16) == 8);
  CHECK(norm_groups(8) == 8);
  CHECK(norm_groups(24) == 8);
  CHECK(norm_groups(12) == 6);
  CHECK(norm_groups(3) == 3);
  CHECK(norm_groups(1) == 1);
}

TEST_CASE("simam") {
  const Tensor constant = Tensor::full({1, 1, 3, 3}, 2.5);
  const Tensor out = simam(constant);
  for (double v : out.data()) CHECK(v == doctest::Approx(0.622459 * 2.5).epsilon(1e-6));

  const Tensor hot({1, 1, 2, 2}, {10, 0, 0, 0});
  const Tensor a = simam_coefficients(hot, SimamConfig{1e-4});
  const auto ref = simam_reference({10, 0, 0, 0}, 1e-4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(a[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  CHECK(a[0] > a[1]);
  CHECK(a[1] == a[2]);

  Rng rng(1);
  CHECK(simam(Tensor::uniform({2, 8, 16, 16}, -1, 1, rng)).shape() == Shape{2, 8, 16, 16});
  CHECK_THROWS_AS(simam(Tensor::ones({1, 2, 1, 1})), DegenerateError);
}

TEST_CASE("mbconv") {
  Rng rng(2);
  const BlockParams down = init_mbconv(8, 16, 2, rng);
  CHECK(mbconv(Tensor::uniform({1, 8, 32, 32}, -1, 1, rng), down, 2).shape() == Shape{1, 16, 16, 16});

  BlockParams same = init_mbconv(4, 4, 1, rng);
  zero_all(same);
  const Tensor x = Tensor::uniform({1, 4, 6, 6}, -1, 1, rng);
  const Tensor y = mbconv(x, same, 1);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);

  CHECK_THROWS_AS(mbconv(Tensor::ones({1, 3, 4, 4}), down, 2), ShapeError);
}

TEST_CASE("cnn_down") {
  Rng rng(3);
  const BlockParams p = init_cnn_down(3, 16, rng);
  CHECK(cnn_down(Tensor::uniform({1, 3, 64, 64}, 0, 1, rng), p).shape() == Shape{1, 16, 32, 32});
  for (double v : cnn_down(Tensor::zeros({1, 3, 8, 8}), p).data()) CHECK(std::isfinite(v));
  CHECK_THROWS_AS(cnn_down(Tensor::ones({1, 3, 1, 1}), p), ShapeError);
}

TEST_CASE("transformer block") {
  Rng rng(4);
  const TransformerConfig cfg{4, 2, 1};
  const BlockParams p = init_transformer(16, 32, 32, cfg, rng);
  std::vector<Tensor> attn;
  const Tensor x = Tensor::uniform({1, 16, 32, 32}, -1, 1, rng);
  CHECK(transformer_block(x, p, cfg, &attn).shape() == Shape{1, 16, 32, 32});
  REQUIRE(attn.size() == 1);
  const Tensor& w = attn[0];
  const std::size_t tokens = w.dim(2);
  for (std::size_t row = 0; row < w.numel() / tokens; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < tokens; ++j) s += w[row * tokens + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(transformer_block(Tensor::ones({1, 16, 30, 30}), p, cfg), ShapeError);
}

TEST_CASE("decoder block") {
  Rng rng(5);
  const BlockParams p = init_decoder(32, 16, 16, rng);
  CHECK(decoder_block(Tensor::uniform({1, 32, 8, 8}, -1, 1, rng), Tensor::uniform({1, 16, 16, 16}, -1, 1, rng), p)
            .shape() == Shape{1, 16, 16, 16});
  CHECK_THROWS_AS(decoder_block(Tensor::ones({1, 32, 8, 8}), Tensor::ones({1, 16, 12, 12}), p), ShapeError);
}

TEST_CASE("dac fusion") {
  Rng rng(6);
  const DacLayer layer = init_dac(1, 16, 24, 32, rng);
  CHECK(layer.k1.item() == 1.0);
  CHECK(layer.k2.item() == 1.0);
  const Tensor f1 = Tensor::uniform({1, 16, 32, 32}, -1, 1, rng), f2 = Tensor::uniform({1, 24, 32, 32}, -1, 1, rng);
  CHECK(dac_fuse(f1, f2, layer).shape() == Shape{1, 32, 32, 32});
  CHECK_THROWS_AS(dac_fuse(f1, Tensor::ones({1, 24, 16, 16}), layer), ShapeError);
}

TEST_CASE("concat stage") {
  Rng rng(7);
  const Tensor f1 = Tensor::uniform({1, 2, 3, 3}, -1, 1, rng), f2 = Tensor::uniform({1, 3, 3, 3}, -1, 1, rng);
  const Tensor one = Tensor::scalar(1.0), two = Tensor::scalar(2.0), zero = Tensor::scalar(0.0);

  const Tensor plain = concat_stage(f1, f2, one, one);
  const Tensor ref = concat({f1, f2}, 1);
  for (std::size_t i = 0; i < ref.numel(); ++i) CHECK(plain[i] == ref[i]);

  const Tensor half_off = concat_stage(f1, f2, one, zero);
  for (std::size_t i = f1.numel(); i < half_off.numel(); ++i) CHECK(half_off[i] == 0.0);

  const Tensor doubled = concat_stage(f1, f2, two, one);
  for (std::size_t i = 0; i < f1.numel(); ++i) CHECK(doubled[i] == 2.0 * plain[i]);
  for (std::size_t i = f1.numel(); i < plain.numel(); ++i) CHECK(doubled[i] == plain[i]);

  const Tensor sym = concat_stage(f1, f1, two, two);
  for (std::size_t i = 0; i < f1.numel(); ++i) CHECK(sym[i] == sym[i + f1.numel()]);

  // Linearity at the concat stage.
  const Tensor scaled = concat_stage(mul(f1, Tensor::scalar(3.0)), f2, one, one);
  const Tensor moved = concat_stage(f1, f2, Tensor::scalar(3.0), one);
  for (std::size_t i = 0; i < scaled.numel(); ++i) CHECK(scaled[i] == moved[i]);
}

TEST_CASE("dac branch weights are trainable") {
  Rng rng(8);
  DacLayer layer = init_dac(1, 2, 2, 2, rng);
  const Tensor f1 = Tensor::uniform({1, 2, 4, 4}, -1, 1, rng), f2 = Tensor::uniform({1, 2, 4, 4}, -1, 1, rng);
  const Tensor c = Tensor::uniform({1, 2, 4, 4}, -1, 1, rng);
  const double err = grad_check([&] { return sum(mul(dac_fuse(f1, f2, layer), c)); }, {layer.k1, layer.k2});
  CHECK(err <= 1e-4);
  const auto g = grads_of([&] { return sum(mul(dac_fuse(f1, f2, layer), c)); }, {layer.k1, layer.k2});
  CHECK(g[0][0] != 0.0);
  CHECK(g[1][0] != 0.0);
}
