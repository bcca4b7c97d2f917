#include "ccseg/verify.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iterator>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "ccseg/checkpoint.hpp"
#include "ccseg/cim.hpp"
#include "ccseg/dac.hpp"
#include "ccseg/image_io.hpp"
#include "ccseg/losses.hpp"
#include "ccseg/pipeline.hpp"
#include "ccseg/random.hpp"
#include "ccseg/train.hpp"

namespace ccseg {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v, int precision = 3) {
  std::ostringstream ss;
  ss << std::setprecision(precision) << v;
  return ss.str();
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity
// ---------------------------------------------------------------------------

struct GradCase {
  std::string name;
  std::function<double(Rng&)> run;
};

Tensor rand_t(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor::uniform(shape, lo, hi, rng).set_requires_grad(true);
}

// Contracts the output of g with fixed random coefficients, then grad-checks.
double check(const std::vector<Tensor>& inputs, const std::function<Tensor()>& g, Rng& rng) {
  const Tensor probe = g();
  const Tensor c = Tensor::uniform(probe.shape(), -1.0, 1.0, rng);
  return grad_check([&] { return sum(mul(g(), c)); }, inputs);
}

std::vector<Tensor> with_params(std::vector<Tensor> inputs, const BlockParams& p) {
  for (const auto& [name, t] : p.tensors) inputs.push_back(t);
  return inputs;
}

MaskMap random_mask(std::size_t n, std::size_t h, std::size_t w, Rng& rng) {
  std::vector<std::uint8_t> labels(n * h * w);
  for (auto& v : labels) v = rng.uniform() < 0.4 ? 1 : 0;
  return MaskMap(n, h, w, std::move(labels));
}

std::vector<GradCase> grad_cases() {
  std::vector<GradCase> cases;
  auto add = [&](std::string name, std::function<double(Rng&)> run) { cases.push_back({std::move(name), std::move(run)}); };

  using E = ElementwiseOp;
  const std::pair<const char*, E> binary[] = {{"add", E::add}, {"sub", E::sub}, {"mul", E::mul}, {"div", E::div}};
  for (const auto& [name, op] : binary) {
    add(name, [op](Rng& r) {
      Tensor a = rand_t({3, 4}, r), b = rand_t({3, 4}, r, 0.5, 2.0);
      return check({a, b}, [&] { return elementwise(op, a, b); }, r);
    });
    add(std::string(name) + "(scalar)", [op](Rng& r) {
      Tensor a = rand_t({3, 4}, r), s = rand_t({1}, r, 0.5, 2.0);
      return check({a, s}, [&] { return elementwise(op, a, s); }, r);
    });
  }
  add("pow", [](Rng& r) {
    Tensor a = rand_t({3, 4}, r, 0.5, 2.0), b = rand_t({3, 4}, r, -1.5, 1.5);
    return check({a, b}, [&] { return pow(a, b); }, r);
  });
  add("exp", [](Rng& r) { Tensor a = rand_t({3, 4}, r); return check({a}, [&] { return exp(a); }, r); });
  add("log", [](Rng& r) { Tensor a = rand_t({3, 4}, r, 0.5, 2.0); return check({a}, [&] { return log(a); }, r); });
  add("sigmoid", [](Rng& r) { Tensor a = rand_t({3, 4}, r, -2.0, 2.0); return check({a}, [&] { return sigmoid(a); }, r); });
  add("relu", [](Rng& r) { Tensor a = rand_t({3, 4}, r); return check({a}, [&] { return relu(a); }, r); });
  add("clamp", [](Rng& r) { Tensor a = rand_t({3, 4}, r); return check({a}, [&] { return clamp(a, -0.5, 0.5); }, r); });
  add("matmul", [](Rng& r) {
    Tensor a = rand_t({3, 4}, r), b = rand_t({4, 2}, r);
    return check({a, b}, [&] { return matmul(a, b); }, r);
  });
  add("bmm", [](Rng& r) {
    Tensor a = rand_t({2, 3, 4}, r), b = rand_t({2, 4, 2}, r);
    return check({a, b}, [&] { return bmm(a, b); }, r);
  });
  add("conv2d(3x3,s1,p1)", [](Rng& r) {
    Tensor x = rand_t({2, 3, 5, 5}, r), k = rand_t({4, 3, 3, 3}, r);
    return check({x, k}, [&] { return conv2d(x, k, 1, 1); }, r);
  });
  add("conv2d(3x3,s2,p1)", [](Rng& r) {
    Tensor x = rand_t({1, 2, 6, 6}, r), k = rand_t({3, 2, 3, 3}, r);
    return check({x, k}, [&] { return conv2d(x, k, 2, 1); }, r);
  });
  add("conv2d(1x1)", [](Rng& r) {
    Tensor x = rand_t({2, 3, 4, 4}, r), k = rand_t({2, 3, 1, 1}, r);
    return check({x, k}, [&] { return conv2d(x, k, 1, 0); }, r);
  });
  add("depthwise_conv2d", [](Rng& r) {
    Tensor x = rand_t({1, 3, 5, 5}, r), k = rand_t({3, 1, 3, 3}, r);
    return check({x, k}, [&] { return depthwise_conv2d(x, k, 2, 1); }, r);
  });
  add("add_bias", [](Rng& r) {
    Tensor x = rand_t({2, 3, 2, 2}, r), b = rand_t({3}, r);
    return check({x, b}, [&] { return add_bias(x, b, 1); }, r);
  });
  add("reduce(sum)", [](Rng& r) {
    Tensor x = rand_t({2, 3, 4}, r);
    return check({x}, [&] { return reduce(ReduceOp::sum, x, {1}); }, r);
  });
  add("reduce(mean)", [](Rng& r) {
    Tensor x = rand_t({2, 3, 4}, r);
    return check({x}, [&] { return reduce(ReduceOp::mean, x, {0, 2}); }, r);
  });
  add("reduce(var)", [](Rng& r) {
    Tensor x = rand_t({2, 3, 4}, r);
    return check({x}, [&] { return reduce(ReduceOp::var, x, {2}); }, r);
  });
  add("concat", [](Rng& r) {
    Tensor a = rand_t({1, 2, 3, 3}, r), b = rand_t({1, 3, 3, 3}, r);
    return check({a, b}, [&] { return concat({a, b}, 1); }, r);
  });
  add("slice", [](Rng& r) { Tensor x = rand_t({2, 5, 3}, r); return check({x}, [&] { return slice(x, 1, 1, 3); }, r); });
  add("reshape", [](Rng& r) { Tensor x = rand_t({2, 6}, r); return check({x}, [&] { return reshape(x, {3, 4}); }, r); });
  add("permute", [](Rng& r) {
    Tensor x = rand_t({2, 3, 4}, r);
    return check({x}, [&] { return permute(x, {2, 0, 1}); }, r);
  });
  add("upsample_nearest2x", [](Rng& r) {
    Tensor x = rand_t({1, 2, 3, 3}, r);
    return check({x}, [&] { return upsample_nearest2x(x); }, r);
  });
  add("pad2d", [](Rng& r) { Tensor x = rand_t({1, 2, 3, 3}, r); return check({x}, [&] { return pad2d(x, 2); }, r); });
  add("crop2d", [](Rng& r) {
    Tensor x = rand_t({1, 2, 5, 5}, r);
    return check({x}, [&] { return crop2d(x, 1, 2, 3, 2); }, r);
  });
  add("softmax", [](Rng& r) { Tensor x = rand_t({2, 3, 4}, r, -2.0, 2.0); return check({x}, [&] { return softmax(x, 1); }, r); });
  add("group_norm", [](Rng& r) {
    Tensor x = rand_t({2, 4, 3, 3}, r), g = rand_t({4}, r, 0.5, 1.5), b = rand_t({4}, r);
    return check({x, g, b}, [&] { return group_norm(x, 2, g, b); }, r);
  });
  add("layer_norm", [](Rng& r) {
    Tensor x = rand_t({3, 5}, r), g = rand_t({5}, r, 0.5, 1.5), b = rand_t({5}, r);
    return check({x, g, b}, [&] { return layer_norm(x, g, b); }, r);
  });

  add("simam", [](Rng& r) { Tensor x = rand_t({1, 2, 4, 4}, r); return check({x}, [&] { return simam(x); }, r); });
  add("mbconv(stride 1, residual)", [](Rng& r) {
    Tensor x = rand_t({1, 2, 4, 4}, r);
    BlockParams p = init_mbconv(2, 2, 1, r);
    return check(with_params({x}, p), [&] { return mbconv(x, p, 1); }, r);
  });
  add("mbconv(stride 2)", [](Rng& r) {
    Tensor x = rand_t({1, 2, 4, 4}, r);
    BlockParams p = init_mbconv(2, 3, 2, r);
    return check(with_params({x}, p), [&] { return mbconv(x, p, 2); }, r);
  });
  add("cnn_down", [](Rng& r) {
    Tensor x = rand_t({1, 2, 4, 4}, r);
    BlockParams p = init_cnn_down(2, 3, r);
    return check(with_params({x}, p), [&] { return cnn_down(x, p); }, r);
  });
  add("transformer_block", [](Rng& r) {
    Tensor x = rand_t({1, 4, 4, 4}, r);
    TransformerConfig tc{2, 2, 1};
    BlockParams p = init_transformer(4, 4, 4, tc, r);
    return check(with_params({x}, p), [&] { return transformer_block(x, p, tc); }, r);
  });
  add("decoder_block", [](Rng& r) {
    Tensor x = rand_t({1, 3, 2, 2}, r), skip = rand_t({1, 2, 4, 4}, r);
    BlockParams p = init_decoder(3, 2, 2, r);
    return check(with_params({x, skip}, p), [&] { return decoder_block(x, skip, p); }, r);
  });
  add("dac_fuse", [](Rng& r) {
    Tensor f1 = rand_t({1, 2, 4, 4}, r), f2 = rand_t({1, 2, 4, 4}, r);
    DacLayer layer = init_dac(1, 2, 2, 2, r);
    layer.k1.mutable_data()[0] = r.uniform(0.5, 1.5);
    layer.k2.mutable_data()[0] = r.uniform(0.5, 1.5);
    return check(with_params({f1, f2, layer.k1, layer.k2}, layer.fuse), [&] { return dac_fuse(f1, f2, layer); }, r);
  });

  const LossConfig loss_cfg;
  add("ce_per_sample", [](Rng& r) {
    Tensor logits = rand_t({2, 2, 3, 3}, r, -2.0, 2.0);
    const MaskMap m = random_mask(2, 3, 3, r);
    return check({logits}, [&] { return ce_per_sample(softmax(logits, 1), m); }, r);
  });
  add("dice_loss", [loss_cfg](Rng& r) {
    Tensor logits = rand_t({2, 2, 3, 3}, r, -2.0, 2.0);
    const MaskMap m = random_mask(2, 3, 3, r);
    return check({logits}, [&] { return dice_loss(softmax(logits, 1), m, loss_cfg); }, r);
  });
  add("focal_loss", [loss_cfg](Rng& r) {
    Tensor logits = rand_t({2, 2, 3, 3}, r, -2.0, 2.0);
    const MaskMap m = random_mask(2, 3, 3, r);
    return check({logits}, [&] { return focal_loss(softmax(logits, 1), m, loss_cfg); }, r);
  });
  add("focal_loss(probabilities)", [loss_cfg](Rng& r) {
    Tensor probs = rand_t({1, 2, 3, 3}, r, 0.1, 0.9);
    const MaskMap m = random_mask(1, 3, 3, r);
    return check({probs}, [&] { return focal_loss(probs, m, loss_cfg); }, r);
  });
  add("cim_loss", [](Rng& r) {
    Tensor ce = rand_t({4}, r, 0.1, 2.0);
    Eigen::VectorXd w(4);
    for (int i = 0; i < 4; ++i) w(i) = r.uniform(0.2, 1.0);
    w *= 4.0 / w.sum();
    const SampleWeights sw(w);
    return check({ce}, [&] { return cim_loss(ce, sw); }, r);
  });
  add("weighted_cross_cov objective (d/dw)", [](Rng& r) {
    const Eigen::Index n = 6;
    Eigen::MatrixXd features(n, 3);
    for (Eigen::Index i = 0; i < features.size(); ++i) features.data()[i] = r.normal();
    CimConfig cfg;
    cfg.seed = r.next();
    const auto banks = make_banks(3, cfg);
    Eigen::VectorXd w(n);
    for (Eigen::Index i = 0; i < n; ++i) w(i) = r.uniform(0.5, 1.5);
    const Eigen::VectorXd analytic = independence_objective_gradient(features, banks, w).d_weights;
    const double eps = 1e-5;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::VectorXd hi = w, lo = w;
      hi(i) += eps;
      lo(i) -= eps;
      const double central = (independence_objective_gradient(features, banks, hi).value -
                              independence_objective_gradient(features, banks, lo).value) / (2.0 * eps);
      const double a = analytic(i);
      worst = std::max(worst, std::abs(a - central) / std::max({1.0, std::abs(a), std::abs(central)}));
    }
    return worst;
  });
  return cases;
}

CheckOutcome gradient_fidelity() {
  constexpr int kSeeds = 5;
  constexpr double kTol = 1e-4;
  double worst = 0.0;
  std::string worst_name;
  std::vector<std::string> failing;
  const auto cases = grad_cases();
  for (const auto& c : cases) {
    double case_worst = 0.0;
    for (int seed = 0; seed < kSeeds; ++seed) {
      Rng rng(mix64(0x6C0Au, static_cast<std::uint64_t>(seed)));
      case_worst = std::max(case_worst, c.run(rng));
    }
    if (!(case_worst <= kTol)) failing.push_back(c.name + " (" + fmt(case_worst) + ")");
    if (case_worst > worst || worst_name.empty()) {
      worst = case_worst;
      worst_name = c.name;
    }
  }
  std::string measured = std::to_string(cases.size()) + " ops/blocks x " + std::to_string(kSeeds) +
                         " seeds, max rel err " + fmt(worst) + " (" + worst_name + "), tol 1e-4";
  if (!failing.empty()) {
    measured += "; failing:";
    for (const auto& f : failing) measured += " " + f;
  }
  return {failing.empty(), measured};
}

// ---------------------------------------------------------------------------
// 2-4. Independence module
// ---------------------------------------------------------------------------

CheckOutcome unit_weight_reduction() {
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng(mix64(0x2EDu, trial));
    const auto n = static_cast<Eigen::Index>(2 + rng.index(19));
    const auto du = static_cast<Eigen::Index>(1 + rng.index(6));
    const auto dv = static_cast<Eigen::Index>(1 + rng.index(6));
    Eigen::MatrixXd U(n, du), V(n, dv);
    for (Eigen::Index i = 0; i < U.size(); ++i) U.data()[i] = rng.normal(0.0, 2.0);
    for (Eigen::Index i = 0; i < V.size(); ++i) V.data()[i] = rng.normal(0.0, 2.0);
    const Eigen::MatrixXd diff =
        weighted_partial_cross_cov(U, V, SampleWeights::uniform(static_cast<std::size_t>(n))) - partial_cross_cov(U, V);
    worst = std::max(worst, diff.cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-12, "100 instances, max |weighted(w=1) - unweighted| = " + fmt(worst) + ", tol 1e-12"};
}

// Objective on the simplex point p (sum 1), i.e. w = n p.
double objective_at(const Eigen::MatrixXd& f, std::span<const RFFBank> banks, Eigen::VectorXd p) {
  return independence_objective_gradient(f, banks, p * static_cast<double>(p.size())).value;
}

// Exhaustive search over {p : p_i = k_i * step, sum p = 1} for n = 4.
Eigen::Vector4d simplex_grid_argmin(const Eigen::MatrixXd& f, std::span<const RFFBank> banks, double step,
                                    double* best_value) {
  const int k = static_cast<int>(std::lround(1.0 / step));
  Eigen::Vector4d best_p = Eigen::Vector4d::Constant(0.25);
  *best_value = objective_at(f, banks, best_p);
  for (int a = 0; a <= k; ++a) {
    for (int b = 0; a + b <= k; ++b) {
      for (int c = 0; a + b + c <= k; ++c) {
        const Eigen::Vector4d p = Eigen::Vector4d(a, b, c, k - a - b - c) / k;
        const double v = objective_at(f, banks, p);
        if (v < *best_value) {
          *best_value = v;
          best_p = p;
        }
      }
    }
  }
  return best_p;
}

// Same search on a grid of spacing `step` restricted to a box of half-width
// `radius` around `centre` (points off the simplex are skipped).
Eigen::Vector4d local_grid_argmin(const Eigen::MatrixXd& f, std::span<const RFFBank> banks, const Eigen::Vector4d& centre,
                                  double radius, double step, double* best_value) {
  Eigen::Vector4d best_p = centre;
  *best_value = objective_at(f, banks, centre);
  const int span = static_cast<int>(std::lround(radius / step));
  for (int a = -span; a <= span; ++a) {
    for (int b = -span; b <= span; ++b) {
      for (int c = -span; c <= span; ++c) {
        Eigen::Vector4d p = centre + step * Eigen::Vector4d(a, b, c, 0);
        p(3) = 1.0 - p(0) - p(1) - p(2);
        if ((p.array() < 0.0).any()) continue;
        const double v = objective_at(f, banks, p);
        if (v < *best_value) {
          *best_value = v;
          best_p = p;
        }
      }
    }
  }
  return best_p;
}

CheckOutcome weight_learner() {
  // Three samples of small, unstructured values; the fourth carries a large
  // joint excursion in both features.
  Eigen::MatrixXd features(4, 2);
  features << 0.1, -0.1, -0.2, 0.2, 0.15, 0.05, 2.0, 2.0;
  const CimConfig cfg;
  const auto banks = make_banks(2, cfg);
  const WeightLearning learned = learn_weights(features, banks, cfg);

  double coarse = 0.0;
  Eigen::Vector4d p = simplex_grid_argmin(features, banks, 0.05, &coarse);
  double refined = coarse;
  for (double step = 0.01; step >= 1e-5; step /= 5.0) p = local_grid_argmin(features, banks, p, 5.0 * step, step, &refined);
  const double gap = std::abs(learned.objective_best - refined);
  bool ok = gap <= 1e-3;

  // Simplex and monotonicity over seeded random instances.
  std::size_t simplex_violations = 0, monotone_violations = 0;
  double worst_sum_err = 0.0;
  for (std::uint64_t trial = 0; trial < 1000; ++trial) {
    Rng rng(mix64(0x3EAu, trial));
    const auto n = static_cast<Eigen::Index>(2 + rng.index(15));
    const auto m = static_cast<Eigen::Index>(2 + rng.index(4));
    Eigen::MatrixXd f(n, m);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng.normal();
    CimConfig c;
    c.seed = rng.next();
    const WeightLearning r = learn_weights(f, c);
    const Eigen::VectorXd& w = r.weights.values();
    const double sum_err = std::abs(w.sum() - static_cast<double>(n));
    worst_sum_err = std::max(worst_sum_err, sum_err);
    if (sum_err > 1e-9 || (w.array() < 0.0).any()) ++simplex_violations;
    const double uniform = independence_objective(f, make_banks(static_cast<std::size_t>(m), c),
                                                  SampleWeights::uniform(static_cast<std::size_t>(n)));
    const double returned = independence_objective(f, make_banks(static_cast<std::size_t>(m), c), r.weights);
    if (returned > uniform) ++monotone_violations;
  }
  ok = ok && simplex_violations == 0 && monotone_violations == 0;
  return {ok, "fixture: learner " + fmt(learned.objective_best, 7) + " vs grid minimum " + fmt(refined, 7) +
                  " (0.05 grid alone " + fmt(coarse, 7) + "), gap " + fmt(gap) + " tol 1e-3; 1000 trials: " +
                  std::to_string(simplex_violations) + " simplex violations (max |sum w - n| " + fmt(worst_sum_err) +
                  "), " + std::to_string(monotone_violations) + " objective increases"};
}

CheckOutcome independence_signal() {
  // Frozen from the oracle run over these 20 seeds: independent pairs peak at
  // 0.0846, identical pairs bottom out at 0.2075.
  constexpr double kThreshold = 0.13;
  int separated = 0;
  double max_indep = 0.0, min_ident = 1e300;
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(mix64(2024, s));
    Eigen::MatrixXd same(200, 2), indep(200, 2);
    for (int i = 0; i < 200; ++i) {
      const double a = rng.normal();
      same(i, 0) = same(i, 1) = indep(i, 0) = a;
    }
    for (int i = 0; i < 200; ++i) indep(i, 1) = rng.normal();
    CimConfig cfg;
    cfg.seed = s;
    const auto banks = make_banks(2, cfg);
    const double js = independence_objective(same, banks, SampleWeights::uniform(200));
    const double ji = independence_objective(indep, banks, SampleWeights::uniform(200));
    separated += ji < kThreshold && js > kThreshold;
    max_indep = std::max(max_indep, ji);
    min_ident = std::min(min_ident, js);
  }
  return {separated >= 19, std::to_string(separated) + "/20 seeds separated at threshold " + fmt(kThreshold) +
                               " (independent max " + fmt(max_indep) + ", identical min " + fmt(min_ident) + ")"};
}

// ---------------------------------------------------------------------------
// 5-6. Metrics and losses
// ---------------------------------------------------------------------------

CheckOutcome metric_exactness() {
  std::size_t mismatches = 0;
  for (unsigned a = 0; a < 512; ++a) {
    std::vector<std::uint8_t> pa(9);
    std::set<int> P, Pbg;
    for (int i = 0; i < 9; ++i) {
      pa[static_cast<std::size_t>(i)] = (a >> i) & 1u;
      (pa[static_cast<std::size_t>(i)] ? P : Pbg).insert(i);
    }
    const MaskMap pred(1, 3, 3, pa);
    for (unsigned b = 0; b < 512; ++b) {
      std::vector<std::uint8_t> gb(9);
      std::set<int> G, Gbg;
      for (int i = 0; i < 9; ++i) {
        gb[static_cast<std::size_t>(i)] = (b >> i) & 1u;
        (gb[static_cast<std::size_t>(i)] ? G : Gbg).insert(i);
      }
      auto iou = [](const std::set<int>& x, const std::set<int>& y) {
        std::vector<int> inter, uni;
        std::set_intersection(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(inter));
        std::set_union(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(uni));
        return uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
      };
      std::vector<int> inter;
      std::set_intersection(P.begin(), P.end(), G.begin(), G.end(), std::back_inserter(inter));
      const double want_miou = 100.0 * (iou(P, G) + iou(Pbg, Gbg)) / 2.0;
      const double want_dsc = P.size() + G.size() == 0
                                  ? 100.0
                                  : 100.0 * 2.0 * static_cast<double>(inter.size()) /
                                        static_cast<double>(P.size() + G.size());
      const MaskMap gt(1, 3, 3, gb);
      if (miou(pred, gt) != want_miou || dsc(pred, gt) != want_dsc) ++mismatches;
    }
  }
  return {mismatches == 0, "262144 mask pairs, " + std::to_string(mismatches) + " mismatches against set counting"};
}

CheckOutcome loss_point_values() {
  const LossConfig cfg;
  const MaskMap one_fg(1, 1, 1, {1});
  const double f05 = focal_loss(Tensor({1, 2, 1, 1}, {0.5, 0.5}), one_fg, cfg).item();
  const double f09 = focal_loss(Tensor({1, 2, 1, 1}, {0.1, 0.9}), one_fg, cfg).item();

  // 400 pixels: prediction covers 0..99, target 50..149.
  std::vector<double> probs(800, 0.0);
  std::vector<std::uint8_t> labels(400, 0);
  for (std::size_t i = 0; i < 400; ++i) {
    const bool p = i < 100;
    probs[i] = p ? 0.0 : 1.0;
    probs[400 + i] = p ? 1.0 : 0.0;
    labels[i] = i >= 50 && i < 150;
  }
  const double dice = dice_loss(Tensor({1, 2, 20, 20}, probs), MaskMap(1, 20, 20, labels), cfg).item();

  const double total = total_loss(1.0, 0.4, 0.2, cfg);
  LossConfig l1 = cfg, l0 = cfg;
  l1.lambda = 1.0;
  l0.lambda = 0.0;
  const bool total_ok = std::abs(total - 1.3) <= 1e-12 && total == 1.0 + 0.5 * 0.4 + 0.5 * 0.2 &&
                        total_loss(1.0, 0.4, 0.2, l1) == 1.0 + 0.4 && total_loss(1.0, 0.4, 0.2, l0) == 1.0 + 0.2 &&
                        cfg.lambda == 0.5 && cfg.alpha_t == 0.8;
  const bool ok = std::abs(f05 - 0.138629) <= 1e-6 && std::abs(f09 - 0.000843) <= 1e-6 &&
                  std::abs(dice - 0.5) <= 1e-6 && total_ok;
  return {ok, "focal(0.5) " + fmt(f05, 8) + ", focal(0.9) " + fmt(f09, 8) + ", dice(100/100/50) " + fmt(dice, 8) +
                  ", total(1, 0.4, 0.2) " + fmt(total, 17) + (total_ok ? " (lambda exact)" : " (lambda NOT exact)")};
}

// ---------------------------------------------------------------------------
// 7-10. Training behaviour
// ---------------------------------------------------------------------------

CheckOutcome overfit_smoke() {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticConfig data_cfg;
  data_cfg.seed = 7;
  const auto data = gen_dataset(data_cfg, 16);
  Model model = build_model(ModelConfig{}, 1);
  TrainConfig cfg;
  cfg.augment = false;
  AdamW opt = make_optimizer(model, cfg);
  constexpr std::size_t kSteps = 300;
  double dsc_value = 0.0;
  std::size_t reached = 0;
  for (std::size_t step = 0; step < kSteps && reached == 0; ++step) {
    std::vector<std::size_t> idx(8);
    std::iota(idx.begin(), idx.end(), (step % 2) * 8);
    train_step(model, make_batch(data, idx), cfg, opt, cosine_lr(step, kSteps, cfg.lr_max, cfg.lr_min));
    if ((step + 1) % 25 == 0) {
      dsc_value = evaluate(model, data).dsc_mean;
      if (dsc_value >= 85.0) reached = step + 1;
    }
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool ok = reached > 0 && seconds < 600.0;
  return {ok, "training DSC " + fmt(dsc_value, 4) + (reached ? " at step " + std::to_string(reached) : " after 300 steps") +
                  " (need >= 85 within 300), " + fmt(seconds, 3) + " s"};
}

RunConfig ablation_config(std::uint64_t seed) {
  RunConfig cfg;
  cfg.name = "ablation";
  cfg.seed = seed;
  cfg.train.epochs = 12;
  cfg.data.spurious = SpuriousSpec{"tint-density", 0.8};
  cfg.derive_seeds();
  cfg.validate();
  return cfg;
}

CheckOutcome directional_ablation() {
  constexpr std::size_t kSeeds = 5;
  constexpr std::size_t kSamples = 96;
  double backbone_sum = 0.0, full_sum = 0.0;
  int cim_wins = 0;
  double reduction_sum = 0.0;
  std::size_t reduction_count = 0;
  std::ostringstream detail;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const RunConfig base = ablation_config(seed);
    const auto samples = gen_dataset(base.data, kSamples);
    auto run = [&](bool dac, bool cim) {
      RunConfig cfg = base;
      cfg.model.dac_enabled = dac;
      cfg.train.cim_enabled = cim;
      Model model = build_model(cfg.model, cfg.model_seed());
      const TrainRunResult r = train_and_test(cfg, samples, model);
      if (cim) {
        for (const auto& e : r.history.epochs) {
          if (e.objective_before > 0.0) {
            reduction_sum += (e.objective_before - e.objective_after) / e.objective_before;
            ++reduction_count;
          }
        }
      }
      return r.test.dsc_mean;
    };
    const double backbone = run(false, false);
    const double cim_only = run(false, true);
    const double dac_only = run(true, false);
    const double full = run(true, true);
    backbone_sum += backbone;
    full_sum += full;
    cim_wins += full >= dac_only;
    detail << " [seed " << seed << ": backbone " << fmt(backbone, 4) << ", +cim " << fmt(cim_only, 4) << ", +dac "
           << fmt(dac_only, 4) << ", full " << fmt(full, 4) << "]";
  }
  const double backbone_mean = backbone_sum / kSeeds, full_mean = full_sum / kSeeds;
  const bool ok = cim_wins >= 3 && full_mean >= backbone_mean;
  return {ok, "full >= +dac (CIM on vs off) in " + std::to_string(cim_wins) + "/5 seeds (need 3); mean test DSC full " +
                  fmt(full_mean, 4) + " vs backbone " + fmt(backbone_mean, 4) + "; weight learner lowers its objective by " +
                  fmt(100.0 * reduction_sum / static_cast<double>(std::max<std::size_t>(reduction_count, 1)), 3) +
                  "% on average;" + detail.str()};
}

CheckOutcome determinism() {
  const fs::path root = fs::temp_directory_path() / ("ccseg_determinism_" + std::to_string(::getpid()));
  fs::remove_all(root);
  RunConfig cfg;
  cfg.seed = 11;
  cfg.model.channels_per_level = {8, 16, 24, 32, 48};
  cfg.train.epochs = 2;
  cfg.derive_seeds();
  run_generate(cfg, root / "data", 24);
  run_training(cfg, root / "data", root / "a");
  run_training(cfg, root / "data", root / "b");
  std::vector<std::string> differing;
  for (const char* name : {kMetricsName, kCheckpointName, kHistoryName}) {
    if (read_file(root / "a" / name) != read_file(root / "b" / name)) differing.push_back(name);
  }
  fs::remove_all(root);
  std::string measured = "two identical training runs: ";
  if (differing.empty()) return {true, measured + "metrics.json, model.ckpt and history.jsonl byte-identical"};
  for (const auto& d : differing) measured += d + " ";
  return {false, measured + "differ"};
}

CheckOutcome schedule_identities() {
  bool cosine_ok = true;
  for (std::size_t total : {2u, 10u, 100u, 3000u}) {
    for (auto [hi, lo] : {std::pair{1e-3, 0.0}, std::pair{0.1, 1e-4}, std::pair{2.5, 0.5}}) {
      cosine_ok = cosine_ok && cosine_lr(0, total, hi, lo) == hi && cosine_lr(total, total, hi, lo) == lo &&
                  cosine_lr(total / 2, total, hi, lo) == (hi + lo) / 2.0;
      for (std::size_t s = 1; s <= total; ++s) {
        cosine_ok = cosine_ok && cosine_lr(s, total, hi, lo) <= cosine_lr(s - 1, total, hi, lo);
      }
    }
  }

  // Scripted metric stream: improvement at epoch 1 only.
  EarlyStopping stopper(1);
  std::size_t stopped_at = 0;
  for (std::size_t epoch = 1; epoch <= 10 && stopped_at == 0; ++epoch) {
    stopper.update(epoch == 1 ? 50.0 : 40.0);
    if (stopper.should_stop()) stopped_at = epoch;
  }

  // A real run whose parameters cannot move (lr 0) never improves after epoch 1.
  SyntheticConfig data_cfg;
  data_cfg.seed = 3;
  const auto data = gen_dataset(data_cfg, 6);
  ModelConfig mc;
  mc.channels_per_level = {8, 16, 24, 32, 48};
  Model model = build_model(mc, 5);
  TrainConfig tc;
  tc.lr_max = 0.0;
  tc.epochs = 10;
  tc.early_stop_patience = 1;
  tc.batch_size = 4;
  const std::vector<Sample> train_set(data.begin(), data.begin() + 4), val_set(data.begin() + 4, data.end());
  const TrainHistory h = fit(model, train_set, val_set, tc);

  const bool ok = cosine_ok && stopped_at == 2 && h.epochs.size() == 2 && h.best_epoch == 1;
  return {ok, std::string("cosine boundary/midpoint/monotone ") + (cosine_ok ? "exact" : "VIOLATED") +
                  "; scripted patience-1 stream stops at epoch " + std::to_string(stopped_at) +
                  "; frozen run stops after " + std::to_string(h.epochs.size()) + " epochs (best epoch " +
                  std::to_string(h.best_epoch) + ")"};
}

}  // namespace

std::vector<AcceptanceCheck> acceptance_checks() {
  return {
      {1, "gradient-fidelity", false, gradient_fidelity},
      {2, "unit-weight-reduction", false, unit_weight_reduction},
      {3, "weight-learner", false, weight_learner},
      {4, "independence-signal", false, independence_signal},
      {5, "metric-exactness", false, metric_exactness},
      {6, "loss-point-values", false, loss_point_values},
      {7, "overfit-smoke", true, overfit_smoke},
      {8, "directional-ablation", true, directional_ablation},
      {9, "determinism", true, determinism},
      {10, "schedule-identities", false, schedule_identities},
  };
}

std::vector<CheckReport> run_checks(const std::vector<AcceptanceCheck>& checks, std::ostream& out) {
  std::vector<CheckReport> reports;
  for (const auto& c : checks) {
    CheckReport r{c.criterion, c.name, false, "", 0.0};
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const CheckOutcome o = c.run();
      r.pass = o.pass;
      r.measured = o.measured;
    } catch (const std::exception& e) {
      r.pass = false;
      r.measured = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out << (r.pass ? "[PASS] " : "[FAIL] ") << std::setw(2) << r.criterion << " " << r.name << ": " << r.measured
        << " (" << std::fixed << std::setprecision(1) << r.seconds << " s)" << std::defaultfloat << "\n"
        << std::flush;
    reports.push_back(std::move(r));
  }
  return reports;
}

}  // namespace ccseg
