#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ccseg/error.hpp"
#include "ccseg/tensor.hpp"

namespace ccseg {

struct CimConfig {
  std::size_t n_f = 5;
  std::size_t m_features = 16;
  std::size_t inner_steps = 20;
  double inner_lr = 0.05;
  std::uint64_t seed = 0;
  void validate() const;
};

/// Frozen random Fourier features x -> sqrt(2) cos(omega_j x + phi_j),
/// omega ~ N(0, 1), phi ~ U[0, 2 pi).
class RFFBank {
 public:
  RFFBank(Eigen::VectorXd omega, Eigen::VectorXd phi, std::uint64_t seed = 0);
  static RFFBank draw(std::size_t n_f, std::uint64_t seed);

  std::size_t size() const { return static_cast<std::size_t>(omega_.size()); }
  const Eigen::VectorXd& omega() const { return omega_; }
  const Eigen::VectorXd& phi() const { return phi_; }
  std::uint64_t seed() const { return seed_; }

  /// n-vector -> n x n_f matrix of mapped values.
  template <typename Derived>
  Eigen::MatrixXd map(const Eigen::MatrixBase<Derived>& column) const {
    Eigen::MatrixXd arg = column.derived().col(0) * omega_.transpose();
    arg.rowwise() += phi_.transpose();
    return std::numbers::sqrt2 * arg.array().cos().matrix();
  }

 private:
  Eigen::VectorXd omega_;
  Eigen::VectorXd phi_;
  std::uint64_t seed_;
};

/// Non-negative weights summing to n (within 1e-9); enforced at construction.
class SampleWeights {
 public:
  static constexpr double kTolerance = 1e-9;

  explicit SampleWeights(Eigen::VectorXd w);
  static SampleWeights uniform(std::size_t n) { return SampleWeights(Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n))); }

  const Eigen::VectorXd& values() const { return w_; }
  std::size_t size() const { return static_cast<std::size_t>(w_.size()); }
  double operator[](std::size_t i) const { return w_(static_cast<Eigen::Index>(i)); }

 private:
  Eigen::VectorXd w_;
};

namespace detail {
template <typename DU, typename DV>
void check_cov_inputs(const Eigen::MatrixBase<DU>& U, const Eigen::MatrixBase<DV>& V) {
  if (U.rows() != V.rows()) {
    throw ShapeError("partial cross-covariance: row counts differ (" + std::to_string(U.rows()) + " vs " +
                     std::to_string(V.rows()) + ")");
  }
  if (U.rows() < 2) throw DegenerateError("partial cross-covariance needs n >= 2 samples");
}
}  // namespace detail

/// 1/(n-1) * sum_i (u_i - mean u)^T (v_i - mean v), rows are samples.
template <typename DU, typename DV>
Eigen::MatrixXd partial_cross_cov(const Eigen::MatrixBase<DU>& U, const Eigen::MatrixBase<DV>& V) {
  detail::check_cov_inputs(U, V);
  const double n = static_cast<double>(U.rows());
  Eigen::MatrixXd Uc = U.rowwise() - U.colwise().mean();
  Eigen::MatrixXd Vc = V.rowwise() - V.colwise().mean();
  return Uc.transpose() * Vc / (n - 1.0);
}

/// Weighted form: rows become w_i u_i - (1/n) sum_j w_j u_j (same for v),
/// with the same 1/(n-1) prefactor. Reduces to partial_cross_cov at w = 1.
template <typename DU, typename DV>
Eigen::MatrixXd weighted_partial_cross_cov(const Eigen::MatrixBase<DU>& U, const Eigen::MatrixBase<DV>& V,
                                           const SampleWeights& w) {
  detail::check_cov_inputs(U, V);
  if (static_cast<Eigen::Index>(w.size()) != U.rows()) {
    throw ShapeError("weighted partial cross-covariance: " + std::to_string(w.size()) + " weights for " +
                     std::to_string(U.rows()) + " samples");
  }
  const double n = static_cast<double>(U.rows());
  Eigen::MatrixXd Uw = w.values().asDiagonal() * U;
  Eigen::MatrixXd Vw = w.values().asDiagonal() * V;
  Uw.rowwise() -= Uw.colwise().sum() / n;
  Vw.rowwise() -= Vw.colwise().sum() / n;
  return Uw.transpose() * Vw / (n - 1.0);
}

/// One bank per feature slot, derived from cfg.seed; identical on every call.
std::vector<RFFBank> make_banks(std::size_t m, const CimConfig& cfg);

/// Channels of an n x C x H x W map used as feature variables: all of them when
/// C <= m_features, otherwise a seeded draw (sorted ascending).
std::vector<std::size_t> select_feature_channels(std::size_t channels, const CimConfig& cfg);

/// n x m matrix of global-average-pooled selected channels.
Eigen::MatrixXd extract_feature_vars(const Tensor& f5, const CimConfig& cfg);

/// Sum over pairs i < j of ||weighted_partial_cross_cov(rff_i(A_i), rff_j(A_j), w)||_F^2.
double independence_objective(const Eigen::MatrixXd& features, std::span<const RFFBank> banks,
                              const SampleWeights& w);

struct ObjectiveGradient {
  double value = 0.0;
  Eigen::VectorXd d_weights;
};

/// Objective and its gradient with respect to the weight vector.
ObjectiveGradient independence_objective_gradient(const Eigen::MatrixXd& features, std::span<const RFFBank> banks,
                                                  const Eigen::VectorXd& w);

struct WeightLearning {
  SampleWeights weights;
  double objective_uniform = 0.0;
  double objective_best = 0.0;
  std::size_t best_step = 0;
};

/// Gradient descent on w = n softmax(theta) from theta = 0, returning the best
/// iterate (the uniform start included).
WeightLearning learn_weights(const Eigen::MatrixXd& features, std::span<const RFFBank> banks, const CimConfig& cfg);
WeightLearning learn_weights(const Eigen::MatrixXd& features, const CimConfig& cfg);

/// (1/n) sum_i w_i ce_i with w held constant.
Tensor cim_loss(const Tensor& ce_per_sample, const SampleWeights& w);

}  // namespace ccseg
