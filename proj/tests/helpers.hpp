#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ccseg/random.hpp"
#include "ccseg/tensor.hpp"

namespace ccseg::testing {

inline Tensor leaf(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor::uniform(shape, lo, hi, rng).set_requires_grad(true);
}

// Runs f under a fresh tape and returns the gradients of every input.
inline std::vector<std::vector<double>> grads_of(const std::function<Tensor()>& f, std::vector<Tensor> inputs) {
  for (auto& t : inputs) t.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = f();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> out;
  for (const auto& t : inputs) out.emplace_back(t.grad().begin(), t.grad().end());
  return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace ccseg::testing
