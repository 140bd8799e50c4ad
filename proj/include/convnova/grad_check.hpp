#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "convnova/tape.hpp"

namespace convnova {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

/// Compares taped gradients of a scalar function against central differences
/// (f(x+h) - f(x-h)) / 2h, one input coordinate at a time.
///
/// `f(tape, vars)` must build a one-element result from `vars`, which mirror
/// `inputs` as tracked leaves. The relative error of a coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor keeps
/// near-zero gradients from amplifying rounding noise.
template <typename F>
GradCheckResult grad_check(F&& f, const std::vector<Tensor<double>>& inputs, double h = 1e-5,
                           double floor = 1e-4) {
  auto evaluate = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.constant(x));
    return f(tape, vars).value()[0];
  };

  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
  const auto loss = f(tape, leaves);
  const auto grads = tape.backward(loss);

  GradCheckResult result;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = grads.get(leaves[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      probe[k][i] = orig + h;
      const double up = evaluate(probe);
      probe[k][i] = orig - h;
      const double down = evaluate(probe);
      probe[k][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      ++result.coordinates;
    }
  }
  return result;
}

}  // namespace convnova
