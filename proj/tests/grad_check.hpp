#pragma once

// Central finite-difference oracle for tape gradients. Test-only: it never
// calls backward for its numeric estimate, only repeated forward passes.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ni/autodiff.hpp"

namespace ni::testing {

using LossFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

inline double forward_loss(const LossFn& fn, const std::vector<Array>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Array& a : inputs) vars.push_back(tape.leaf(a));
  return fn(tape, vars).value()[0];
}

/// Relative error per component on the scale max(|analytic|, |numeric|, floor).
inline GradCheckResult check_gradients(const LossFn& fn, std::vector<Array> inputs,
                                       double h = 1e-4, double floor = 1e-8) {
  std::vector<Array> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const Array& a : inputs) vars.push_back(tape.leaf(a));
    ad::Var loss = fn(tape, vars);
    tape.backward(loss);
    for (const ad::Var& v : vars) analytic.push_back(tape.grad(v));
  }
  GradCheckResult res;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    for (std::size_t i = 0; i < inputs[p].size(); ++i) {
      const double orig = inputs[p][i];
      inputs[p][i] = orig + h;
      const double up = forward_loss(fn, inputs);
      inputs[p][i] = orig - h;
      const double down = forward_loss(fn, inputs);
      inputs[p][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double scale = std::max({std::abs(a), std::abs(numeric), floor});
      const double err = std::abs(a - numeric) / scale;
      if (err > res.max_rel_error) res = {err, p, i, a, numeric};
    }
  }
  return res;
}

inline Array random_array(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Array a(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : a.storage()) v = u(rng);
  return a;
}

/// A fixed random projection of v to a scalar, so every output component
/// contributes to the checked loss with a distinct weight.
inline ad::Var project(ad::Var v, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  ad::Var w = v.tape->constant(random_array(v.value().shape(), rng));
  return ad::sum_all(ad::mul(v, w));
}

}  // namespace ni::testing
