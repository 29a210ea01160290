#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <vector>

#include "sfdit/autograd.hpp"

namespace sfdit {

struct GradCheckOptions {
  double step = 1e-5;
  // One-sided slopes differing by more than this (relative) mark a kink.
  double kink_tolerance = 1e-2;
  // Added to every backward-pass gradient entry; negative-control hook.
  double corrupt_gradient = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;  // coordinates at nondifferentiable points
  std::size_t at_noise_floor = 0;  // both gradients below finite-difference roundoff
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
};

using ScalarGraphFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline double evaluate_scalar(const ScalarGraphFn& f, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.constant(x));
  Var<double> out = f(tape, vars);
  if (out.size() != 1) throw ContractError("grad_check: function output is not scalar: " + shape_str(out.shape()));
  return out.value()[0];
}

// Compares backward-pass gradients of f against central differences for every
// coordinate of every input. Returns the max relative error
// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|) over differentiable coordinates.
inline GradCheckReport grad_check(const ScalarGraphFn& f, std::vector<Tensor<double>> inputs,
                                  const GradCheckOptions& opt = {}) {
  if (!(opt.step > 0)) throw ContractError("grad_check: step must be positive");
  std::vector<Tensor<double>> analytic;
  double f0 = 0.0;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
    Var<double> out = f(tape, vars);
    if (out.size() != 1) throw ContractError("grad_check: function output is not scalar: " + shape_str(out.shape()));
    f0 = out.value()[0];
    tape.backward(out);
    for (auto v : vars) analytic.push_back(tape.grad(v));
  }

  GradCheckReport rep;
  const double h = opt.step;
  // Central differences cannot resolve slopes below the roundoff of f itself;
  // structurally zero gradients (e.g. key biases under softmax) land here.
  const double noise_floor = 64 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f0)) / h;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double fp = evaluate_scalar(f, inputs);
      inputs[k][i] = orig - h;
      const double fm = evaluate_scalar(f, inputs);
      inputs[k][i] = orig;

      const double fwd = (fp - f0) / h;
      const double bwd = (f0 - fm) / h;
      if (std::abs(fwd - bwd) > opt.kink_tolerance * std::max(1.0, 0.5 * (std::abs(fwd) + std::abs(bwd)))) {
        ++rep.excluded;
        continue;
      }
      const double g_fd = (fp - fm) / (2 * h);
      const double g_ad = analytic[k][i] + opt.corrupt_gradient;
      if (std::abs(g_ad) + std::abs(g_fd) < noise_floor) {
        ++rep.at_noise_floor;
        continue;
      }
      const double err = std::abs(g_ad - g_fd) / std::max(1e-8, std::abs(g_ad) + std::abs(g_fd));
      ++rep.checked;
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_input = k;
        rep.worst_index = i;
      }
    }
  }
  return rep;
}

inline GradCheckReport grad_check(const std::function<Var<double>(Tape<double>&, Var<double>)>& f,
                                  const Tensor<double>& x, const GradCheckOptions& opt = {}) {
  return grad_check([&](Tape<double>& t, const std::vector<Var<double>>& v) { return f(t, v[0]); },
                    std::vector<Tensor<double>>{x}, opt);
}

}  // namespace sfdit
