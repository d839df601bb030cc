#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "bnft/errors.hpp"
#include "bnft/tensor.hpp"

namespace bnft {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at the worst coordinate
  double numeric = 0.0;
};

// Central differences: Two is (f(θ+h) - f(θ-h)) / 2h with O(h²) truncation;
// Four is the five-point rule (-f(θ+2h) + 8f(θ+h) - 8f(θ-h) + f(θ-2h)) / 12h
// with O(h⁴) truncation, which allows a larger h and hence less roundoff.
enum class Stencil { Two, Four };

// Compares tape gradients of the scalar f with finite differences, one
// coordinate at a time. The relative error uses max(|analytic|, |numeric|,
// 1e-8) as denominator. Meant for T = double.
template <class T>
GradCheckResult grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params, double step = 1e-6,
                           Stencil stencil = Stencil::Two) {
  if (!(step > 0.0)) throw NumericError("grad_check step must be positive");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  auto eval = [&] {
    const Tensor<T> out = f();
    if (out.size() != 1) throw ShapeError("grad_check needs a scalar function, got " + to_string(out.shape()));
    const double v = static_cast<double>(out.item());
    if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
    return std::pair{out, v};
  };

  eval().first.backward();
  std::vector<std::vector<T>> analytic;
  for (const auto& p : params) {
    analytic.emplace_back(p.size(), T(0));
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.back().begin());
  }

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T saved = data[i];
      auto at = [&](double offset) {
        data[i] = static_cast<T>(static_cast<double>(saved) + offset);
        return eval().second;
      };
      double numeric;
      if (stencil == Stencil::Two) {
        numeric = (at(step) - at(-step)) / (2.0 * step);
      } else {
        // Differences first, so coordinates f ignores give exactly zero.
        const double near = at(step) - at(-step);
        const double far = at(2 * step) - at(-2 * step);
        numeric = (8.0 * near - far) / (12.0 * step);
      }
      data[i] = saved;
      const double a = static_cast<double>(analytic[pi][i]);
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (err > result.max_rel_error || (pi == 0 && i == 0)) {
        result = {std::max(err, result.max_rel_error), pi, i, a, numeric};
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

}  // namespace bnft
