#pragma once

// Central finite-difference gradient oracle (64-bit only).

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tah/numerics/optim.hpp"
#include "tah/numerics/tensor.hpp"

namespace oracle {

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;  // "name[index]"
  double max_abs_below_floor = 0.0;
  std::size_t checked = 0;
  std::size_t nonzero_analytic = 0;
};

/// Compares reverse-mode gradients of `loss()` against central differences
/// for every entry of every parameter whose analytic or numeric gradient
/// exceeds `floor` in magnitude. Relative error is |a-n| / max(|a|,|n|).
inline GradCheck check_gradients(const std::function<tah::Tensor<double>()>& loss,
                                 std::vector<tah::NamedParam<double>> params, double h = 1e-5, double floor = 1e-8) {
  for (auto& p : params) p.tensor.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.push_back(p.tensor.grad());

  GradCheck out;
  tah::NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto w = params[pi].tensor.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double orig = w[j];
      w[j] = orig + h;
      const double fp = loss().item();
      w[j] = orig - h;
      const double fm = loss().item();
      w[j] = orig;
      const double num = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][j];
      if (a != 0.0) ++out.nonzero_analytic;
      if (std::abs(a) <= floor && std::abs(num) <= floor) {
        out.max_abs_below_floor = std::max(out.max_abs_below_floor, std::abs(a - num));
        continue;
      }
      ++out.checked;
      const double rel = std::abs(a - num) / std::max(std::abs(a), std::abs(num));
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = params[pi].name + "[" + std::to_string(j) + "]";
      }
    }
  }
  return out;
}

}  // namespace oracle
