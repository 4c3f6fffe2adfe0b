#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ssmcyto/tensor.hpp"

namespace ssmcyto {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double tol = 1e-4;
  double step = 1e-3;
  // 0 checks every element; otherwise an evenly strided subset per tensor.
  std::size_t max_per_tensor = 0;
};

// Compares reverse-mode gradients of the scalar `f` against fourth-order
// central differences for every element of `leaves`. Relative error per element is
// |a - n| / max(|a|, |n|, 1e-8). Throws ContractError if f is non-finite.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                           const GradCheckOptions& options = {});

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           const GradCheckOptions& options = {});

}  // namespace ssmcyto
