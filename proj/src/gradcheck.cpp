#include "ssmcyto/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ssmcyto/error.hpp"

namespace ssmcyto {

namespace {

double evaluate(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  const double v = f().item();
  if (!std::isfinite(v)) throw ContractError("grad_check: function evaluated to a non-finite value");
  return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                           const GradCheckOptions& options) {
  for (Tensor& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  {
    Tensor loss = f();
    if (!std::isfinite(loss.item())) throw ContractError("grad_check: function evaluated to a non-finite value");
    backward(loss);
  }
  GradCheckReport report;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = leaves[li];
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    const std::size_t n = leaf.numel();
    const std::size_t stride =
        options.max_per_tensor == 0 || n <= options.max_per_tensor ? 1 : (n + options.max_per_tensor - 1) / options.max_per_tensor;
    auto values = leaf.mutable_data();
    for (std::size_t i = 0; i < n; i += stride) {
      const double original = values[i], h = options.step;
      auto at = [&](double offset) {
        values[i] = original + offset;
        return evaluate(f);
      };
      const double near = at(h) - at(-h), far = at(2 * h) - at(-2 * h);
      values[i] = original;
      const double numeric = (8.0 * near - far) / (12.0 * h);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++report.checked;
      if (rel > report.max_rel_error || report.checked == 1) {
        report.max_rel_error = std::max(rel, report.max_rel_error);
        if (rel >= report.max_rel_error) {
          report.worst_tensor = "leaf" + std::to_string(li);
          report.worst_index = i;
          report.worst_analytic = a;
          report.worst_numeric = numeric;
        }
      }
    }
    leaf.zero_grad();
  }
  report.passed = report.max_rel_error < options.tol;
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           const GradCheckOptions& options) {
  return grad_check([&f, x] { return f(x); }, {x}, options);
}

}  // namespace ssmcyto
