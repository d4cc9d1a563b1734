#pragma once

// Finite-difference verification harness. Runs in float64 only; the checked
// function must build a scalar loss from the given inputs.

#include <functional>
#include <string>
#include <vector>

#include "msm/tensor.hpp"

namespace msm {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_input;
  int64_t worst_index = -1;
};

/// Central-difference check of d(loss)/d(input) for every element of every
/// input that requires grad. Relative error is
/// |analytic - fd| / max(1, |fd|), maximized over elements.
inline GradCheckReport grad_check(const std::string& kernel_name,
                                  const std::function<DTensor(std::vector<DTensor>&)>& f,
                                  std::vector<DTensor> inputs, double eps = 1e-4) {
  for (auto& in : inputs) in.set_requires_grad(true);
  auto loss = f(inputs);
  require(loss.numel() == 1, "grad_check(" + kernel_name + "): loss must be scalar");
  loss.backward();

  GradCheckReport rep;
  for (size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    if (!in.has_grad()) in.grad();  // treat untouched inputs as zero-grad
    for (int64_t i = 0; i < in.numel(); ++i) {
      const double analytic = in.grad()[static_cast<size_t>(i)];
      if (!std::isfinite(analytic))
        fail("grad_check(" + kernel_name + "): non-finite gradient at input " + std::to_string(k) +
             " index " + std::to_string(i));
      const double orig = in.data()[i];
      double fplus, fminus;
      {
        NoGradGuard ng;
        in.data()[i] = orig + eps;
        fplus = f(inputs).data()[0];
        in.data()[i] = orig - eps;
        fminus = f(inputs).data()[0];
        in.data()[i] = orig;
      }
      const double fd = (fplus - fminus) / (2.0 * eps);
      const double rel = std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_input = kernel_name + "/input" + std::to_string(k);
        rep.worst_index = i;
      }
    }
  }
  return rep;
}

}  // namespace msm
