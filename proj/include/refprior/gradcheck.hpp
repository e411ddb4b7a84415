#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "refprior/tensor.hpp"

namespace refprior {

struct GradCheckOptions {
  double eps = 1e-5;
  // Elements probed per tensor; 0 probes every element. Sampled elements are
  // drawn without replacement from a stream seeded by `seed`.
  std::size_t max_elements_per_tensor = 0;
  std::uint64_t seed = 0;
  // Denominator floor of the relative error. Central differences on an O(1)
  // loss carry ~1e-11 of rounding noise, so gradients that vanish
  // analytically (e.g. a bias shared by every softmax logit) need a floor
  // well above that.
  double floor = 1e-5;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t elements_checked = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_element = 0;
};

// Compares reverse-mode gradients of the scalar `loss_fn()` with respect to
// `params` against central differences (f(p+eps) - f(p-eps)) / (2 eps).
// The per-element error is |g_ad - g_fd| / max(|g_ad|, |g_fd|, floor).
// Throws Error(Numerical) when the loss is non-finite at a probe point.
GradCheckResult finite_difference_check(const std::function<Tensor()>& loss_fn,
                                        std::span<const Tensor> params,
                                        const GradCheckOptions& options = {});

}  // namespace refprior
