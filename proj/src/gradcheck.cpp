#include "refprior/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "refprior/rng.hpp"

namespace refprior {

namespace {

double probe(const std::function<Tensor()>& loss_fn) {
  NoGradGuard no_grad;
  const double value = loss_fn().item();
  if (!std::isfinite(value))
    fail(ErrorKind::Numerical, "gradient check: loss is not finite at a probe point");
  return value;
}

}  // namespace

GradCheckResult finite_difference_check(const std::function<Tensor()>& loss_fn,
                                        std::span<const Tensor> params,
                                        const GradCheckOptions& options) {
  if (!(options.eps > 0))
    fail(ErrorKind::Domain, "gradient check: eps must be positive");
  for (const auto& p : params) p.impl()->grad.reset();
  const Tensor loss = loss_fn();
  if (!std::isfinite(loss.item()))
    fail(ErrorKind::Numerical, "gradient check: loss is not finite");
  const std::vector<Tensor> analytic = gradients(loss, params);

  GradCheckResult result;
  Rng rng(derive_seed(options.seed, "gradcheck"));
  for (std::size_t t = 0; t < params.size(); ++t) {
    Storage& values = params[t].impl()->data;
    std::vector<std::size_t> indices(values.size());
    std::iota(indices.begin(), indices.end(), 0);
    if (options.max_elements_per_tensor > 0 &&
        indices.size() > options.max_elements_per_tensor) {
      // Partial Fisher-Yates.
      for (std::size_t i = 0; i < options.max_elements_per_tensor; ++i)
        std::swap(indices[i], indices[i + rng.uniform_int(indices.size() - i)]);
      indices.resize(options.max_elements_per_tensor);
    }
    for (std::size_t idx : indices) {
      const double original = values.get(idx);
      values.set(idx, original + options.eps);
      const double up = probe(loss_fn);
      values.set(idx, original - options.eps);
      const double down = probe(loss_fn);
      values.set(idx, original);
      const double numeric = (up - down) / (2.0 * options.eps);
      const double reverse = analytic[t].at(idx);
      const double denom =
          std::max({std::abs(reverse), std::abs(numeric), options.floor});
      const double err = std::abs(reverse - numeric) / denom;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_tensor = t;
        result.worst_element = idx;
      }
      ++result.elements_checked;
    }
  }
  for (const auto& p : params) p.impl()->grad.reset();
  return result;
}

}  // namespace refprior
