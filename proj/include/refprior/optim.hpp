#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "refprior/tensor.hpp"

namespace refprior {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Storage> first_moment;
  std::vector<Storage> second_moment;
  std::int64_t step_count = 0;
};

// One bias-corrected Adam update, in place on `params`:
//   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
//   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
// Moments are allocated on the first call.
void adam_step(std::span<Tensor> params, std::span<const Tensor> grads,
               AdamState& state, const AdamOptions& options);

}  // namespace refprior
