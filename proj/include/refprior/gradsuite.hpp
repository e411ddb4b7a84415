#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refprior/gradcheck.hpp"

namespace refprior {

struct GradSuiteEntry {
  std::string name;
  int cases = 0;
  double max_relative_error = 0.0;
  std::size_t elements_checked = 0;
};

struct GradSuiteOptions {
  int cases_per_primitive = 20;
  std::uint64_t seed = 0;
  double eps = 1e-5;
  bool include_models = true;
  int model_cases = 2;
  // Elements probed per parameter tensor in the whole-model checks.
  std::size_t model_elements_per_tensor = 4;
};

// Finite-difference checks in 64-bit of every differentiable primitive on
// randomized shapes, plus the PRRN and RPEN losses on tiny geometries. Each
// case reduces the op output against a random projection so that no output
// element has a trivially zero gradient.
std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& options = {});

}  // namespace refprior
