#pragma once

#include <span>
#include <vector>

#include "refprior/image.hpp"
#include "refprior/tensor.hpp"

namespace refprior {

// Per-patch reflection intensity on a grid x grid lattice, row-major.
struct PriorMap {
  int grid = 1;
  std::vector<double> values;

  static PriorMap filled(int grid, double value);
  double at(int row, int col) const {
    return values[static_cast<std::size_t>(row) * grid + col];
  }
};

// Sinusoidal encoding of a PriorMap: grid x grid x dim, row-major patches.
struct PriorFeatures {
  int grid = 1;
  int dim = 64;
  std::vector<double> values;
};

inline constexpr int kPriorDim = 64;
inline constexpr double kEncodingBase = 10000.0;

// Non-overlapping grid x grid tiling in row-major patch order. Throws Shape
// (asking for a resize) when the image size is not divisible by `grid`.
std::vector<Image> patch_grid(const Image& img, int grid);

// Mean(R) / (Mean(R) + Mean(T)), means over all pixels and channels.
// 0 when both means are zero.
double reflection_intensity(const Image& t_patch, const Image& r_patch);

// Mean(R) / Mean(T). Diagnostic only; throws Domain when Mean(T) == 0, the
// case where the ratio is unbounded.
double legacy_reflection_intensity(const Image& t_patch, const Image& r_patch);

PriorMap prior_map(const Image& transmission, const Image& reflection, int grid);

// out[2i] = sin(p / base^(2i/dim)), out[2i+1] = cos(p / base^(2i/dim)),
// i in [0, dim/2), base = 10000.
PriorFeatures encode_prior(const PriorMap& map, int dim = kPriorDim);

// Batch of encodings -> [N, grid, grid, dim].
Tensor features_to_tensor(std::span<const PriorFeatures> features,
                          Dtype dtype = default_dtype());

// Upsampled heatmap: every patch becomes a (size/grid)^2 block of
// round(value * 255).
GrayImage prior_heatmap(const PriorMap& map, int size);

}  // namespace refprior
