#include "refprior/prior.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace refprior {

namespace {

void require_divisible(const Image& img, int grid) {
  if (grid < 1)
    fail(ErrorKind::Domain, "patch grid must be >= 1, got " + std::to_string(grid));
  if (img.height % grid != 0 || img.width % grid != 0)
    fail(ErrorKind::Shape,
         "image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
             " is not divisible into a " + std::to_string(grid) + "x" +
             std::to_string(grid) + " patch grid; resize it to a multiple of " +
             std::to_string(grid));
}

double intensity_from_means(double mean_t, double mean_r) {
  const double total = mean_r + mean_t;
  if (total <= 0.0) return 0.0;
  return std::clamp(mean_r / total, 0.0, 1.0);
}

}  // namespace

PriorMap PriorMap::filled(int grid, double value) {
  return PriorMap{grid, std::vector<double>(static_cast<std::size_t>(grid) * grid, value)};
}

std::vector<Image> patch_grid(const Image& img, int grid) {
  require_divisible(img, grid);
  const int ph = img.height / grid, pw = img.width / grid;
  std::vector<Image> patches;
  patches.reserve(static_cast<std::size_t>(grid) * grid);
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      Image patch(ph, pw);
      for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x)
          for (int c = 0; c < Image::kChannels; ++c)
            patch.at(y, x, c) = img.at(gy * ph + y, gx * pw + x, c);
      patches.push_back(std::move(patch));
    }
  return patches;
}

double reflection_intensity(const Image& t_patch, const Image& r_patch) {
  require_same_size("reflection_intensity", t_patch, r_patch);
  return intensity_from_means(t_patch.mean(), r_patch.mean());
}

double legacy_reflection_intensity(const Image& t_patch, const Image& r_patch) {
  require_same_size("legacy_reflection_intensity", t_patch, r_patch);
  const double mean_t = t_patch.mean();
  if (mean_t == 0.0)
    fail(ErrorKind::Domain,
         "legacy reflection intensity is unbounded: transmission mean is zero");
  return r_patch.mean() / mean_t;
}

PriorMap prior_map(const Image& transmission, const Image& reflection, int grid) {
  require_same_size("prior_map", transmission, reflection);
  require_divisible(transmission, grid);
  const int ph = transmission.height / grid, pw = transmission.width / grid;
  const double count = static_cast<double>(ph) * pw * Image::kChannels;
  PriorMap map = PriorMap::filled(grid, 0.0);
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      double sum_t = 0.0, sum_r = 0.0;
      for (int y = gy * ph; y < (gy + 1) * ph; ++y)
        for (int x = gx * pw; x < (gx + 1) * pw; ++x)
          for (int c = 0; c < Image::kChannels; ++c) {
            sum_t += transmission.at(y, x, c);
            sum_r += reflection.at(y, x, c);
          }
      map.values[static_cast<std::size_t>(gy) * grid + gx] =
          intensity_from_means(sum_t / count, sum_r / count);
    }
  return map;
}

PriorFeatures encode_prior(const PriorMap& map, int dim) {
  if (dim < 2 || dim % 2 != 0)
    fail(ErrorKind::Domain, "prior encoding dimension must be even and >= 2, got " +
                                std::to_string(dim));
  PriorFeatures out{map.grid, dim, {}};
  out.values.resize(map.values.size() * static_cast<std::size_t>(dim));
  for (std::size_t p = 0; p < map.values.size(); ++p) {
    const double prior = map.values[p];
    if (!std::isfinite(prior))
      fail(ErrorKind::Domain, "prior encoding: non-finite prior value");
    double* row = out.values.data() + p * dim;
    for (int i = 0; i < dim / 2; ++i) {
      const double divisor = std::pow(kEncodingBase, 2.0 * i / dim);
      row[2 * i] = std::sin(prior / divisor);
      row[2 * i + 1] = std::cos(prior / divisor);
    }
  }
  return out;
}

Tensor features_to_tensor(std::span<const PriorFeatures> features, Dtype dtype) {
  if (features.empty()) fail(ErrorKind::Shape, "features_to_tensor: empty batch");
  const auto& first = features.front();
  std::vector<double> flat;
  flat.reserve(features.size() * first.values.size());
  for (const auto& f : features) {
    if (f.grid != first.grid || f.dim != first.dim)
      fail(ErrorKind::Shape, "features_to_tensor: mixed grids or dims in batch");
    flat.insert(flat.end(), f.values.begin(), f.values.end());
  }
  return Tensor::from({static_cast<std::int64_t>(features.size()), first.grid,
                       first.grid, first.dim},
                      flat, dtype);
}

GrayImage prior_heatmap(const PriorMap& map, int size) {
  if (size % map.grid != 0)
    fail(ErrorKind::Shape, "heatmap size " + std::to_string(size) +
                               " not divisible by grid " + std::to_string(map.grid));
  const int block = size / map.grid;
  GrayImage out{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size)};
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      out.bytes[static_cast<std::size_t>(y) * size + x] = static_cast<std::uint8_t>(
          std::lround(std::clamp(map.at(y / block, x / block), 0.0, 1.0) * 255.0));
  return out;
}

}  // namespace refprior
