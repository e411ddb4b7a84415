#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "refprior/image.hpp"
#include "refprior/prior.hpp"

namespace refprior {

// 2-D kernel over a rows x cols support. (origin_row, origin_col) is the
// support cell that corresponds to zero offset.
struct Kernel {
  int rows = 1, cols = 1;
  int origin_row = 0, origin_col = 0;
  std::vector<double> weights{1.0};

  double at(int r, int c) const {
    return weights[static_cast<std::size_t>(r) * cols + c];
  }
  double sum() const;
};

// Normalized isotropic Gaussian, side 2*ceil(3*sigma)+1 (1 when sigma == 0).
Kernel gaussian_kernel(double sigma);

// Double impulse: 1/(1+alpha) at the origin and alpha/(1+alpha) at offset
// (dy, dx). Convolution with it superimposes a shifted copy (ghost).
Kernel ghost_kernel(int dx, int dy, double alpha);

// Reflect-101 index into [0, n): ... 2 1 | 0 1 2 ... n-1 | n-2 ...
int reflect_index(int i, int n);

// True convolution out(p) = sum_q k(q) in(p - q) with reflective borders.
Image convolve(const Image& img, const Kernel& kernel);

struct DegradationParams {
  double blur_sigma = 0.0;
  int ghost_dx = 0;
  int ghost_dy = 0;
  double ghost_alpha = 0.0;
  double attenuation = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Superimposed {
  Image mixture;             // I
  Image reflection_degraded; // f(R)
};

// I = clamp(T + f(R), 0, 1) with f(R) = attenuation * blur(ghost(R)).
Superimposed superimpose(const Image& transmission, const Image& reflection,
                         const DegradationParams& params);

// Ranges from which per-sample degradations are drawn uniformly.
struct DegradationSchedule {
  double blur_sigma_min = 0.5, blur_sigma_max = 2.0;
  int ghost_shift_max = 3;
  double ghost_alpha_min = 0.0, ghost_alpha_max = 0.5;
  double attenuation_min = 0.2, attenuation_max = 0.9;

  void validate() const;
};

// Draws from `schedule` with a stream seeded by `seed`; the seed is recorded
// in the result.
DegradationParams sample_degradation(const DegradationSchedule& schedule,
                                     std::uint64_t seed);

inline constexpr double kDefaultGrain = 0.3;

// Random scene: gradient background plus rectangles, ellipses and stripes,
// every pixel then scaled by 1 + grain * u with u ~ U(-1, 1) shared across
// channels (albedo texture whose contrast follows local brightness). Values
// are quantized to 8 bits.
Image procedural_scene(int size, std::uint64_t seed, double grain = kDefaultGrain);

// Writes `count` procedural scenes as <prefix><index>.ppm into `dir`.
void write_procedural_sources(const std::filesystem::path& dir, int count,
                              int size, std::uint64_t seed,
                              const std::string& prefix, double grain = kDefaultGrain);

struct ManifestRecord {
  std::string id;
  std::string path_mixture;       // relative to the manifest directory
  std::string path_transmission;
  std::string path_reflection;    // the degraded reflection layer
  std::map<int, PriorMap> priors; // keyed by grid
  DegradationParams params;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory holding manifest.jsonl
  std::vector<ManifestRecord> records;

  std::filesystem::path resolve(const std::string& relative) const {
    return root / relative;
  }
};

inline constexpr const char* kManifestFile = "manifest.jsonl";

struct DatasetOptions {
  std::filesystem::path transmission_dir;
  std::filesystem::path reflection_dir;
  std::filesystem::path out_dir;
  DegradationSchedule schedule;
  std::vector<int> grids{1, 7, 14, 28};
  int size = 56;
  std::uint64_t seed = 0;
};

// One record per transmission image (sorted by file name). Each sample draws
// its reflection source and degradations from derive_seed(seed, "sample", i).
// Priors are computed from the 8-bit values written to disk.
DatasetManifest build_dataset(const DatasetOptions& options);

void write_manifest(const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& path);

// Sorted *.ppm files in a directory.
std::vector<std::filesystem::path> list_ppm(const std::filesystem::path& dir);

// A manifest record with its images resident in memory.
struct Sample {
  std::string id;
  Image mixture, transmission, reflection;
  std::map<int, PriorMap> priors;
};

std::vector<Sample> load_samples(const DatasetManifest& manifest);

}  // namespace refprior
