#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "refprior/image.hpp"
#include "refprior/prior.hpp"

namespace refprior {

inline constexpr double kPsnrCapDb = 100.0;

// 10 log10(1 / MSE) with peak 1; identical images give kPsnrCapDb.
double psnr(const Image& a, const Image& b);

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
// dynamic range 1. Evaluated per channel over every fully contained window,
// averaged over windows and then over channels.
double ssim(const Image& a, const Image& b);

struct PatchPixelError {
  double pixel_units = 0.0;  // mean |pred - truth| * 255
  double normalized = 0.0;   // mean |pred - truth|
};

PatchPixelError patch_pixel_error(const PriorMap& prediction, const PriorMap& truth);

// weak (< 0.33), moderate (< 0.5) or strong reflection by global prior.
std::string reflection_category(double global_prior);

struct SampleMetrics {
  std::string id;
  std::string category;
  double truth_prior = 0.0;    // global (1x1) truth prior
  double psnr_db = 0.0;        // restored vs transmission
  double ssim = 0.0;
  double input_psnr_db = 0.0;  // mixture vs transmission
  double input_ssim = 0.0;
  double prior_pixel_error = 0.0;  // prior fed to the restorer vs truth, x255
};

struct MetricsSummary {
  std::size_t count = 0;
  double psnr_db = 0.0, ssim = 0.0;
  double input_psnr_db = 0.0, input_ssim = 0.0;
  double prior_pixel_error = 0.0;
};

struct MetricsReport {
  std::vector<SampleMetrics> samples;

  // Arithmetic means over all samples, or over one category.
  MetricsSummary summary() const;
  MetricsSummary summary(const std::string& category) const;
};

// Columns: id,category,truth_prior,psnr_db,ssim,input_psnr_db,input_ssim,prior_pixel_error
// Values are written with 17 significant digits.
void write_metrics_csv(const MetricsReport& report, const std::filesystem::path& path);
std::string format_metrics_table(const MetricsReport& report);

}  // namespace refprior
