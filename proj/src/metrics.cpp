#include "refprior/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace refprior {

double psnr(const Image& a, const Image& b) {
  require_same_size("psnr", a, b);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(a.values.size());
  if (mse == 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / mse));
}

namespace {

constexpr int kWindow = 11;
constexpr double kWindowSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

// Normalized 1-D Gaussian; the 2-D window is its outer product.
std::vector<double> window_1d() {
  std::vector<double> w(kWindow);
  double total = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    w[i] = std::exp(-d * d / (2.0 * kWindowSigma * kWindowSigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

// Valid-mode separable filtering of one channel plane.
std::vector<double> filter_valid(const std::vector<double>& plane, int h, int w,
                                 const std::vector<double>& k) {
  const int oh = h - kWindow + 1, ow = w - kWindow + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kWindow; ++i) acc += k[i] * plane[static_cast<std::size_t>(y) * w + x + i];
      rows[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kWindow; ++i) acc += k[i] * rows[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  return out;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  require_same_size("ssim", a, b);
  if (a.height < kWindow || a.width < kWindow)
    fail(ErrorKind::Shape, "ssim: image " + std::to_string(a.height) + "x" +
                               std::to_string(a.width) + " is smaller than the " +
                               std::to_string(kWindow) + "x" + std::to_string(kWindow) +
                               " window");
  const auto k = window_1d();
  const int h = a.height, w = a.width;
  const std::size_t n = static_cast<std::size_t>(h) * w;
  double channel_total = 0.0;
  for (int c = 0; c < Image::kChannels; ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = a.values[i * Image::kChannels + c];
      y[i] = b.values[i * Image::kChannels + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, k), my = filter_valid(y, h, w, k);
    const auto exx = filter_valid(xx, h, w, k), eyy = filter_valid(yy, h, w, k);
    const auto exy = filter_valid(xy, h, w, k);
    double total = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = exx[i] - mx[i] * mx[i];
      const double vy = eyy[i] - my[i] * my[i];
      const double cov = exy[i] - mx[i] * my[i];
      total += ((2 * mx[i] * my[i] + kC1) * (2 * cov + kC2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2));
    }
    channel_total += total / static_cast<double>(mx.size());
  }
  return channel_total / Image::kChannels;
}

PatchPixelError patch_pixel_error(const PriorMap& prediction, const PriorMap& truth) {
  if (prediction.grid != truth.grid || prediction.values.size() != truth.values.size())
    fail(ErrorKind::Shape, "patch_pixel_error: grid " + std::to_string(prediction.grid) +
                               " vs " + std::to_string(truth.grid));
  double acc = 0.0;
  for (std::size_t i = 0; i < truth.values.size(); ++i)
    acc += std::abs(prediction.values[i] - truth.values[i]);
  const double mae = acc / static_cast<double>(truth.values.size());
  return {mae * 255.0, mae};
}

std::string reflection_category(double global_prior) {
  if (global_prior < 0.33) return "weak";
  if (global_prior < 0.5) return "moderate";
  return "strong";
}

namespace {

MetricsSummary summarize(const std::vector<const SampleMetrics*>& rows) {
  MetricsSummary s;
  s.count = rows.size();
  if (rows.empty()) return s;
  for (const auto* r : rows) {
    s.psnr_db += r->psnr_db;
    s.ssim += r->ssim;
    s.input_psnr_db += r->input_psnr_db;
    s.input_ssim += r->input_ssim;
    s.prior_pixel_error += r->prior_pixel_error;
  }
  const double n = static_cast<double>(rows.size());
  s.psnr_db /= n;
  s.ssim /= n;
  s.input_psnr_db /= n;
  s.input_ssim /= n;
  s.prior_pixel_error /= n;
  return s;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

MetricsSummary MetricsReport::summary() const {
  std::vector<const SampleMetrics*> rows;
  for (const auto& s : samples) rows.push_back(&s);
  return summarize(rows);
}

MetricsSummary MetricsReport::summary(const std::string& category) const {
  std::vector<const SampleMetrics*> rows;
  for (const auto& s : samples)
    if (s.category == category) rows.push_back(&s);
  return summarize(rows);
}

void write_metrics_csv(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out << "id,category,truth_prior,psnr_db,ssim,input_psnr_db,input_ssim,prior_pixel_error\n";
  for (const auto& s : report.samples)
    out << s.id << ',' << s.category << ',' << fmt("%.17g", s.truth_prior) << ','
        << fmt("%.17g", s.psnr_db) << ',' << fmt("%.17g", s.ssim) << ','
        << fmt("%.17g", s.input_psnr_db) << ',' << fmt("%.17g", s.input_ssim) << ','
        << fmt("%.17g", s.prior_pixel_error) << '\n';
}

std::string format_metrics_table(const MetricsReport& report) {
  std::ostringstream os;
  os << "category   count   PSNR(dB)   SSIM    input PSNR  input SSIM  prior err\n";
  auto line = [&](const std::string& name, const MetricsSummary& s) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-10s %5zu   %8.3f   %6.4f  %10.3f  %10.4f  %9.3f\n",
                  name.c_str(), s.count, s.psnr_db, s.ssim, s.input_psnr_db, s.input_ssim,
                  s.prior_pixel_error);
    os << buf;
  };
  for (const char* cat : {"weak", "moderate", "strong"})
    if (auto s = report.summary(cat); s.count > 0) line(cat, s);
  line("all", report.summary());
  return os.str();
}

}  // namespace refprior
