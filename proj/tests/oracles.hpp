#pragma once

#include <cmath>

#include "refprior/image.hpp"

// Independent reference implementations shared by unit and acceptance tests.
namespace testing {

// Per-patch means summed pixel by pixel, no use of patch_grid.
inline double brute_intensity(const refprior::Image& t, const refprior::Image& r, int grid, int py, int px) {
  const int ph = t.height / grid, pw = t.width / grid;
  double st = 0.0, sr = 0.0;
  for (int y = py * ph; y < (py + 1) * ph; ++y)
    for (int x = px * pw; x < (px + 1) * pw; ++x)
      for (int c = 0; c < 3; ++c) {
        st += t.at(y, x, c);
        sr += r.at(y, x, c);
      }
  const double n = 3.0 * ph * pw;
  const double mt = st / n, mr = sr / n;
  return mt + mr == 0.0 ? 0.0 : mr / (mr + mt);
}

// Direct 2-D windowed SSIM: the 11x11 window is built as a full 2-D Gaussian
// and every statistic is a double loop over it.
inline double reference_ssim(const refprior::Image& a, const refprior::Image& b) {
  constexpr int kWin = 11;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double w[kWin][kWin], total = 0.0;
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) {
      const double dy = i - 5, dx = j - 5;
      w[i][j] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      total += w[i][j];
    }
  double channels = 0.0;
  for (int c = 0; c < 3; ++c) {
    double acc = 0.0;
    int windows = 0;
    for (int y = 0; y + kWin <= a.height; ++y)
      for (int x = 0; x + kWin <= a.width; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int i = 0; i < kWin; ++i)
          for (int j = 0; j < kWin; ++j) {
            const double k = w[i][j] / total;
            const double va = a.at(y + i, x + j, c), vb = b.at(y + i, x + j, c);
            ma += k * va;
            mb += k * vb;
            saa += k * va * va;
            sbb += k * vb * vb;
            sab += k * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++windows;
      }
    channels += acc / windows;
  }
  return channels / 3.0;
}

}  // namespace testing
