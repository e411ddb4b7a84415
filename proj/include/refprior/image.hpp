#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "refprior/tensor.hpp"

namespace refprior {

// Row-major RGB image with interleaved channels, values in [0,1].
struct Image {
  static constexpr int kChannels = 3;

  int height = 0;
  int width = 0;
  std::vector<double> values;

  Image() = default;
  Image(int h, int w, double fill = 0.0);

  double& at(int y, int x, int c) {
    return values[(static_cast<std::size_t>(y) * width + x) * kChannels + c];
  }
  double at(int y, int x, int c) const {
    return values[(static_cast<std::size_t>(y) * width + x) * kChannels + c];
  }
  std::size_t size() const { return values.size(); }
  bool same_size(const Image& other) const {
    return height == other.height && width == other.width;
  }
  double mean() const;
};

// Throws Shape when dimensions differ.
void require_same_size(const char* what, const Image& a, const Image& b);

Image clamp01(Image img);
// Maps every value v to round(clamp(v,0,1) * 255) / 255.
Image quantize8(Image img);

// Binary PPM (P6, maxval 255). load: byte b -> b/255. save: v -> round(clamp(v)*255).
// Saved files use the header "P6\n<w> <h>\n255\n".
Image load_ppm(const std::filesystem::path& path);
void save_ppm(const Image& img, const std::filesystem::path& path);

// Binary PGM (P5, maxval 255) for single-channel maps.
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bytes;
};
GrayImage load_pgm(const std::filesystem::path& path);
void save_pgm(const GrayImage& img, const std::filesystem::path& path);

// Largest centred square crop.
Image center_crop_square(const Image& img);
// Nearest-neighbour resampling: source index = floor(dst * src / dst_size).
Image resize_nearest(const Image& img, int height, int width);

// Batch of equally sized images -> [N,3,H,W] tensor in the given dtype.
Tensor images_to_tensor(std::span<const Image> images,
                        Dtype dtype = default_dtype());
// [N,3,H,W] -> images (values are copied as-is, not clamped).
std::vector<Image> tensor_to_images(const Tensor& batch);

}  // namespace refprior
