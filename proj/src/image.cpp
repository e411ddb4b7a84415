#include "refprior/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

namespace refprior {

Image::Image(int h, int w, double fill)
    : height(h), width(w),
      values(static_cast<std::size_t>(h) * w * kChannels, fill) {
  if (h < 1 || w < 1)
    fail(ErrorKind::Shape, "image dimensions must be positive, got " +
                               std::to_string(h) + "x" + std::to_string(w));
}

double Image::mean() const {
  double acc = 0.0;
  for (double v : values) acc += v;
  return values.empty() ? 0.0 : acc / static_cast<double>(values.size());
}

void require_same_size(const char* what, const Image& a, const Image& b) {
  if (!a.same_size(b))
    fail(ErrorKind::Shape, std::string(what) + ": image sizes differ (" +
                               std::to_string(a.height) + "x" +
                               std::to_string(a.width) + " vs " +
                               std::to_string(b.height) + "x" +
                               std::to_string(b.width) + ")");
}

Image clamp01(Image img) {
  for (double& v : img.values) v = std::clamp(v, 0.0, 1.0);
  return img;
}

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& header,
                const std::vector<std::uint8_t>& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  if (!out) fail(ErrorKind::Io, "short write to '" + path.string() + "'");
}

// Netpbm header: magic, width, height, maxval separated by whitespace and
// '#' comments, then exactly one whitespace byte before the payload.
struct NetpbmHeader {
  int width = 0, height = 0;
  std::size_t payload_offset = 0;
};

NetpbmHeader parse_header(const std::vector<std::uint8_t>& bytes,
                          const char* magic, const std::string& name) {
  if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1])
    throw Error(ErrorKind::Format,
                "'" + name + "' is not a binary " + magic + " file", 0);
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  std::size_t field_start = 0;
  auto read_int = [&](const char* field) {
    const std::size_t before = pos;
    skip_space();
    if (pos >= bytes.size())
      throw Error(ErrorKind::Format, "'" + name + "': header truncated before " + field, pos);
    if (pos == before)
      throw Error(ErrorKind::Format, "'" + name + "': expected whitespace before " + field, pos);
    if (!std::isdigit(bytes[pos]))
      throw Error(ErrorKind::Format, "'" + name + "': " + field + " is not a number", pos);
    long value = 0;
    const std::size_t start = field_start = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + (bytes[pos] - '0');
      if (value > 1'000'000)
        throw Error(ErrorKind::Format, "'" + name + "': " + field + " too large", start);
      ++pos;
    }
    return static_cast<int>(value);
  };
  NetpbmHeader h;
  h.width = read_int("width");
  const std::size_t width_pos = field_start;
  h.height = read_int("height");
  const std::size_t height_pos = field_start;
  const int maxval = read_int("maxval");
  const std::size_t maxval_pos = field_start;
  if (h.width < 1 || h.height < 1)
    throw Error(ErrorKind::Format, "'" + name + "': zero image dimension",
                h.width < 1 ? width_pos : height_pos);
  if (maxval != 255)
    throw Error(ErrorKind::Format,
                "'" + name + "': maxval " + std::to_string(maxval) +
                    " unsupported (need 255)",
                maxval_pos);
  if (pos >= bytes.size() || !std::isspace(bytes[pos]))
    throw Error(ErrorKind::Format, "'" + name + "': missing whitespace after maxval", pos);
  h.payload_offset = pos + 1;
  return h;
}

}  // namespace

Image quantize8(Image img) {
  for (double& v : img.values) v = to_byte(v) / 255.0;
  return img;
}

Image load_ppm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto h = parse_header(bytes, "P6", path.string());
  const std::size_t need = static_cast<std::size_t>(h.width) * h.height * 3;
  if (bytes.size() - h.payload_offset < need)
    throw Error(ErrorKind::Format,
                "'" + path.string() + "': payload truncated, expected " +
                    std::to_string(need) + " bytes",
                bytes.size());
  Image img(h.height, h.width);
  for (std::size_t i = 0; i < need; ++i)
    img.values[i] = bytes[h.payload_offset + i] / 255.0;
  return img;
}

void save_ppm(const Image& img, const std::filesystem::path& path) {
  std::vector<std::uint8_t> payload(img.values.size());
  std::transform(img.values.begin(), img.values.end(), payload.begin(), to_byte);
  write_file(path,
             "P6\n" + std::to_string(img.width) + " " +
                 std::to_string(img.height) + "\n255\n",
             payload);
}

GrayImage load_pgm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto h = parse_header(bytes, "P5", path.string());
  const std::size_t need = static_cast<std::size_t>(h.width) * h.height;
  if (bytes.size() - h.payload_offset < need)
    throw Error(ErrorKind::Format,
                "'" + path.string() + "': payload truncated, expected " +
                    std::to_string(need) + " bytes",
                bytes.size());
  GrayImage img{h.height, h.width, {}};
  img.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(h.payload_offset),
                   bytes.begin() + static_cast<std::ptrdiff_t>(h.payload_offset + need));
  return img;
}

void save_pgm(const GrayImage& img, const std::filesystem::path& path) {
  if (img.bytes.size() != static_cast<std::size_t>(img.width) * img.height)
    fail(ErrorKind::Shape, "save_pgm: byte count does not match dimensions");
  write_file(path,
             "P5\n" + std::to_string(img.width) + " " +
                 std::to_string(img.height) + "\n255\n",
             img.bytes);
}

Image center_crop_square(const Image& img) {
  const int side = std::min(img.height, img.width);
  const int y0 = (img.height - side) / 2, x0 = (img.width - side) / 2;
  Image out(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      for (int c = 0; c < Image::kChannels; ++c)
        out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
  return out;
}

Image resize_nearest(const Image& img, int height, int width) {
  Image out(height, width);
  for (int y = 0; y < height; ++y) {
    const int sy = static_cast<int>(static_cast<std::int64_t>(y) * img.height / height);
    for (int x = 0; x < width; ++x) {
      const int sx = static_cast<int>(static_cast<std::int64_t>(x) * img.width / width);
      for (int c = 0; c < Image::kChannels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

Tensor images_to_tensor(std::span<const Image> images, Dtype dtype) {
  if (images.empty()) fail(ErrorKind::Shape, "images_to_tensor: empty batch");
  const int h = images.front().height, w = images.front().width;
  for (const auto& img : images) require_same_size("images_to_tensor", images.front(), img);
  const auto n = static_cast<std::int64_t>(images.size());
  Tensor out = Tensor::zeros({n, 3, h, w}, dtype);
  dispatch(dtype, [&](auto tag) {
    using S = decltype(tag);
    auto ys = out.data<S>();
    std::size_t k = 0;
    for (const auto& img : images)
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) ys[k++] = static_cast<S>(img.at(y, x, c));
  });
  return out;
}

std::vector<Image> tensor_to_images(const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(1) != 3)
    fail(ErrorKind::Shape, "tensor_to_images: expected [N,3,H,W], got " +
                               shape_str(batch.shape()));
  const int h = static_cast<int>(batch.dim(2)), w = static_cast<int>(batch.dim(3));
  std::vector<Image> out;
  std::size_t k = 0;
  for (std::int64_t n = 0; n < batch.dim(0); ++n) {
    Image img(h, w);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img.at(y, x, c) = batch.at(k++);
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace refprior
