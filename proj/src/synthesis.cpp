#include "refprior/synthesis.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "refprior/rng.hpp"

namespace refprior {

namespace fs = std::filesystem;
using nlohmann::json;

double Kernel::sum() const {
  double s = 0.0;
  for (double w : weights) s += w;
  return s;
}

Kernel gaussian_kernel(double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma))
    fail(ErrorKind::Domain, "gaussian_kernel: sigma must be >= 0, got " +
                                std::to_string(sigma));
  if (sigma == 0.0) return Kernel{};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  const int side = 2 * radius + 1;
  Kernel k{side, side, radius, radius,
           std::vector<double>(static_cast<std::size_t>(side) * side)};
  double total = 0.0;
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const double dy = r - radius, dx = c - radius;
      const double w = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      k.weights[static_cast<std::size_t>(r) * side + c] = w;
      total += w;
    }
  for (double& w : k.weights) w /= total;
  return k;
}

Kernel ghost_kernel(int dx, int dy, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    fail(ErrorKind::Domain, "ghost_kernel: alpha must lie in [0,1], got " +
                                std::to_string(alpha));
  Kernel k;
  k.rows = std::abs(dy) + 1;
  k.cols = std::abs(dx) + 1;
  k.origin_row = std::max(0, -dy);
  k.origin_col = std::max(0, -dx);
  k.weights.assign(static_cast<std::size_t>(k.rows) * k.cols, 0.0);
  const double primary = 1.0 / (1.0 + alpha);
  const double secondary = alpha / (1.0 + alpha);
  k.weights[static_cast<std::size_t>(k.origin_row) * k.cols + k.origin_col] += primary;
  k.weights[static_cast<std::size_t>(k.origin_row + dy) * k.cols + k.origin_col + dx] +=
      secondary;
  return k;
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

Image convolve(const Image& img, const Kernel& kernel) {
  Image out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double acc[Image::kChannels] = {0.0, 0.0, 0.0};
      for (int r = 0; r < kernel.rows; ++r) {
        const int sy = reflect_index(y - (r - kernel.origin_row), img.height);
        for (int c = 0; c < kernel.cols; ++c) {
          const double w = kernel.at(r, c);
          if (w == 0.0) continue;
          const int sx = reflect_index(x - (c - kernel.origin_col), img.width);
          for (int ch = 0; ch < Image::kChannels; ++ch) acc[ch] += w * img.at(sy, sx, ch);
        }
      }
      for (int ch = 0; ch < Image::kChannels; ++ch) out.at(y, x, ch) = acc[ch];
    }
  return out;
}

void DegradationParams::validate() const {
  if (!(blur_sigma >= 0.0))
    fail(ErrorKind::Domain, "blur_sigma must be >= 0");
  if (!(ghost_alpha >= 0.0 && ghost_alpha <= 1.0))
    fail(ErrorKind::Domain, "ghost_alpha must lie in [0,1]");
  if (!(attenuation > 0.0 && attenuation <= 1.0))
    fail(ErrorKind::Domain, "attenuation must lie in (0,1]");
}

Superimposed superimpose(const Image& transmission, const Image& reflection,
                         const DegradationParams& params) {
  require_same_size("superimpose", transmission, reflection);
  params.validate();
  Image degraded = reflection;
  if (params.ghost_alpha > 0.0)
    degraded = convolve(degraded, ghost_kernel(params.ghost_dx, params.ghost_dy,
                                               params.ghost_alpha));
  if (params.blur_sigma > 0.0)
    degraded = convolve(degraded, gaussian_kernel(params.blur_sigma));
  for (double& v : degraded.values) v *= params.attenuation;

  Image mixture = transmission;
  for (std::size_t i = 0; i < mixture.values.size(); ++i)
    mixture.values[i] += degraded.values[i];
  return {clamp01(std::move(mixture)), std::move(degraded)};
}

void DegradationSchedule::validate() const {
  if (!(blur_sigma_min >= 0.0 && blur_sigma_min <= blur_sigma_max))
    fail(ErrorKind::Usage, "blur sigma range must satisfy 0 <= min <= max");
  if (ghost_shift_max < 0) fail(ErrorKind::Usage, "ghost shift must be >= 0");
  if (!(ghost_alpha_min >= 0.0 && ghost_alpha_min <= ghost_alpha_max &&
        ghost_alpha_max <= 1.0))
    fail(ErrorKind::Usage, "ghost alpha range must lie in [0,1] with min <= max");
  if (!(attenuation_min > 0.0 && attenuation_min <= attenuation_max &&
        attenuation_max <= 1.0))
    fail(ErrorKind::Usage, "attenuation range must lie in (0,1] with min <= max");
}

DegradationParams sample_degradation(const DegradationSchedule& schedule,
                                     std::uint64_t seed) {
  schedule.validate();
  Rng rng(seed);
  DegradationParams p;
  p.seed = seed;
  p.blur_sigma = rng.uniform(schedule.blur_sigma_min, schedule.blur_sigma_max);
  const auto span = static_cast<std::uint64_t>(2 * schedule.ghost_shift_max + 1);
  p.ghost_dx = static_cast<int>(rng.uniform_int(span)) - schedule.ghost_shift_max;
  p.ghost_dy = static_cast<int>(rng.uniform_int(span)) - schedule.ghost_shift_max;
  p.ghost_alpha = rng.uniform(schedule.ghost_alpha_min, schedule.ghost_alpha_max);
  p.attenuation = rng.uniform(schedule.attenuation_min, schedule.attenuation_max);
  return p;
}

Image procedural_scene(int size, std::uint64_t seed, double grain) {
  if (!(grain >= 0.0 && grain <= 1.0))
    fail(ErrorKind::Domain, "procedural_scene: grain must lie in [0,1], got " +
                                std::to_string(grain));
  Rng rng(seed);
  auto color = [&](double brightness) {
    return std::array<double, 3>{brightness * rng.uniform(), brightness * rng.uniform(),
                                 brightness * rng.uniform()};
  };
  const double brightness = rng.uniform(0.35, 1.0);
  const auto c00 = color(brightness), c01 = color(brightness);
  const auto c10 = color(brightness), c11 = color(brightness);
  Image img(size, size);
  const double denom = std::max(1, size - 1);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double u = x / denom, v = y / denom;
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = (1 - v) * ((1 - u) * c00[c] + u * c01[c]) +
                          v * ((1 - u) * c10[c] + u * c11[c]);
    }

  const int shapes = 3 + static_cast<int>(rng.uniform_int(5));
  for (int s = 0; s < shapes; ++s) {
    const auto kind = rng.uniform_int(3);
    const auto fill = color(rng.uniform(0.3, 1.0));
    const double cy = rng.uniform(0, size), cx = rng.uniform(0, size);
    const double ry = rng.uniform(size * 0.08, size * 0.4);
    const double rx = rng.uniform(size * 0.08, size * 0.4);
    const double freq = rng.uniform(0.15, 0.9);
    const double phase = rng.uniform(0, 2 * std::numbers::pi);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double ny = (y - cy) / ry, nx = (x - cx) / rx;
        double weight = 0.0;
        if (kind == 0) {
          weight = (std::abs(ny) <= 1 && std::abs(nx) <= 1) ? 1.0 : 0.0;
        } else if (kind == 1) {
          weight = (ny * ny + nx * nx <= 1) ? 1.0 : 0.0;
        } else if (std::abs(ny) <= 1 && std::abs(nx) <= 1) {
          weight = 0.5 + 0.5 * std::sin(freq * (x + y) + phase);
        }
        if (weight == 0.0) continue;
        for (int c = 0; c < 3; ++c)
          img.at(y, x, c) = (1 - weight) * img.at(y, x, c) + weight * fill[c];
      }
  }
  // Multiplicative albedo grain: local contrast scales with local brightness.
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double g = 1.0 + grain * rng.uniform(-1.0, 1.0);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) *= g;
    }
  return quantize8(clamp01(std::move(img)));
}

void write_procedural_sources(const fs::path& dir, int count, int size,
                              std::uint64_t seed, const std::string& prefix, double grain) {
  fs::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    std::ostringstream name;
    name << prefix << std::setw(4) << std::setfill('0') << i << ".ppm";
    save_ppm(procedural_scene(size, derive_seed(seed, prefix, i), grain), dir / name.str());
  }
}

std::vector<fs::path> list_ppm(const fs::path& dir) {
  if (!fs::is_directory(dir))
    fail(ErrorKind::Io, "'" + dir.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ppm")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  return files;
}

namespace {

Image fit_to_size(const Image& img, int size) {
  Image square = center_crop_square(img);
  if (square.height == size) return square;
  return resize_nearest(square, size, size);
}

json params_to_json(const DegradationParams& p) {
  return json{{"blur_sigma", p.blur_sigma},   {"ghost_dx", p.ghost_dx},
              {"ghost_dy", p.ghost_dy},       {"ghost_alpha", p.ghost_alpha},
              {"attenuation", p.attenuation}, {"seed", p.seed}};
}

DegradationParams params_from_json(const json& j) {
  DegradationParams p;
  p.blur_sigma = j.at("blur_sigma").get<double>();
  p.ghost_dx = j.at("ghost_dx").get<int>();
  p.ghost_dy = j.at("ghost_dy").get<int>();
  p.ghost_alpha = j.at("ghost_alpha").get<double>();
  p.attenuation = j.at("attenuation").get<double>();
  p.seed = j.at("seed").get<std::uint64_t>();
  return p;
}

}  // namespace

DatasetManifest build_dataset(const DatasetOptions& options) {
  options.schedule.validate();
  if (options.size < 1) fail(ErrorKind::Usage, "dataset image size must be positive");
  if (options.grids.empty()) fail(ErrorKind::Usage, "at least one prior grid is required");
  for (int g : options.grids)
    if (g < 1 || options.size % g != 0)
      fail(ErrorKind::Usage, "image size " + std::to_string(options.size) +
                                 " is not divisible by grid " + std::to_string(g));
  const auto t_files = list_ppm(options.transmission_dir);
  const auto r_files = list_ppm(options.reflection_dir);
  if (t_files.empty())
    fail(ErrorKind::Io, "no .ppm files in '" + options.transmission_dir.string() + "'");
  if (r_files.empty())
    fail(ErrorKind::Io, "no .ppm files in '" + options.reflection_dir.string() + "'");

  std::vector<Image> reflections;
  reflections.reserve(r_files.size());
  for (const auto& f : r_files) reflections.push_back(fit_to_size(load_ppm(f), options.size));

  fs::create_directories(options.out_dir / "images");
  DatasetManifest manifest{options.out_dir, {}};
  for (std::size_t i = 0; i < t_files.size(); ++i) {
    const std::uint64_t sample_seed = derive_seed(options.seed, "sample", i);
    Rng pick(derive_seed(sample_seed, "reflection-source"));
    const Image transmission = fit_to_size(load_ppm(t_files[i]), options.size);
    const Image& reflection = reflections[pick.uniform_int(reflections.size())];
    const DegradationParams params = sample_degradation(options.schedule, sample_seed);
    const Superimposed mix = superimpose(transmission, reflection, params);

    std::ostringstream id;
    id << 's' << std::setw(4) << std::setfill('0') << i;
    ManifestRecord rec;
    rec.id = id.str();
    rec.path_mixture = "images/" + rec.id + "_I.ppm";
    rec.path_transmission = "images/" + rec.id + "_T.ppm";
    rec.path_reflection = "images/" + rec.id + "_R.ppm";
    rec.params = params;
    save_ppm(mix.mixture, manifest.resolve(rec.path_mixture));
    save_ppm(transmission, manifest.resolve(rec.path_transmission));
    save_ppm(mix.reflection_degraded, manifest.resolve(rec.path_reflection));

    const Image stored_t = quantize8(transmission);
    const Image stored_r = quantize8(mix.reflection_degraded);
    for (int g : options.grids) rec.priors[g] = prior_map(stored_t, stored_r, g);
    manifest.records.push_back(std::move(rec));
  }
  write_manifest(manifest);
  return manifest;
}

void write_manifest(const DatasetManifest& manifest) {
  fs::create_directories(manifest.root);
  std::ofstream out(manifest.root / kManifestFile, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write manifest in '" + manifest.root.string() + "'");
  for (const auto& rec : manifest.records) {
    json priors = json::object();
    for (const auto& [grid, map] : rec.priors) priors[std::to_string(grid)] = map.values;
    json line{{"id", rec.id},
              {"I", rec.path_mixture},
              {"T", rec.path_transmission},
              {"R", rec.path_reflection},
              {"priors", priors},
              {"params", params_to_json(rec.params)}};
    out << line.dump() << '\n';
  }
}

DatasetManifest load_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / kManifestFile : path;
  std::ifstream in(file);
  if (!in) fail(ErrorKind::Io, "cannot open manifest '" + file.string() + "'");
  DatasetManifest manifest{file.parent_path(), {}};
  std::string line;
  std::uint64_t offset = 0;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::uint64_t line_offset = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      ManifestRecord rec;
      rec.id = j.at("id").get<std::string>();
      rec.path_mixture = j.at("I").get<std::string>();
      rec.path_transmission = j.at("T").get<std::string>();
      rec.path_reflection = j.at("R").get<std::string>();
      rec.params = params_from_json(j.at("params"));
      for (const auto& [key, values] : j.at("priors").items()) {
        PriorMap map{std::stoi(key), values.get<std::vector<double>>()};
        if (map.values.size() != static_cast<std::size_t>(map.grid) * map.grid)
          throw Error(ErrorKind::Format,
                      file.string() + ":" + std::to_string(line_no) + ": prior map for grid " +
                          key + " has " + std::to_string(map.values.size()) + " entries",
                      line_offset);
        rec.priors.emplace(map.grid, std::move(map));
      }
      manifest.records.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Format,
                  file.string() + ":" + std::to_string(line_no) + ": " + e.what(),
                  line_offset);
    }
  }
  return manifest;
}

std::vector<Sample> load_samples(const DatasetManifest& manifest) {
  std::vector<Sample> samples;
  samples.reserve(manifest.records.size());
  for (const auto& rec : manifest.records) {
    Sample s{rec.id, load_ppm(manifest.resolve(rec.path_mixture)),
             load_ppm(manifest.resolve(rec.path_transmission)),
             load_ppm(manifest.resolve(rec.path_reflection)), rec.priors};
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace refprior
