#include <cmath>

#include "refprior/prior.hpp"
#include "refprior/synthesis.hpp"
#include "support.hpp"

using namespace refprior;
using testing::capture_error;
using testing::random_image;
using testing::TempDir;

namespace {

double gaussian_weight(int dy, int dx, double sigma) {
  return std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
}

// Independent reflect-101 lookup.
double pixel_reflect(const Image& img, int y, int x, int c) {
  auto fold = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  return img.at(fold(y, img.height), fold(x, img.width), c);
}

// blur(ghost(R)) * attenuation, written from the definitions.
Image degrade_oracle(const Image& r, const DegradationParams& p) {
  Image ghosted(r.height, r.width);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (int c = 0; c < 3; ++c)
        ghosted.at(y, x, c) = (r.at(y, x, c) +
                               p.ghost_alpha * pixel_reflect(r, y - p.ghost_dy, x - p.ghost_dx, c)) /
                              (1.0 + p.ghost_alpha);
  const int rad = static_cast<int>(std::ceil(3.0 * p.blur_sigma));
  double total = 0.0;
  for (int dy = -rad; dy <= rad; ++dy)
    for (int dx = -rad; dx <= rad; ++dx) total += gaussian_weight(dy, dx, p.blur_sigma);
  Image out(r.height, r.width);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int dy = -rad; dy <= rad; ++dy)
          for (int dx = -rad; dx <= rad; ++dx)
            acc += gaussian_weight(dy, dx, p.blur_sigma) * pixel_reflect(ghosted, y - dy, x - dx, c);
        out.at(y, x, c) = p.attenuation * acc / total;
      }
  return out;
}

}  // namespace

TEST_SUITE("synthesis") {

TEST_CASE("gaussian_kernel: delta, normalization, symmetry") {
  const Kernel delta = gaussian_kernel(0.0);
  CHECK(delta.rows == 1);
  CHECK(delta.cols == 1);
  CHECK(delta.at(0, 0) == 1.0);

  for (double sigma : {0.3, 0.5, 1.0, 1.7, 2.5}) {
    const Kernel k = gaussian_kernel(sigma);
    const int n = k.rows;
    CHECK(n == 2 * static_cast<int>(std::ceil(3 * sigma)) + 1);
    CHECK(std::abs(k.sum() - 1.0) < 1e-9);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        CHECK(k.at(i, j) == k.at(j, i));
        CHECK(k.at(i, j) == doctest::Approx(k.at(n - 1 - i, n - 1 - j)).epsilon(1e-15));
      }
  }
  CHECK(capture_error([] { gaussian_kernel(-0.1); }).kind() == ErrorKind::Domain);
}

TEST_CASE("gaussian_kernel matches the discretized Gaussian") {
  for (double sigma : {1.0 / 3.0, 0.5}) {
    const Kernel k = gaussian_kernel(sigma);
    const int rad = k.rows / 2;
    if (sigma < 0.4) CHECK(k.rows == 3);
    double total = 0.0;
    for (int dy = -rad; dy <= rad; ++dy)
      for (int dx = -rad; dx <= rad; ++dx) total += gaussian_weight(dy, dx, sigma);
    for (int dy = -rad; dy <= rad; ++dy)
      for (int dx = -rad; dx <= rad; ++dx)
        CHECK(std::abs(k.at(dy + rad, dx + rad) - gaussian_weight(dy, dx, sigma) / total) < 1e-9);
  }
}

TEST_CASE("ghost_kernel weights and impulse response") {
  const Kernel id = ghost_kernel(3, -2, 0.0);
  CHECK(id.sum() == 1.0);
  Rng rng(1);
  const Image img = random_image(9, 9, rng);
  CHECK(convolve(img, id).values == img.values);

  const Kernel half = ghost_kernel(2, 0, 1.0);
  CHECK(half.rows == 1);
  CHECK(half.cols == 3);
  CHECK(half.at(0, 0) == 0.5);
  CHECK(half.at(0, 1) == 0.0);
  CHECK(half.at(0, 2) == 0.5);

  const double alpha = 0.4;
  for (auto [dx, dy] : {std::pair{2, 1}, std::pair{-3, 2}, std::pair{0, -1}}) {
    Image impulse(11, 11, 0.0);
    for (int c = 0; c < 3; ++c) impulse.at(5, 5, c) = 1.0;
    const Image out = convolve(impulse, ghost_kernel(dx, dy, alpha));
    for (int y = 0; y < 11; ++y)
      for (int x = 0; x < 11; ++x) {
        double expect = 0.0;
        if (y == 5 && x == 5) expect = 1.0 / (1.0 + alpha);
        if (y == 5 + dy && x == 5 + dx) expect = alpha / (1.0 + alpha);
        for (int c = 0; c < 3; ++c) CHECK(out.at(y, x, c) == expect);
      }
  }
  CHECK(capture_error([] { ghost_kernel(1, 1, 1.5); }).kind() == ErrorKind::Domain);
  CHECK(capture_error([] { ghost_kernel(1, 1, -0.1); }).kind() == ErrorKind::Domain);
}

TEST_CASE("reflect_index is reflect-101") {
  const std::vector<int> expect{2, 1, 0, 1, 2, 3, 4, 3, 2};
  for (int i = -2; i <= 6; ++i) CHECK(reflect_index(i, 5) == expect[i + 2]);
  CHECK(reflect_index(-7, 1) == 0);
}

TEST_CASE("superimpose constant and clamp cases") {
  const DegradationParams identity{};
  const Superimposed a = superimpose(Image(6, 6, 0.3), Image(6, 6, 0.2), identity);
  for (double v : a.mixture.values) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
  const Superimposed b = superimpose(Image(6, 6, 0.8), Image(6, 6, 0.6), identity);
  for (double v : b.mixture.values) CHECK(v == 1.0);
  CHECK(capture_error([&] { superimpose(Image(6, 6), Image(6, 5), identity); }).kind() ==
        ErrorKind::Shape);
}

TEST_CASE("superimpose matches a convolve-then-add oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const Image t = random_image(16, 20, rng, 0.0, 0.6);
    const Image r = random_image(16, 20, rng);
    DegradationParams p;
    p.blur_sigma = 1.0;
    p.ghost_dx = static_cast<int>(rng.uniform_int(7)) - 3;
    p.ghost_dy = static_cast<int>(rng.uniform_int(7)) - 3;
    p.ghost_alpha = rng.uniform(0.0, 0.5);
    p.attenuation = rng.uniform(0.2, 0.9);
    const Superimposed s = superimpose(t, r, p);
    const Image f = degrade_oracle(r, p);
    for (std::size_t i = 0; i < f.values.size(); ++i) {
      CHECK(std::abs(s.reflection_degraded.values[i] - f.values[i]) < 1e-6);
      const double mix = std::clamp(t.values[i] + f.values[i], 0.0, 1.0);
      CHECK(std::abs(s.mixture.values[i] - mix) < 1e-6);
    }
  }
}

TEST_CASE("superimpose invariants: range, exact identity, R = 0") {
  Rng rng(3);
  Image t(8, 8), r(8, 8);
  for (std::size_t i = 0; i < t.values.size(); ++i) {
    t.values[i] = static_cast<double>(rng.uniform_int(129)) / 256.0;
    r.values[i] = static_cast<double>(rng.uniform_int(128)) / 256.0;
  }
  const Superimposed s = superimpose(t, r, DegradationParams{});
  for (std::size_t i = 0; i < t.values.size(); ++i)
    CHECK(s.mixture.values[i] - t.values[i] == r.values[i]);

  for (int trial = 0; trial < 10; ++trial) {
    const Image tt = random_image(12, 12, rng, -0.2, 1.2);
    DegradationParams p = sample_degradation(DegradationSchedule{}, trial);
    const Superimposed z = superimpose(tt, Image(12, 12, 0.0), p);
    CHECK(z.mixture.values == clamp01(tt).values);
    const Superimposed any = superimpose(random_image(12, 12, rng), random_image(12, 12, rng), p);
    for (double v : any.mixture.values) CHECK((v >= 0.0 && v <= 1.0));
  }
}

TEST_CASE("sample_degradation respects the schedule and is seeded") {
  const DegradationSchedule s;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const DegradationParams p = sample_degradation(s, seed);
    CHECK(p.seed == seed);
    CHECK(p.blur_sigma >= s.blur_sigma_min);
    CHECK(p.blur_sigma <= s.blur_sigma_max);
    CHECK(std::abs(p.ghost_dx) <= s.ghost_shift_max);
    CHECK(std::abs(p.ghost_dy) <= s.ghost_shift_max);
    CHECK(p.ghost_alpha <= s.ghost_alpha_max);
    CHECK(p.attenuation >= s.attenuation_min);
    CHECK(p.attenuation <= s.attenuation_max);
    const DegradationParams q = sample_degradation(s, seed);
    CHECK(q.blur_sigma == p.blur_sigma);
    CHECK(q.attenuation == p.attenuation);
  }
}

TEST_CASE("PPM byte mapping and round trip") {
  TempDir dir("ppm");
  std::string bytes = "P6\n3 1\n255\n";
  for (int b : {0, 0, 0, 255, 255, 255, 128, 7, 200}) bytes.push_back(static_cast<char>(b));
  testing::write_bytes(dir / "a.ppm", bytes);
  const Image img = load_ppm(dir / "a.ppm");
  CHECK(img.width == 3);
  CHECK(img.height == 1);
  CHECK(img.at(0, 0, 0) == 0.0);
  CHECK(img.at(0, 1, 2) == 1.0);
  CHECK(img.at(0, 2, 0) == 128.0 / 255.0);
  CHECK(img.at(0, 2, 0) == doctest::Approx(0.50196).epsilon(1e-5));

  save_ppm(img, dir / "b.ppm");
  CHECK(testing::file_bytes(dir / "b.ppm") == testing::file_bytes(dir / "a.ppm"));

  Rng rng(4);
  const Image q = quantize8(random_image(7, 5, rng));
  save_ppm(q, dir / "c.ppm");
  save_ppm(load_ppm(dir / "c.ppm"), dir / "d.ppm");
  CHECK(testing::file_bytes(dir / "c.ppm") == testing::file_bytes(dir / "d.ppm"));
  CHECK(load_ppm(dir / "d.ppm").values == q.values);

  // Out-of-range values are clamped on save.
  Image wild(1, 1);
  wild.values = {-0.5, 1.7, 0.5};
  save_ppm(wild, dir / "e.ppm");
  const auto e = testing::file_bytes(dir / "e.ppm");
  CHECK(e[e.size() - 3] == 0);
  CHECK(e[e.size() - 2] == 255);
  CHECK(e[e.size() - 1] == 128);
}

TEST_CASE("malformed PPM inputs report byte offsets") {
  TempDir dir("badppm");
  auto error_for = [&](const std::string& bytes) {
    testing::write_bytes(dir / "x.ppm", bytes);
    return capture_error([&] { load_ppm(dir / "x.ppm"); });
  };
  const auto magic = error_for("P5\n2 2\n255\n0000");
  CHECK(magic.kind() == ErrorKind::Format);
  CHECK(magic.offset() == 0);

  const auto truncated = error_for("P6\n2 2\n255\n0123456789");
  CHECK(truncated.kind() == ErrorKind::Format);
  CHECK(truncated.offset() == 21);

  const auto maxval = error_for("P6\n2 2\n65535\n");
  CHECK(maxval.kind() == ErrorKind::Format);
  CHECK(maxval.offset() == 7);

  const auto width = error_for("P6\nx 2\n255\n");
  CHECK(width.kind() == ErrorKind::Format);
  CHECK(width.offset() == 3);

  const auto header = error_for("P6\n2 ");
  CHECK(header.kind() == ErrorKind::Format);
  CHECK(header.offset() == 5);

  CHECK(capture_error([&] { load_ppm(dir / "missing.ppm"); }).kind() == ErrorKind::Io);

  // Comments in the header are accepted.
  testing::write_bytes(dir / "c.ppm", std::string("P6\n# note\n1 1\n255\n") + "abc");
  CHECK(load_ppm(dir / "c.ppm").at(0, 0, 1) == 'b' / 255.0);
}

TEST_CASE("build_dataset counts, determinism and prior recomputation") {
  TempDir a("ds-a"), b("ds-b");
  for (const TempDir* d : {&a, &b}) {
    write_procedural_sources(d->path() / "T", 4, 64, 5, "t");
    write_procedural_sources(d->path() / "R", 1, 40, 6, "r");
  }
  auto build = [](const TempDir& d) {
    DatasetOptions o;
    o.transmission_dir = d.path() / "T";
    o.reflection_dir = d.path() / "R";
    o.out_dir = d.path() / "out";
    o.seed = 17;
    return build_dataset(o);
  };
  const DatasetManifest m = build(a);
  build(b);
  REQUIRE(m.records.size() == 4);
  for (const auto& rec : m.records) {
    REQUIRE(rec.priors.size() == 4);
    CHECK(rec.priors.at(1).values.size() == 1);
    CHECK(rec.priors.at(7).values.size() == 49);
    CHECK(rec.priors.at(14).values.size() == 196);
    CHECK(rec.priors.at(28).values.size() == 784);
  }
  CHECK(testing::tree_bytes(a / "out") == testing::tree_bytes(b / "out"));

  const DatasetManifest loaded = load_manifest(a / "out" / kManifestFile);
  REQUIRE(loaded.records.size() == 4);
  for (std::size_t i = 0; i < loaded.records.size(); ++i) {
    const auto& rec = loaded.records[i];
    CHECK(rec.id == m.records[i].id);
    const Image t = load_ppm(loaded.resolve(rec.path_transmission));
    const Image r = load_ppm(loaded.resolve(rec.path_reflection));
    const Image mix = load_ppm(loaded.resolve(rec.path_mixture));
    CHECK(t.height == 56);
    CHECK(mix.width == 56);
    for (const auto& [grid, map] : rec.priors) {
      const PriorMap oracle = prior_map(t, r, grid);
      for (std::size_t k = 0; k < map.values.size(); ++k)
        CHECK(std::abs(map.values[k] - oracle.values[k]) < 1e-6);
      CHECK(map.values == m.records[i].priors.at(grid).values);
    }
  }
}

TEST_CASE("build_dataset structured errors") {
  TempDir d("ds-err");
  write_procedural_sources(d / "T", 1, 56, 1, "t");
  std::filesystem::create_directories(d / "empty");
  DatasetOptions o;
  o.transmission_dir = d / "T";
  o.reflection_dir = d / "empty";
  o.out_dir = d / "out";
  CHECK(capture_error([&] { build_dataset(o); }).kind() == ErrorKind::Io);
  o.reflection_dir = d / "T";
  o.size = 50;
  const auto e = capture_error([&] { build_dataset(o); });
  CHECK(e.kind() == ErrorKind::Usage);
  CHECK(std::string(e.what()).find("divisible") != std::string::npos);
}

TEST_CASE("procedural scenes are deterministic, 8-bit and in range") {
  const Image a = procedural_scene(32, 9), b = procedural_scene(32, 9);
  CHECK(a.values == b.values);
  CHECK(a.values != procedural_scene(32, 10).values);
  CHECK(quantize8(a).values == a.values);
  for (double v : a.values) CHECK((v >= 0.0 && v <= 1.0));
  CHECK(capture_error([] { procedural_scene(16, 1, 1.5); }).kind() == ErrorKind::Domain);
}

}  // TEST_SUITE
