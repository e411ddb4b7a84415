#pragma once

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "refprior/error.hpp"
#include "refprior/image.hpp"
#include "refprior/rng.hpp"
#include "refprior/synthesis.hpp"

namespace testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("refprior-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline refprior::Image random_image(int h, int w, refprior::Rng& rng, double lo = 0.0,
                                    double hi = 1.0) {
  refprior::Image img(h, w);
  for (double& v : img.values) v = rng.uniform(lo, hi);
  return img;
}

inline std::vector<std::uint8_t> file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out << bytes;
}

// Every regular file under `root`, relative path -> contents.
inline std::vector<std::pair<std::string, std::vector<std::uint8_t>>> tree_bytes(
    const fs::path& root) {
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file())
      out.emplace_back(fs::relative(e.path(), root).string(), file_bytes(e.path()));
  std::sort(out.begin(), out.end());
  return out;
}

// Procedural sources plus a built dataset in `root`.
inline refprior::DatasetManifest procedural_dataset(const fs::path& root, int count,
                                                    std::uint64_t seed,
                                                    std::vector<int> grids = {1, 7},
                                                    int size = 56) {
  refprior::write_procedural_sources(root / "T", count, size, seed, "t");
  refprior::write_procedural_sources(root / "R", count, size, seed + 1000, "r");
  refprior::DatasetOptions opts;
  opts.transmission_dir = root / "T";
  opts.reflection_dir = root / "R";
  opts.out_dir = root / "data";
  opts.grids = std::move(grids);
  opts.size = size;
  opts.seed = seed;
  return refprior::build_dataset(opts);
}

}  // namespace testing
