// Acceptance suite: one PASS/FAIL line per criterion.
//   acceptance [--cli <refprior binary>] [criterion numbers...]

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "oracles.hpp"
#include "refprior/checkpoint.hpp"
#include "refprior/gradsuite.hpp"
#include "refprior/harness.hpp"
#include "refprior/metrics.hpp"
#include "refprior/prior.hpp"

using namespace refprior;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Appends "name=value" and folds `ok` into the outcome.
void note(Outcome& o, bool ok, const std::string& text) {
  o.pass = o.pass && ok;
  if (!o.detail.empty()) o.detail += "; ";
  o.detail += text + (ok ? "" : " (!)");
}

std::string num(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

std::string cli_path;

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = run_gradient_suite();
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  double worst = 0.0;
  std::string worst_name;
  int primitives = 0, few_cases = 0;
  for (const auto& e : entries) {
    if (e.max_relative_error > worst) worst = e.max_relative_error, worst_name = e.name;
    const bool model = e.name.rfind("prrn", 0) == 0 || e.name.rfind("rpen", 0) == 0;
    if (!model) {
      ++primitives;
      if (e.cases < 20) ++few_cases;
    }
  }
  note(o, worst < 1e-4, "max rel err " + num(worst) + " (" + worst_name + ") < 1e-4");
  note(o, few_cases == 0, std::to_string(primitives) + " primitives with >= 20 cases");
  note(o, entries.size() > static_cast<std::size_t>(primitives), "model losses included");
  note(o, secs < 120.0, "runtime " + num(secs, 3) + " s < 120 s");
  return o;
}

Outcome prior_oracle() {
  Outcome o;
  Rng rng(2024);
  double worst = 0.0, complement = 0.0, scale = 0.0;
  bool in_range = true;
  for (int trial = 0; trial < 100; ++trial) {
    const Image t = testing::random_image(56, 56, rng);
    const Image r = testing::random_image(56, 56, rng, 0.0, rng.uniform(0.1, 1.0));
    for (int grid : {1, 7, 14, 28}) {
      const PriorMap m = prior_map(t, r, grid);
      const PriorMap swapped = prior_map(r, t, grid);
      for (int py = 0; py < grid; ++py)
        for (int px = 0; px < grid; ++px) {
          const double v = m.at(py, px);
          worst = std::max(worst, std::abs(v - testing::brute_intensity(t, r, grid, py, px)));
          complement = std::max(complement, std::abs(v + swapped.at(py, px) - 1.0));
          in_range = in_range && v >= 0.0 && v <= 1.0;
        }
    }
    const double c = rng.uniform(0.01, 10.0);
    Image ts = t, rs = r;
    for (double& v : ts.values) v *= c;
    for (double& v : rs.values) v *= c;
    scale = std::max(scale, std::abs(reflection_intensity(ts, rs) - reflection_intensity(t, r)));
  }
  note(o, worst < 1e-12, "brute-force abs err " + num(worst) + " < 1e-12");
  note(o, complement < 1e-12, "complement err " + num(complement));
  note(o, scale < 1e-12, "scale err " + num(scale));
  note(o, in_range, "range [0,1]");
  return o;
}

Outcome encoding() {
  Outcome o;
  Rng rng(7);
  double worst = 0.0, unit = 0.0;
  for (int grid : {1, 7, 14, 28}) {
    PriorMap map{grid, {}};
    for (int i = 0; i < grid * grid; ++i) map.values.push_back(rng.uniform());
    const PriorFeatures f = encode_prior(map);
    for (int p = 0; p < grid * grid; ++p)
      for (int i = 0; i < kPriorDim / 2; ++i) {
        const double arg =
            map.values[p] / std::pow(10000.0, 2.0 * i / static_cast<double>(kPriorDim));
        const double s = f.values[p * kPriorDim + 2 * i];
        const double c = f.values[p * kPriorDim + 2 * i + 1];
        worst = std::max({worst, std::abs(s - std::sin(arg)), std::abs(c - std::cos(arg))});
        unit = std::max(unit, std::abs(s * s + c * c - 1.0));
      }
  }
  note(o, worst < 1e-9, "elementwise err " + num(worst) + " < 1e-9");
  note(o, unit < 1e-9, "sin^2+cos^2 err " + num(unit) + " < 1e-9");
  return o;
}

PrrnConfig prrn_mini() {
  PrrnConfig c;
  c.base_channels = 8;
  c.prior_grid = 7;
  return c;
}

std::vector<Sample> dataset(const fs::path& root, int count, std::uint64_t seed) {
  return load_samples(testing::procedural_dataset(root, count, seed));
}

double mean_psnr(std::span<const Sample> samples, const PrrnModel& model,
                 const PriorSource& source) {
  const auto priors = resolve_priors(samples, source, model.config().prior_grid);
  return evaluate(samples, priors, prrn_restorer(model)).summary().psnr_db;
}

Outcome overfit() {
  Outcome o;
  testing::TempDir dir("accept-overfit");
  const auto train = dataset(dir.path(), 8, 41);
  TrainConfig tc;
  tc.seed = 4;
  tc.steps = 500;
  const PrrnModel initial(prrn_mini(), tc.seed);
  const double before = mean_psnr(train, initial, {});
  const auto t0 = std::chrono::steady_clock::now();
  const PrrnRun run = train_prrn(train, prrn_mini(), tc);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double after = mean_psnr(train, run.model, {});
  note(o, after - before >= 6.0,
       "train PSNR " + num(before) + " -> " + num(after) + " dB, gain " + num(after - before) +
           " >= 6");
  note(o, secs < 600.0, "training " + num(secs, 3) + " s < 600 s");
  return o;
}

Outcome truth_prior_benefit() {
  Outcome o;
  testing::TempDir dir("accept-benefit");
  const auto train = dataset(dir / "train", 64, 11);
  const auto val = dataset(dir / "val", 16, 12);
  PriorSource zero;
  zero.mode = PriorMode::zero;
  double truth_sum = 0.0, zero_sum = 0.0;
  std::string per_seed;
  for (std::uint64_t seed = 100; seed < 105; ++seed) {
    TrainConfig tc;
    tc.seed = seed;
    tc.steps = 300;
    const double pt = mean_psnr(val, train_prrn(train, prrn_mini(), tc).model, {});
    tc.prior = zero;
    const double pz = mean_psnr(val, train_prrn(train, prrn_mini(), tc).model, zero);
    truth_sum += pt;
    zero_sum += pz;
    per_seed += (per_seed.empty() ? "" : ",") + num(pt - pz, 3);
  }
  const double gap = (truth_sum - zero_sum) / 5.0;
  note(o, gap >= 0.3,
       "mean PSNR truth " + num(truth_sum / 5.0) + " vs zero " + num(zero_sum / 5.0) +
           " dB, gap " + num(gap, 3) + " >= 0.3 (per seed " + per_seed + ")");
  return o;
}

Outcome rpen_learnability() {
  Outcome o;
  testing::TempDir dir("accept-rpen");
  const auto train = dataset(dir / "train", 64, 21);
  const auto val = dataset(dir / "val", 16, 22);
  RpenConfig mc;
  mc.stem_channels = 8;
  mc.feature_grid = 7;
  double init1 = 0.0, init7 = 0.0, final1 = 0.0, final7 = 0.0;
  for (std::uint64_t seed = 200; seed < 203; ++seed) {
    TrainConfig tc;
    tc.seed = seed;
    tc.steps = 1000;
    tc.grid = 7;
    tc.augment = true;
    tc.eval_every = 250;
    const RpenRun run = train_rpen(train, val, mc, tc);
    init1 += run.validation.front().error_grid1 / 3.0;
    init7 += run.validation.front().error_grid / 3.0;
    final1 += run.validation.back().error_grid1 / 3.0;
    final7 += run.validation.back().error_grid / 3.0;
  }
  note(o, final1 < final7, "final error grid1 " + num(final1) + " < grid7 " + num(final7));
  note(o, final1 <= 0.5 * init1,
       "grid1 " + num(init1) + " -> " + num(final1) + " (" +
           num(100.0 * (1.0 - final1 / init1), 3) + "% drop)");
  note(o, final7 <= 0.5 * init7,
       "grid7 " + num(init7) + " -> " + num(final7) + " (" +
           num(100.0 * (1.0 - final7 / init7), 3) + "% drop)");
  return o;
}

Outcome metrics_conformance() {
  Outcome o;
  Rng rng(77);
  const Image a = testing::random_image(32, 32, rng, 0.0, 0.9);
  Image shifted = a;
  for (double& v : shifted.values) v += 0.1;
  const double p = psnr(a, shifted);
  note(o, std::abs(p - 20.0) < 1e-9, "uniform 0.1 diff PSNR " + num(p, 12));
  const double p0 = psnr(Image(8, 8, 0.3), Image(8, 8, 0.4));
  note(o, std::abs(p0 - 20.0) < 1e-12, "constant images PSNR " + num(p0, 12));
  const double self = ssim(a, a);
  note(o, std::abs(self - 1.0) < 1e-9, "SSIM(x,x)-1 = " + num(self - 1.0));
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 11 + static_cast<int>(rng.uniform_int(30));
    const int w = 11 + static_cast<int>(rng.uniform_int(30));
    const Image x = testing::random_image(h, w, rng);
    Image y = x;
    const double amp = rng.uniform(0.0, 0.5);
    for (double& v : y.values) v = std::clamp(v + amp * rng.uniform(-1.0, 1.0), 0.0, 1.0);
    worst = std::max(worst, std::abs(ssim(x, y) - testing::reference_ssim(x, y)));
  }
  note(o, worst < 1e-4, "SSIM vs reference on 20 pairs " + num(worst) + " < 1e-4");
  return o;
}

// ---------------------------------------------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + cli_path + "\" " + args + " >\"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Runs the command into `out`, snapshots, removes, reruns and compares.
bool twice_identical(const std::string& args, const fs::path& out, const fs::path& log,
                     std::string& why) {
  fs::remove_all(out);
  if (run_cli(args, log) != 0) return why = "first run failed", false;
  const auto first = testing::tree_bytes(out);
  fs::remove_all(out);
  if (run_cli(args, log) != 0) return why = "second run failed", false;
  const auto second = testing::tree_bytes(out);
  if (first.empty()) return why = "no output", false;
  if (first != second) return why = "outputs differ", false;
  why = std::to_string(first.size()) + " files";
  return true;
}

template <typename F>
std::optional<Error> error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e;
  }
  return std::nullopt;
}

Outcome determinism_and_formats() {
  Outcome o;
  if (cli_path.empty() || !fs::exists(cli_path)) {
    note(o, false, "CLI binary not found (pass --cli)");
    return o;
  }
  testing::TempDir dir("accept-cli");
  const fs::path w = dir.path(), log = w / "cli.log";
  const std::string q = "\"";
  const fs::path data = w / "data", rpen = w / "rpen", prrn = w / "prrn", inf = w / "infer";
  std::string why;

  bool ok = twice_identical("synth --procedural 8 --seed 5 --out " + q + data.string() + q, data,
                            log, why);
  note(o, ok, "synth identical (" + why + ")");
  if (!ok) return o;
  const std::string manifest = q + (data / kManifestFile).string() + q;

  ok = twice_identical("train-rpen --manifest " + manifest + " --out " + q + rpen.string() + q +
                           " --seed 5 --steps 6 --eval-every 3 --stem-channels 8",
                       rpen, log, why);
  note(o, ok, "train-rpen identical (" + why + ")");
  const bool rpen_ok = ok;
  ok = twice_identical("train-prrn --manifest " + manifest + " --out " + q + prrn.string() + q +
                           " --seed 5 --steps 4 --base-channels 8 --prior-mode truth",
                       prrn, log, why);
  note(o, ok, "train-prrn identical (" + why + ")");
  if (!ok || !rpen_ok) return o;

  const DatasetManifest m = load_manifest(data / kManifestFile);
  const fs::path image = data / m.records.at(0).path_mixture;
  const std::string ckpts = " --prrn " + q + (prrn / "prrn.ckpt").string() + q + " --rpen " + q +
                            (rpen / "rpen.ckpt").string() + q;
  ok = twice_identical("infer --image " + q + image.string() + q + ckpts + " --out " + q +
                           inf.string() + q,
                       inf, log, why);
  note(o, ok, "infer identical (" + why + ")");

  // Checkpoint save -> load -> save.
  save_prrn(load_prrn(prrn / "prrn.ckpt"), w / "prrn2.ckpt");
  save_rpen(load_rpen(rpen / "rpen.ckpt"), w / "rpen2.ckpt");
  note(o,
       testing::file_bytes(prrn / "prrn.ckpt") == testing::file_bytes(w / "prrn2.ckpt") &&
           testing::file_bytes(rpen / "rpen.ckpt") == testing::file_bytes(w / "rpen2.ckpt"),
       "checkpoint round trip bit-identical");

  // Malformed inputs.
  testing::write_bytes(w / "trunc.ppm", std::string("P6\n4 4\n255\n") + std::string(10, 'x'));
  testing::write_bytes(w / "magic.ppm", "P3\n1 1\n255\n0 0 0\n");
  const auto trunc = error_of([&] { load_ppm(w / "trunc.ppm"); });
  const auto magic = error_of([&] { load_ppm(w / "magic.ppm"); });
  note(o, trunc && trunc->kind() == ErrorKind::Format && trunc->offset().has_value(),
       "truncated PPM -> Format error with offset");
  note(o, magic && magic->kind() == ErrorKind::Format && magic->offset() == 0u,
       "bad PPM magic -> Format error at offset 0");

  auto ckpt = testing::file_bytes(prrn / "prrn.ckpt");
  std::string bad_magic(ckpt.begin(), ckpt.end());
  bad_magic[0] = 'X';
  testing::write_bytes(w / "magic.ckpt", bad_magic);
  testing::write_bytes(w / "trunc.ckpt", std::string(ckpt.begin(), ckpt.begin() + ckpt.size() / 2));
  std::string bad_version(ckpt.begin(), ckpt.end());
  bad_version[4] = 9;
  testing::write_bytes(w / "version.ckpt", bad_version);
  for (const char* name : {"magic.ckpt", "trunc.ckpt", "version.ckpt"}) {
    const auto e = error_of([&] { load_prrn(w / name); });
    note(o, e && e->kind() == ErrorKind::Format, std::string(name) + " -> Format error");
  }

  const int rc_ppm = run_cli("infer --image " + q + (w / "trunc.ppm").string() + q + ckpts +
                                 " --out " + q + (w / "bad").string() + q,
                             log);
  const int rc_ckpt = run_cli("infer --image " + q + image.string() + q + " --prrn " + q +
                                  (w / "trunc.ckpt").string() + q + " --rpen " + q +
                                  (rpen / "rpen.ckpt").string() + q + " --out " + q +
                                  (w / "bad").string() + q,
                              log);
  note(o, rc_ppm == 2 && rc_ckpt == 2,
       "CLI exit codes on malformed PPM/checkpoint " + std::to_string(rc_ppm) + "/" +
           std::to_string(rc_ckpt) + " == 2");
  return o;
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*run)();
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--cli" && i + 1 < argc) {
      cli_path = argv[++i];
    } else {
      try {
        selected.insert(std::stoi(arg));
      } catch (const std::exception&) {
        std::cerr << "usage: acceptance [--cli PATH] [criterion...]\n";
        return 1;
      }
    }
  }

  const std::vector<Criterion> criteria{
      {1, "gradient suite", gradient_suite},
      {2, "prior oracle equivalence", prior_oracle},
      {3, "encoding correctness", encoding},
      {4, "overfit smoke test", overfit},
      {5, "truth-prior benefit", truth_prior_benefit},
      {6, "RPEN learnability trend", rpen_learnability},
      {7, "metrics conformance", metrics_conformance},
      {8, "determinism and formats", determinism_and_formats},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::printf("[%s] %d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
