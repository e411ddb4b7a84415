// Command-line front end: dataset synthesis, training, evaluation, ablation
// and inference.

#include <cstdio>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "refprior/checkpoint.hpp"
#include "refprior/gradsuite.hpp"
#include "refprior/harness.hpp"

namespace fs = std::filesystem;
using namespace refprior;
using nlohmann::json;

namespace {

constexpr double kGradTolerance = 1e-4;

struct ScheduleFlags {
  DegradationSchedule schedule;

  void attach(CLI::App* app) {
    app->add_option("--blur-sigma-min", schedule.blur_sigma_min)->capture_default_str();
    app->add_option("--blur-sigma-max", schedule.blur_sigma_max)->capture_default_str();
    app->add_option("--ghost-shift-max", schedule.ghost_shift_max)->capture_default_str();
    app->add_option("--ghost-alpha-min", schedule.ghost_alpha_min)->capture_default_str();
    app->add_option("--ghost-alpha-max", schedule.ghost_alpha_max)->capture_default_str();
    app->add_option("--attenuation-min", schedule.attenuation_min)->capture_default_str();
    app->add_option("--attenuation-max", schedule.attenuation_max)->capture_default_str();
  }
};

json schedule_json(const DegradationSchedule& s) {
  return {{"blur_sigma_min", s.blur_sigma_min},   {"blur_sigma_max", s.blur_sigma_max},
          {"ghost_shift_max", s.ghost_shift_max}, {"ghost_alpha_min", s.ghost_alpha_min},
          {"ghost_alpha_max", s.ghost_alpha_max}, {"attenuation_min", s.attenuation_min},
          {"attenuation_max", s.attenuation_max}};
}

struct TrainFlags {
  TrainConfig config;
  std::string prior_mode = "truth";
  int dtype_bits = 32;

  void attach(CLI::App* app, bool with_prior) {
    app->add_option("--seed", config.seed, "Seed for init, data order and augmentation")
        ->required();
    app->add_option("--steps", config.steps)->capture_default_str();
    app->add_option("--batch-size", config.batch_size)->capture_default_str();
    app->add_option("--lr", config.lr)->capture_default_str();
    app->add_option("--beta1", config.beta1)->capture_default_str();
    app->add_option("--beta2", config.beta2)->capture_default_str();
    app->add_option("--eps", config.eps)->capture_default_str();
    app->add_option("--grid", config.grid)->capture_default_str();
    app->add_option("--dtype", dtype_bits, "32 or 64")
        ->check(CLI::IsMember({32, 64}))
        ->capture_default_str();
    app->add_option("--log-every", config.log_every)->capture_default_str();
    app->add_option("--eval-every", config.eval_every)->capture_default_str();
    app->add_flag("--augment", config.augment, "Random dihedral transforms of training samples");
    if (with_prior)
      app->add_option("--prior-mode", prior_mode, "truth, zero or rpen:<checkpoint>")
          ->capture_default_str();
  }

  TrainConfig resolve() const {
    TrainConfig c = config;
    c.dtype = dtype_bits == 64 ? Dtype::f64 : Dtype::f32;
    c.prior = PriorSource::parse(prior_mode);
    return c;
  }
};

void attach_prrn_flags(CLI::App* app, PrrnConfig& c) {
  app->add_option("--image-size", c.image_size)->capture_default_str();
  app->add_option("--base-channels", c.base_channels)->capture_default_str();
  app->add_option("--channel-multipliers", c.channel_multipliers)->delimiter(',');
  app->add_option("--resblocks-per-scale", c.resblocks_per_scale)->capture_default_str();
  app->add_option("--attention-heads", c.attention_heads)->capture_default_str();
  app->add_option("--bottleneck-blocks", c.bottleneck_blocks)->capture_default_str();
  app->add_option("--norm-groups", c.norm_groups)->capture_default_str();
  app->add_flag("--fwa-scale", c.fwa_scale, "Learned multiplicative FWA gate");
}

void attach_rpen_flags(CLI::App* app, RpenConfig& c) {
  app->add_option("--image-size", c.image_size)->capture_default_str();
  app->add_option("--stem-channels", c.stem_channels)->capture_default_str();
  app->add_option("--aspp-dilations", c.aspp_dilations)->delimiter(',');
  app->add_option("--aspp-channels", c.aspp_channels)->capture_default_str();
  app->add_option("--norm-groups", c.norm_groups)->capture_default_str();
}

std::vector<Sample> samples_from(const std::string& manifest) {
  return load_samples(load_manifest(manifest));
}

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create '" + dir.string() + "': " + ec.message());
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return 1;
    case ErrorKind::Numerical: return 3;
    default: return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reflection-prior dataset synthesis, training and evaluation"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Build a synthetic dataset and manifest");
  DatasetOptions synth_opts;
  ScheduleFlags synth_schedule;
  std::string t_dir, r_dir, out_dir;
  int procedural = 0;
  double grain = kDefaultGrain;
  synth->add_option("--t-dir", t_dir, "Directory of transmission PPMs");
  synth->add_option("--r-dir", r_dir, "Directory of reflection PPMs");
  synth->add_option("--out", out_dir)->required();
  synth->add_option("--seed", synth_opts.seed)->required();
  synth->add_option("--size", synth_opts.size)->capture_default_str();
  synth->add_option("--grids", synth_opts.grids)->delimiter(',');
  synth->add_option("--procedural", procedural,
                    "Generate N procedural transmission and reflection sources");
  synth->add_option("--grain", grain, "Albedo grain of procedural sources")->capture_default_str();
  synth_schedule.attach(synth);

  // prior
  auto* prior = app.add_subcommand("prior", "Compute the reflection-intensity prior of a T/R pair");
  std::string prior_t, prior_r, heatmap_path;
  int prior_grid = 7;
  prior->add_option("--transmission", prior_t)->required();
  prior->add_option("--reflection", prior_r)->required();
  prior->add_option("--grid", prior_grid)->capture_default_str();
  prior->add_option("--heatmap", heatmap_path, "Write the map as an upscaled PGM");

  // train-rpen
  auto* train_r = app.add_subcommand("train-rpen", "Train the prior extraction network");
  TrainFlags rpen_flags;
  RpenConfig rpen_config;
  std::string manifest, val_manifest, train_out;
  train_r->add_option("--manifest", manifest)->required();
  train_r->add_option("--val-manifest", val_manifest, "Validation manifest (default: training)");
  train_r->add_option("--out", train_out)->required();
  rpen_flags.attach(train_r, false);
  attach_rpen_flags(train_r, rpen_config);

  // train-prrn
  auto* train_p = app.add_subcommand("train-prrn", "Train the prior-conditioned restorer");
  TrainFlags prrn_flags;
  PrrnConfig prrn_config;
  train_p->add_option("--manifest", manifest)->required();
  train_p->add_option("--out", train_out)->required();
  prrn_flags.attach(train_p, true);
  attach_prrn_flags(train_p, prrn_config);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a restorer checkpoint on a manifest");
  std::string prrn_ckpt, eval_prior = "truth";
  eval->add_option("--manifest", manifest)->required();
  eval->add_option("--prrn", prrn_ckpt)->required();
  eval->add_option("--prior-mode", eval_prior, "truth, zero or rpen:<checkpoint>")
      ->capture_default_str();
  eval->add_option("--out", train_out)->required();

  // ablate-grid
  auto* ablate = app.add_subcommand("ablate-grid", "Train one restorer per prior grid");
  TrainFlags ablate_flags;
  PrrnConfig ablate_config;
  std::vector<int> grids{1, 7, 14};
  ablate->add_option("--manifest", manifest)->required();
  ablate->add_option("--val-manifest", val_manifest)->required();
  ablate->add_option("--grids", grids)->delimiter(',');
  ablate->add_option("--out", train_out)->required();
  ablate_flags.attach(ablate, false);
  attach_prrn_flags(ablate, ablate_config);

  // infer
  auto* inf = app.add_subcommand("infer", "Restore one image with RPEN + PRRN");
  std::string image_path, rpen_ckpt;
  inf->add_option("--image", image_path)->required();
  inf->add_option("--prrn", prrn_ckpt)->required();
  inf->add_option("--rpen", rpen_ckpt)->required();
  inf->add_option("--out", train_out)->required();

  // gradcheck
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every primitive");
  GradSuiteOptions grad_opts;
  grad->add_option("--cases", grad_opts.cases_per_primitive)->capture_default_str();
  grad->add_option("--seed", grad_opts.seed)->capture_default_str();
  grad->add_option("--eps", grad_opts.eps)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) {
      const fs::path out = out_dir;
      prepare_dir(out);
      if (procedural > 0) {
        if (!t_dir.empty() || !r_dir.empty())
          fail(ErrorKind::Usage, "--procedural cannot be combined with --t-dir/--r-dir");
        t_dir = (out / "sources" / "T").string();
        r_dir = (out / "sources" / "R").string();
        write_procedural_sources(t_dir, procedural, synth_opts.size,
                                 derive_seed(synth_opts.seed, "transmission-sources"), "t", grain);
        write_procedural_sources(r_dir, procedural, synth_opts.size,
                                 derive_seed(synth_opts.seed, "reflection-sources"), "r", grain);
      } else if (t_dir.empty() || r_dir.empty()) {
        fail(ErrorKind::Usage, "synth needs --t-dir and --r-dir, or --procedural N");
      }
      synth_opts.transmission_dir = t_dir;
      synth_opts.reflection_dir = r_dir;
      synth_opts.out_dir = out;
      synth_opts.schedule = synth_schedule.schedule;
      const DatasetManifest m = build_dataset(synth_opts);
      write_run_config(out, {{"command", "synth"},
                             {"seed", synth_opts.seed},
                             {"t_dir", t_dir},
                             {"r_dir", r_dir},
                             {"size", synth_opts.size},
                             {"grids", synth_opts.grids},
                             {"procedural", procedural},
                             {"grain", grain},
                             {"schedule", schedule_json(synth_opts.schedule)}});
      std::cout << "wrote " << m.records.size() << " samples to " << (out / kManifestFile).string()
                << '\n';
    } else if (prior->parsed()) {
      const Image t = load_ppm(prior_t), r = load_ppm(prior_r);
      const PriorMap map = prior_map(t, r, prior_grid);
      for (int y = 0; y < map.grid; ++y) {
        for (int x = 0; x < map.grid; ++x) {
          char buf[32];
          std::snprintf(buf, sizeof buf, "%s%.6f", x ? " " : "", map.at(y, x));
          std::cout << buf;
        }
        std::cout << '\n';
      }
      if (!heatmap_path.empty()) save_pgm(prior_heatmap(map, t.height), heatmap_path);
    } else if (train_r->parsed()) {
      const TrainConfig tc = rpen_flags.resolve();
      rpen_config.feature_grid = tc.grid;
      const auto train = samples_from(manifest);
      const auto val = val_manifest.empty() ? train : samples_from(val_manifest);
      const fs::path out = train_out;
      prepare_dir(out);
      write_run_config(out, {{"command", "train-rpen"},
                             {"manifest", manifest},
                             {"val_manifest", val_manifest},
                             {"train", tc},
                             {"model", rpen_config}});
      const RpenRun run = train_rpen(train, val, rpen_config, tc, &std::cerr);
      save_rpen(run.model, out / "rpen.ckpt");
      write_loss_csv(run.losses, out / "loss.csv");
      write_validation_csv(run.validation, out / "validation.csv");
      const auto& first = run.validation.front();
      const auto& last = run.validation.back();
      std::cout << "validation patch pixel error grid 1: " << first.error_grid1 << " -> "
                << last.error_grid1 << ", grid " << tc.grid << ": " << first.error_grid << " -> "
                << last.error_grid << '\n';
    } else if (train_p->parsed()) {
      const TrainConfig tc = prrn_flags.resolve();
      prrn_config.prior_grid = tc.grid;
      const auto train = samples_from(manifest);
      const fs::path out = train_out;
      prepare_dir(out);
      write_run_config(out, {{"command", "train-prrn"},
                             {"manifest", manifest},
                             {"train", tc},
                             {"model", prrn_config}});
      const PrrnRun run = train_prrn(train, prrn_config, tc, &std::cerr);
      save_prrn(run.model, out / "prrn.ckpt");
      write_loss_csv(run.losses, out / "loss.csv");
      std::cout << "final loss " << run.losses.back().loss << '\n';
    } else if (eval->parsed()) {
      const PrrnModel model = load_prrn(prrn_ckpt);
      const PriorSource source = PriorSource::parse(eval_prior);
      const auto samples = samples_from(manifest);
      const auto priors = resolve_priors(samples, source, model.config().prior_grid);
      const MetricsReport report = evaluate(samples, priors, prrn_restorer(model));
      const fs::path out = train_out;
      prepare_dir(out);
      write_run_config(out, {{"command", "eval"},
                             {"manifest", manifest},
                             {"prrn", prrn_ckpt},
                             {"prior_mode", source.str()}});
      write_metrics_csv(report, out / "metrics.csv");
      std::cout << format_metrics_table(report);
    } else if (ablate->parsed()) {
      const TrainConfig tc = ablate_flags.resolve();
      const auto train = samples_from(manifest);
      const auto val = samples_from(val_manifest);
      const fs::path out = train_out;
      prepare_dir(out);
      write_run_config(out, {{"command", "ablate-grid"},
                             {"manifest", manifest},
                             {"val_manifest", val_manifest},
                             {"grids", grids},
                             {"train", tc},
                             {"model", ablate_config}});
      const auto rows = ablate_grid(train, val, grids, ablate_config, tc, &std::cerr);
      write_ablation_csv(rows, out / "ablation.csv");
      std::cout << format_ablation_table(rows);
    } else if (inf->parsed()) {
      const PrrnModel prrn = load_prrn(prrn_ckpt);
      const RpenModel rpen = load_rpen(rpen_ckpt);
      const Image image = load_ppm(image_path);
      const InferResult result = infer(image, prrn, rpen);
      if (result.resized)
        std::cerr << "warning: resized " << image.height << "x" << image.width << " input to "
                  << prrn.config().image_size << "x" << prrn.config().image_size
                  << " (nearest neighbour)\n";
      const fs::path out = train_out;
      prepare_dir(out);
      write_run_config(out, {{"command", "infer"},
                             {"image", image_path},
                             {"prrn", prrn_ckpt},
                             {"rpen", rpen_ckpt},
                             {"resized", result.resized}});
      save_ppm(result.restored, out / "restored.ppm");
      save_pgm(prior_heatmap(result.prior, prrn.config().image_size), out / "prior.pgm");
    } else if (grad->parsed()) {
      bool ok = true;
      for (const auto& e : run_gradient_suite(grad_opts)) {
        const bool pass = e.max_relative_error < kGradTolerance;
        ok = ok && pass;
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-18s cases %3d  elements %6zu  max rel err %.3e  %s\n",
                      e.name.c_str(), e.cases, e.elements_checked, e.max_relative_error,
                      pass ? "ok" : "FAIL");
        std::cout << buf;
      }
      if (!ok) {
        std::cerr << "gradient check failed (tolerance " << kGradTolerance << ")\n";
        return 3;
      }
    }
  } catch (const Error& e) {
    std::cerr << "refprior: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "refprior: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
