#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "refprior/metrics.hpp"
#include "refprior/optim.hpp"
#include "refprior/prrn.hpp"
#include "refprior/rpen.hpp"
#include "refprior/synthesis.hpp"

namespace refprior {

enum class PriorMode { truth, zero, rpen };

// "truth", "zero" or "rpen:<checkpoint path>".
struct PriorSource {
  PriorMode mode = PriorMode::truth;
  std::filesystem::path rpen_checkpoint;

  static PriorSource parse(const std::string& text);
  std::string str() const;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  int steps = 1;
  int batch_size = 4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  PriorSource prior;  // PRRN runs only
  int grid = 7;
  Dtype dtype = Dtype::f32;
  int log_every = 0;   // progress lines on the log stream; 0 disables
  int eval_every = 0;  // RPEN validation interval; 0 means initial and final only
  // Random dihedral transform (flips and 90-degree rotations) of every
  // training sample, applied jointly to images and prior maps.
  bool augment = false;

  void validate() const;
  AdamOptions adam() const { return {lr, beta1, beta2, eps}; }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Element k in [0, 8) of the dihedral group of the square: bit 0 transposes,
// bit 1 flips rows, bit 2 flips columns (applied in that order).
Image dihedral(const Image& img, int k);
PriorMap dihedral(const PriorMap& map, int k);

// Checkpoint helpers. The config text records the model kind, its geometry
// and the dtype so the loader can rebuild the model before assigning values.
void save_prrn(const PrrnModel& model, const std::filesystem::path& path);
PrrnModel load_prrn(const std::filesystem::path& path);
void save_rpen(const RpenModel& model, const std::filesystem::path& path);
RpenModel load_rpen(const std::filesystem::path& path);

struct LossRow {
  int step = 0;
  double loss = 0.0;
};

// Mean validation patch pixel error (x255) of the global estimate against
// the 1x1 truth and of the patch map against the grid truth.
struct ValidationRow {
  int step = 0;
  double error_grid1 = 0.0;
  double error_grid = 0.0;
};

struct RpenRun {
  RpenModel model;
  std::vector<LossRow> losses;
  std::vector<ValidationRow> validation;  // step 0 is the untrained model
};

struct PrrnRun {
  PrrnModel model;
  std::vector<LossRow> losses;
};

// Batches are drawn from a per-epoch shuffle seeded by
// derive_seed(seed, "data-order", epoch); augmentation draws come from
// derive_seed(seed, "augment", step). Training an RPEN requires grid 1
// and grid `config.grid` truth maps; the grid must match the model.
RpenRun train_rpen(std::span<const Sample> train, std::span<const Sample> validation,
                   const RpenConfig& model_config, const TrainConfig& config,
                   std::ostream* log = nullptr);

// Priors per sample for `grid` from `source`. rpen loads the checkpoint and
// predicts without touching its tensors.
std::vector<PriorMap> resolve_priors(std::span<const Sample> samples, const PriorSource& source,
                                     int grid);

PrrnRun train_prrn(std::span<const Sample> train, const PrrnConfig& model_config,
                   const TrainConfig& config, std::ostream* log = nullptr);

// Batch restorer: mixtures and their priors -> restored transmissions.
using Restorer =
    std::function<std::vector<Image>(std::span<const Image>, std::span<const PriorMap>)>;

// Per-sample metrics in sample order. `priors` may be empty; when present
// each is compared against the truth map of the same grid.
MetricsReport evaluate(std::span<const Sample> samples, std::span<const PriorMap> priors,
                       const Restorer& restore);
Restorer prrn_restorer(const PrrnModel& model);

struct AblationRow {
  int grid = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

// One PRRN per grid with truth priors, identical seed and steps; each grid
// reuses `model_config` with prior_grid replaced.
std::vector<AblationRow> ablate_grid(std::span<const Sample> train,
                                     std::span<const Sample> validation,
                                     std::span<const int> grids, const PrrnConfig& model_config,
                                     const TrainConfig& config, std::ostream* log = nullptr);

struct InferResult {
  Image restored;
  PriorMap prior;
  bool resized = false;
};

// Resizes (nearest) to the model size when needed, predicts the prior with
// the RPEN and restores with the PRRN.
InferResult infer(const Image& image, const PrrnModel& prrn, const RpenModel& rpen);

// Output files.
void write_loss_csv(std::span<const LossRow> rows, const std::filesystem::path& path);
void write_validation_csv(std::span<const ValidationRow> rows, const std::filesystem::path& path);
void write_ablation_csv(std::span<const AblationRow> rows, const std::filesystem::path& path);
std::string format_ablation_table(std::span<const AblationRow> rows);
// Pretty-printed JSON `run_config.json` in `dir`.
void write_run_config(const std::filesystem::path& dir, const nlohmann::json& config);

}  // namespace refprior
