#include "refprior/harness.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "refprior/checkpoint.hpp"
#include "refprior/optim.hpp"
#include "refprior/rng.hpp"

namespace refprior {

PriorSource PriorSource::parse(const std::string& text) {
  if (text == "truth") return {PriorMode::truth, {}};
  if (text == "zero") return {PriorMode::zero, {}};
  if (text.rfind("rpen:", 0) == 0 && text.size() > 5) return {PriorMode::rpen, text.substr(5)};
  fail(ErrorKind::Usage, "prior mode '" + text + "' is not one of truth, zero, rpen:<checkpoint>");
}

std::string PriorSource::str() const {
  switch (mode) {
    case PriorMode::truth: return "truth";
    case PriorMode::zero: return "zero";
    case PriorMode::rpen: return "rpen:" + rpen_checkpoint.string();
  }
  return "truth";
}

void TrainConfig::validate() const {
  if (steps < 1) fail(ErrorKind::Usage, "steps must be >= 1, got " + std::to_string(steps));
  if (batch_size < 1) fail(ErrorKind::Usage, "batch_size must be >= 1");
  if (!(lr > 0.0)) fail(ErrorKind::Usage, "lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    fail(ErrorKind::Usage, "beta1 and beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) fail(ErrorKind::Usage, "eps must be positive");
  if (grid < 1) fail(ErrorKind::Usage, "grid must be positive");
  if (log_every < 0 || eval_every < 0) fail(ErrorKind::Usage, "intervals must be >= 0");
  if (prior.mode == PriorMode::rpen && !std::filesystem::exists(prior.rpen_checkpoint))
    fail(ErrorKind::Io, "RPEN checkpoint '" + prior.rpen_checkpoint.string() + "' does not exist");
}

namespace {

const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  fail(ErrorKind::Format, "unknown dtype '" + s + "'");
}

}  // namespace

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"seed", c.seed},         {"steps", c.steps},
                     {"batch_size", c.batch_size}, {"lr", c.lr},
                     {"beta1", c.beta1},       {"beta2", c.beta2},
                     {"eps", c.eps},           {"prior_mode", c.prior.str()},
                     {"grid", c.grid},         {"dtype", dtype_name(c.dtype)},
                     {"log_every", c.log_every}, {"eval_every", c.eval_every},
                     {"augment", c.augment}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("seed").get_to(c.seed);
  j.at("steps").get_to(c.steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr").get_to(c.lr);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("eps").get_to(c.eps);
  c.prior = PriorSource::parse(j.at("prior_mode").get<std::string>());
  j.at("grid").get_to(c.grid);
  c.dtype = parse_dtype(j.at("dtype").get<std::string>());
  j.at("log_every").get_to(c.log_every);
  j.at("eval_every").get_to(c.eval_every);
  c.augment = j.value("augment", false);
}

namespace {

// Source coordinates of destination (y, x) on an n x n lattice.
std::pair<int, int> dihedral_source(int y, int x, int n, int k) {
  if (k & 4) x = n - 1 - x;
  if (k & 2) y = n - 1 - y;
  if (k & 1) std::swap(y, x);
  return {y, x};
}

}  // namespace

Image dihedral(const Image& img, int k) {
  if (k < 0 || k >= 8) fail(ErrorKind::Usage, "dihedral index must lie in [0, 8)");
  if (k == 0) return img;
  if (img.height != img.width)
    fail(ErrorKind::Shape, "dihedral transforms need a square image, got " +
                               std::to_string(img.height) + "x" + std::to_string(img.width));
  const int n = img.height;
  Image out(n, n, 0.0);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const auto [sy, sx] = dihedral_source(y, x, n, k);
      for (int c = 0; c < Image::kChannels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  return out;
}

PriorMap dihedral(const PriorMap& map, int k) {
  if (k < 0 || k >= 8) fail(ErrorKind::Usage, "dihedral index must lie in [0, 8)");
  PriorMap out = map;
  for (int y = 0; y < map.grid; ++y)
    for (int x = 0; x < map.grid; ++x) {
      const auto [sy, sx] = dihedral_source(y, x, map.grid, k);
      out.values[static_cast<std::size_t>(y) * map.grid + x] = map.at(sy, sx);
    }
  return out;
}

// ---------------------------------------------------------------- checkpoints

namespace {

template <class Config>
void save_model(const char* kind, const Config& config, const ParameterSet& params,
                const std::filesystem::path& path) {
  const nlohmann::json meta{{"kind", kind}, {"dtype", dtype_name(params.dtype())}, {"config", config}};
  save_checkpoint({kCheckpointVersion, meta.dump(), params.entries()}, path);
}

template <class Model, class Config>
Model load_model(const char* kind, const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  nlohmann::json meta;
  Config config;
  Dtype dtype;
  try {
    meta = nlohmann::json::parse(ck.config_text);
    if (meta.at("kind").get<std::string>() != kind)
      fail(ErrorKind::Format, path.string() + ": checkpoint holds a '" +
                                  meta.at("kind").get<std::string>() + "' model, expected '" +
                                  kind + "'");
    config = meta.at("config").get<Config>();
    dtype = parse_dtype(meta.at("dtype").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": bad checkpoint config: " + e.what());
  }
  DtypeGuard guard(dtype);
  Model model(config, 0);
  assign_parameters(model.parameters(), ck.tensors, path.string());
  return model;
}

}  // namespace

void save_prrn(const PrrnModel& model, const std::filesystem::path& path) {
  save_model("prrn", model.config(), model.parameters(), path);
}

PrrnModel load_prrn(const std::filesystem::path& path) {
  return load_model<PrrnModel, PrrnConfig>("prrn", path);
}

void save_rpen(const RpenModel& model, const std::filesystem::path& path) {
  save_model("rpen", model.config(), model.parameters(), path);
}

RpenModel load_rpen(const std::filesystem::path& path) {
  return load_model<RpenModel, RpenConfig>("rpen", path);
}

// ------------------------------------------------------------------- training

namespace {

// Endless stream of batch indices, reshuffled every epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : n_(n), batch_(std::min(batch, n)), seed_(seed) {
    if (n == 0) fail(ErrorKind::Usage, "training set is empty");
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (out.size() < batch_) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, "data-order", epoch_++));
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng.uniform_int(i)]);
    cursor_ = 0;
  }

  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

const PriorMap& truth_map(const Sample& s, int grid) {
  auto it = s.priors.find(grid);
  if (it == s.priors.end())
    fail(ErrorKind::Shape, "sample '" + s.id + "' has no truth prior for grid " +
                               std::to_string(grid));
  return it->second;
}

double checked_loss(const Tensor& loss, int step) {
  const double v = loss.item();
  if (!std::isfinite(v))
    fail(ErrorKind::Numerical, "non-finite loss " + std::to_string(v) + " at step " +
                                   std::to_string(step));
  return v;
}

void step_adam(ParameterSet& params, const Tensor& loss, AdamState& state,
               const AdamOptions& options) {
  std::vector<Tensor> tensors = params.tensors();
  const std::vector<Tensor> grads = gradients(loss, tensors);
  adam_step(tensors, grads, state, options);
}

ValidationRow validate_rpen(const RpenModel& model, std::span<const Sample> samples, int grid,
                            int step) {
  ValidationRow row{step, 0.0, 0.0};
  if (samples.empty()) return row;
  NoGradGuard no_grad;
  constexpr std::size_t kChunk = 16;
  for (std::size_t begin = 0; begin < samples.size(); begin += kChunk) {
    const std::size_t end = std::min(samples.size(), begin + kChunk);
    std::vector<Image> images;
    for (std::size_t i = begin; i < end; ++i) images.push_back(samples[i].mixture);
    const PriorPrediction pred = model.forward(images_to_tensor(images, model.parameters().dtype()));
    const auto globals = pred.globals();
    const auto maps = pred.patch_maps();
    for (std::size_t i = begin; i < end; ++i) {
      row.error_grid1 += patch_pixel_error(PriorMap::filled(1, globals[i - begin]),
                                           truth_map(samples[i], 1)).pixel_units;
      row.error_grid += patch_pixel_error(maps[i - begin], truth_map(samples[i], grid)).pixel_units;
    }
  }
  row.error_grid1 /= static_cast<double>(samples.size());
  row.error_grid /= static_cast<double>(samples.size());
  return row;
}

}  // namespace

RpenRun train_rpen(std::span<const Sample> train, std::span<const Sample> validation,
                   const RpenConfig& model_config, const TrainConfig& config, std::ostream* log) {
  config.validate();
  model_config.validate();
  if (config.grid != model_config.feature_grid)
    fail(ErrorKind::Shape, "RPEN predicts a " + std::to_string(model_config.feature_grid) +
                               "x" + std::to_string(model_config.feature_grid) +
                               " map but the training grid is " + std::to_string(config.grid));
  for (const auto& s : train) {
    truth_map(s, 1);
    truth_map(s, config.grid);
  }
  for (const auto& s : validation) {
    truth_map(s, 1);
    truth_map(s, config.grid);
  }

  DtypeGuard guard(config.dtype);
  RpenRun run{RpenModel(model_config, config.seed), {}, {}};
  ParameterSet& params = run.model.parameters();
  run.validation.push_back(validate_rpen(run.model, validation, config.grid, 0));

  BatchSampler sampler(train.size(), static_cast<std::size_t>(config.batch_size), config.seed);
  AdamState state;
  for (int step = 1; step <= config.steps; ++step) {
    std::vector<Image> images;
    std::vector<PriorMap> t1, tg;
    Rng aug(derive_seed(config.seed, "augment", static_cast<std::uint64_t>(step)));
    for (std::size_t i : sampler.next()) {
      const int k = config.augment ? static_cast<int>(aug.uniform_int(8)) : 0;
      images.push_back(dihedral(train[i].mixture, k));
      t1.push_back(truth_map(train[i], 1));
      tg.push_back(dihedral(truth_map(train[i], config.grid), k));
    }
    const Tensor loss =
        rpen_loss(run.model.forward(images_to_tensor(images, config.dtype)), t1, tg);
    const double value = checked_loss(loss, step);
    step_adam(params, loss, state, config.adam());
    run.losses.push_back({step, value});
    if (log && config.log_every > 0 && step % config.log_every == 0)
      *log << "rpen step " << step << " loss " << value << '\n';
    const bool eval_now = config.eval_every > 0 && step % config.eval_every == 0;
    if (eval_now || step == config.steps) {
      run.validation.push_back(validate_rpen(run.model, validation, config.grid, step));
      if (log && config.log_every > 0)
        *log << "rpen step " << step << " validation error grid1 "
             << run.validation.back().error_grid1 << " grid" << config.grid << ' '
             << run.validation.back().error_grid << '\n';
    }
  }
  return run;
}

std::vector<PriorMap> resolve_priors(std::span<const Sample> samples, const PriorSource& source,
                                     int grid) {
  std::vector<PriorMap> out;
  switch (source.mode) {
    case PriorMode::truth:
      for (const auto& s : samples) out.push_back(truth_map(s, grid));
      break;
    case PriorMode::zero:
      out.assign(samples.size(), PriorMap::filled(grid, 0.0));
      break;
    case PriorMode::rpen: {
      if (!std::filesystem::exists(source.rpen_checkpoint))
        fail(ErrorKind::Io,
             "RPEN checkpoint '" + source.rpen_checkpoint.string() + "' does not exist");
      RpenModel rpen = load_rpen(source.rpen_checkpoint);
      rpen.parameters().set_trainable(false);
      if (rpen.config().feature_grid != grid)
        fail(ErrorKind::Shape, "RPEN checkpoint '" + source.rpen_checkpoint.string() +
                                   "' predicts grid " +
                                   std::to_string(rpen.config().feature_grid) +
                                   " but grid " + std::to_string(grid) + " was requested");
      constexpr std::size_t kChunk = 16;
      for (std::size_t begin = 0; begin < samples.size(); begin += kChunk) {
        std::vector<Image> images;
        for (std::size_t i = begin; i < std::min(samples.size(), begin + kChunk); ++i)
          images.push_back(samples[i].mixture);
        for (auto& m : rpen_predict(images, rpen)) out.push_back(std::move(m));
      }
      break;
    }
  }
  return out;
}

PrrnRun train_prrn(std::span<const Sample> train, const PrrnConfig& model_config,
                   const TrainConfig& config, std::ostream* log) {
  config.validate();
  model_config.validate();
  if (config.grid != model_config.prior_grid)
    fail(ErrorKind::Shape, "training grid " + std::to_string(config.grid) +
                               " differs from the model prior grid " +
                               std::to_string(model_config.prior_grid));
  const std::vector<PriorMap> priors = resolve_priors(train, config.prior, config.grid);

  DtypeGuard guard(config.dtype);
  PrrnRun run{PrrnModel(model_config, config.seed), {}};
  BatchSampler sampler(train.size(), static_cast<std::size_t>(config.batch_size), config.seed);
  AdamState state;
  for (int step = 1; step <= config.steps; ++step) {
    std::vector<Image> images, targets;
    std::vector<PriorMap> batch_priors;
    Rng aug(derive_seed(config.seed, "augment", static_cast<std::uint64_t>(step)));
    for (std::size_t i : sampler.next()) {
      const int k = config.augment ? static_cast<int>(aug.uniform_int(8)) : 0;
      images.push_back(dihedral(train[i].mixture, k));
      targets.push_back(dihedral(train[i].transmission, k));
      batch_priors.push_back(dihedral(priors[i], k));
    }
    const Tensor restored =
        prrn_forward(images_to_tensor(images, config.dtype), batch_priors, run.model);
    const Tensor loss = prrn_loss(restored, images_to_tensor(targets, config.dtype));
    const double value = checked_loss(loss, step);
    step_adam(run.model.parameters(), loss, state, config.adam());
    run.losses.push_back({step, value});
    if (log && config.log_every > 0 && step % config.log_every == 0)
      *log << "prrn step " << step << " loss " << value << '\n';
  }
  return run;
}

// ----------------------------------------------------------------- evaluation

MetricsReport evaluate(std::span<const Sample> samples, std::span<const PriorMap> priors,
                       const Restorer& restore) {
  if (!priors.empty() && priors.size() != samples.size())
    fail(ErrorKind::Shape, "evaluate: " + std::to_string(priors.size()) + " priors for " +
                               std::to_string(samples.size()) + " samples");
  MetricsReport report;
  constexpr std::size_t kChunk = 8;
  for (std::size_t begin = 0; begin < samples.size(); begin += kChunk) {
    const std::size_t end = std::min(samples.size(), begin + kChunk);
    std::vector<Image> mixtures;
    for (std::size_t i = begin; i < end; ++i) mixtures.push_back(samples[i].mixture);
    const std::span<const PriorMap> chunk_priors =
        priors.empty() ? priors : priors.subspan(begin, end - begin);
    const std::vector<Image> restored = restore(mixtures, chunk_priors);
    if (restored.size() != mixtures.size())
      fail(ErrorKind::Shape, "evaluate: restorer returned " + std::to_string(restored.size()) +
                                 " images for " + std::to_string(mixtures.size()));
    for (std::size_t i = begin; i < end; ++i) {
      const Sample& s = samples[i];
      SampleMetrics m;
      m.id = s.id;
      m.truth_prior = truth_map(s, 1).values[0];
      m.category = reflection_category(m.truth_prior);
      m.psnr_db = psnr(restored[i - begin], s.transmission);
      m.ssim = ssim(restored[i - begin], s.transmission);
      m.input_psnr_db = psnr(s.mixture, s.transmission);
      m.input_ssim = ssim(s.mixture, s.transmission);
      if (!priors.empty())
        m.prior_pixel_error =
            patch_pixel_error(priors[i], truth_map(s, priors[i].grid)).pixel_units;
      report.samples.push_back(std::move(m));
    }
  }
  return report;
}

Restorer prrn_restorer(const PrrnModel& model) {
  return [&model](std::span<const Image> images, std::span<const PriorMap> priors) {
    return prrn_restore(images, priors, model);
  };
}

std::vector<AblationRow> ablate_grid(std::span<const Sample> train,
                                     std::span<const Sample> validation,
                                     std::span<const int> grids, const PrrnConfig& model_config,
                                     const TrainConfig& config, std::ostream* log) {
  if (grids.empty()) fail(ErrorKind::Usage, "ablate_grid: no grids requested");
  // Reject the whole sweep up front rather than after training earlier grids.
  for (int g : grids) {
    PrrnConfig c = model_config;
    c.prior_grid = g;
    c.validate();
    for (const auto& s : train) truth_map(s, g);
    for (const auto& s : validation) truth_map(s, g);
  }
  std::vector<AblationRow> rows;
  for (int g : grids) {
    PrrnConfig c = model_config;
    c.prior_grid = g;
    TrainConfig tc = config;
    tc.grid = g;
    tc.prior = {PriorMode::truth, {}};
    if (log) *log << "ablation: grid " << g << '\n';
    const PrrnRun run = train_prrn(train, c, tc, log);
    const auto priors = resolve_priors(validation, tc.prior, g);
    const MetricsSummary s = evaluate(validation, priors, prrn_restorer(run.model)).summary();
    rows.push_back({g, s.psnr_db, s.ssim});
  }
  return rows;
}

InferResult infer(const Image& image, const PrrnModel& prrn, const RpenModel& rpen) {
  const int size = prrn.config().image_size;
  if (rpen.config().image_size != size)
    fail(ErrorKind::Shape, "RPEN image size " + std::to_string(rpen.config().image_size) +
                               " differs from PRRN image size " + std::to_string(size));
  InferResult result;
  Image input = image;
  if (input.height != size || input.width != size) {
    input = resize_nearest(input, size, size);
    result.resized = true;
  }
  const std::vector<Image> batch{input};
  result.prior = rpen_predict(batch, rpen).front();
  const std::vector<PriorMap> priors{result.prior};
  result.restored = prrn_restore(batch, priors, prrn).front();
  return result;
}

// --------------------------------------------------------------------- output

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  return out;
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_loss_csv(std::span<const LossRow> rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "step,loss\n";
  for (const auto& r : rows) out << r.step << ',' << g17(r.loss) << '\n';
}

void write_validation_csv(std::span<const ValidationRow> rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "step,patch_error_grid1,patch_error_grid\n";
  for (const auto& r : rows)
    out << r.step << ',' << g17(r.error_grid1) << ',' << g17(r.error_grid) << '\n';
}

void write_ablation_csv(std::span<const AblationRow> rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "grid,psnr_db,ssim\n";
  for (const auto& r : rows) out << r.grid << ',' << g17(r.psnr_db) << ',' << g17(r.ssim) << '\n';
}

std::string format_ablation_table(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << "grid    PSNR(dB)   SSIM\n";
  for (const auto& r : rows) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%2dx%-2d  %9.3f  %6.4f\n", r.grid, r.grid, r.psnr_db, r.ssim);
    os << buf;
  }
  return os.str();
}

void write_run_config(const std::filesystem::path& dir, const nlohmann::json& config) {
  auto out = open_out(dir / "run_config.json");
  out << config.dump(2) << '\n';
}

}  // namespace refprior
