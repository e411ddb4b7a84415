#include "refprior/rpen.hpp"

#include <string>

#include "refprior/rng.hpp"

namespace refprior {

void RpenConfig::validate() const {
  auto bad = [](const std::string& why) { fail(ErrorKind::Usage, "RPEN config: " + why); };
  if (stem_channels < 1) bad("stem_channels must be positive");
  if (feature_grid < 1) bad("feature_grid must be positive");
  if (image_size != feature_grid << kDownsamplingStages)
    bad("image_size " + std::to_string(image_size) + " must equal feature_grid * 2^" +
        std::to_string(kDownsamplingStages) + " = " +
        std::to_string(feature_grid << kDownsamplingStages));
  if (stem_channels % norm_groups != 0)
    bad(std::to_string(stem_channels) + " stem channels not divisible into " +
        std::to_string(norm_groups) + " norm groups");
  if (aspp_channels < 1) bad("aspp_channels must be positive");
  for (int d : aspp_dilations) {
    if (d < 1) bad("ASPP dilations must be >= 1");
    // A 3x3 tap at offset +-d only lands inside the grid when d < grid.
    if (d >= feature_grid)
      bad("ASPP dilation " + std::to_string(d) + " reaches only padding on a " +
          std::to_string(feature_grid) + "x" + std::to_string(feature_grid) + " feature map");
  }
}

void to_json(nlohmann::json& j, const RpenConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},       {"stem_channels", c.stem_channels},
                     {"feature_grid", c.feature_grid},   {"aspp_dilations", c.aspp_dilations},
                     {"aspp_channels", c.aspp_channels}, {"norm_groups", c.norm_groups}};
}

void from_json(const nlohmann::json& j, RpenConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("stem_channels").get_to(c.stem_channels);
  j.at("feature_grid").get_to(c.feature_grid);
  j.at("aspp_dilations").get_to(c.aspp_dilations);
  j.at("aspp_channels").get_to(c.aspp_channels);
  j.at("norm_groups").get_to(c.norm_groups);
}

SmallConvBackbone::SmallConvBackbone(const RpenConfig& config, ParameterSet& params,
                                     Rng& rng)
    : image_size_(config.image_size) {
  const std::int64_t c = config.stem_channels;
  const int g = config.norm_groups;
  stem_ = ConvBlock::create(params, "backbone.stem", 3, c, g, rng);
  stages_.push_back(ConvBlock::create(params, "backbone.stage0", c, c, g, rng, 2));
  stages_.push_back(ConvBlock::create(params, "backbone.stage1", c, 2 * c, g, rng, 2));
  stages_.push_back(ConvBlock::create(params, "backbone.stage2", 2 * c, 4 * c, g, rng, 2));
  stages_.push_back(ConvBlock::create(params, "backbone.stage3", 4 * c, 4 * c, g, rng, 1));
  out_channels_ = 4 * c;
}

Tensor SmallConvBackbone::forward(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != image_size_ ||
      images.dim(3) != image_size_)
    fail(ErrorKind::Shape, "RPEN expects [N,3," + std::to_string(image_size_) + "," +
                               std::to_string(image_size_) + "] images, got " +
                               shape_str(images.shape()));
  Tensor x = stem_(images);
  for (const auto& stage : stages_) x = stage(x);
  return x;
}

std::int64_t aspp_parameter_count(const RpenConfig& c) {
  const std::int64_t f = c.feature_channels(), a = c.aspp_channels;
  const auto branches = static_cast<std::int64_t>(c.aspp_dilations.size()) + 2;
  return static_cast<std::int64_t>(c.aspp_dilations.size()) * conv_param_count(f, a, 3) +
         conv_param_count(f, a, 1) + linear_param_count(f, a) +
         conv_param_count(branches * a, 1, 1);
}

std::int64_t rpen_parameter_count(const RpenConfig& c) {
  c.validate();
  const std::int64_t s = c.stem_channels;
  auto block = [](std::int64_t in, std::int64_t out) {
    return conv_param_count(in, out, 3) + norm_param_count(out);
  };
  const std::int64_t backbone = block(3, s) + block(s, s) + block(s, 2 * s) +
                                block(2 * s, 4 * s) + block(4 * s, 4 * s);
  return backbone + linear_param_count(c.feature_channels(), 1) + aspp_parameter_count(c);
}

Tensor global_intensity_head(const Tensor& features, const Linear& head) {
  return sigmoid(head(spatial_mean(features)));
}

Tensor aspp_refine(const Tensor& features, const AsppParams& params) {
  if (features.rank() != 4)
    fail(ErrorKind::Shape, "aspp_refine: expected [N,C,g,g], got " + shape_str(features.shape()));
  const std::int64_t n = features.dim(0), h = features.dim(2), w = features.dim(3);
  std::vector<Tensor> branches;
  for (const auto& conv : params.dilated) branches.push_back(silu(conv(features)));
  branches.push_back(silu(params.pointwise(features)));
  Tensor pooled = silu(params.pooled(spatial_mean(features)));
  branches.push_back(nearest_upsample(reshape(pooled, {n, pooled.dim(1), 1, 1}), h, w));
  return params.fuse(concat(branches, 1));
}

std::vector<PriorMap> PriorPrediction::patch_maps() const {
  const auto n = static_cast<std::size_t>(patch_map.dim(0));
  const int grid = static_cast<int>(patch_map.dim(2));
  const std::size_t cells = static_cast<std::size_t>(grid) * grid;
  std::vector<PriorMap> out(n, PriorMap::filled(grid, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < cells; ++k) out[i].values[k] = patch_map.at(i * cells + k);
  return out;
}

std::vector<double> PriorPrediction::globals() const { return global_intensity.to_vector(); }

RpenModel::RpenModel(const RpenConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(seed, "rpen-init"));
  backbone_ = std::make_unique<SmallConvBackbone>(config_, params_, rng);
  const std::int64_t f = backbone_->out_channels(), a = config_.aspp_channels;
  global_head_ = Linear::create(params_, "global_head", f, 1, rng);
  for (std::size_t i = 0; i < config_.aspp_dilations.size(); ++i)
    aspp_.dilated.push_back(Conv2d::create(params_, "aspp.dilated" + std::to_string(i), f, a, 3,
                                           rng, 1, config_.aspp_dilations[i]));
  aspp_.pointwise = Conv2d::create(params_, "aspp.pointwise", f, a, 1, rng);
  aspp_.pooled = Linear::create(params_, "aspp.pooled", f, a, rng);
  const auto branches = static_cast<std::int64_t>(config_.aspp_dilations.size()) + 2;
  aspp_.fuse = Conv2d::create(params_, "aspp.fuse", branches * a, 1, 1, rng);
}

PriorPrediction RpenModel::forward(const Tensor& images) const {
  const Tensor features = backbone_->forward(images);
  const std::int64_t n = images.dim(0), g = config_.feature_grid;
  Tensor global = global_intensity_head(features, global_head_);
  Tensor residual = aspp_refine(features, aspp_);
  Tensor broadcast = nearest_upsample(reshape(global, {n, 1, 1, 1}), g, g);
  Tensor patch = clamp(add(broadcast, mul_scalar(tanh(residual), 0.5)), 0.0, 1.0);
  return {global, patch};
}

PriorPrediction rpen_forward(const Tensor& images, const RpenModel& model) {
  return model.forward(images);
}

std::vector<PriorMap> rpen_predict(std::span<const Image> images, const RpenModel& model) {
  NoGradGuard no_grad;
  return model.forward(images_to_tensor(images, model.parameters().dtype())).patch_maps();
}

Tensor rpen_loss(const PriorPrediction& prediction, const Tensor& truth_global,
                 const Tensor& truth_patch) {
  if (prediction.global_intensity.shape() != truth_global.shape() ||
      prediction.patch_map.shape() != truth_patch.shape())
    fail(ErrorKind::Shape, "rpen_loss: prediction " +
                               shape_str(prediction.global_intensity.shape()) + "/" +
                               shape_str(prediction.patch_map.shape()) + " vs truth " +
                               shape_str(truth_global.shape()) + "/" +
                               shape_str(truth_patch.shape()));
  return add(mse_loss(prediction.global_intensity, truth_global),
             mse_loss(prediction.patch_map, truth_patch));
}

Tensor rpen_loss(const PriorPrediction& prediction, std::span<const PriorMap> truth_1,
                 std::span<const PriorMap> truth_grid) {
  const auto n = static_cast<std::int64_t>(truth_1.size());
  if (truth_grid.size() != truth_1.size() || n == 0)
    fail(ErrorKind::Shape, "rpen_loss: truth batches differ in size");
  const int grid = truth_grid.front().grid;
  std::vector<double> globals, patches;
  for (std::size_t i = 0; i < truth_1.size(); ++i) {
    if (truth_1[i].grid != 1)
      fail(ErrorKind::Shape, "rpen_loss: global truth must be a 1x1 map, got grid " +
                                 std::to_string(truth_1[i].grid));
    if (truth_grid[i].grid != grid)
      fail(ErrorKind::Shape, "rpen_loss: mixed truth grids in batch");
    globals.push_back(truth_1[i].values[0]);
    patches.insert(patches.end(), truth_grid[i].values.begin(), truth_grid[i].values.end());
  }
  const Dtype dtype = prediction.patch_map.dtype();
  return rpen_loss(prediction, Tensor::from({n, 1}, globals, dtype),
                   Tensor::from({n, 1, grid, grid}, patches, dtype));
}

}  // namespace refprior
